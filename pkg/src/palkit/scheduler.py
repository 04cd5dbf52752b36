"""Multi-task training: task sampling, learning-rate schedule, Adam, and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from palkit.numerics import Rng, Tensor, zero_grad
from palkit.tasks import EncodedTask, TaskSpec, score

log = logging.getLogger(__name__)

STRATEGIES = ("round_robin", "alpha", "annealed")
CSV_HEADER = ("step", "task", "kind", "name", "value")
ANNEAL_FLOOR = Fraction(1, 5)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sampling_probs(sizes: Sequence[float], alpha: float) -> np.ndarray:
    """p_i = N_i^alpha / sum_j N_j^alpha."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("sampling_probs needs at least one task size")
    if np.any(sizes < 1):
        raise ValueError(f"task sizes must be >= 1, got {sizes.tolist()}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    # Normalising by the largest size first keeps large counts from overflowing
    # and makes the result exactly invariant to a common rescaling.
    w = (sizes / sizes.max()) ** alpha
    return w / w.sum()


def anneal_alpha(e: int, E: int) -> float:
    """alpha = 1 - 0.8 (e-1)/(E-1) for epoch e in 1..E."""
    if E < 2:
        raise ValueError(f"annealed sampling needs at least 2 epochs, got E={E}")
    if not 1 <= e <= E:
        raise ValueError(f"epoch {e} outside 1..{E}")
    # exact rational arithmetic, rounded once, so the endpoints are exactly 1.0 and 0.2
    return float(1 - (1 - ANNEAL_FLOOR) * Fraction(e - 1, E - 1))


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "annealed"
    alpha: float = 1.0
    epochs: int | None = None  # annealed only; derived from the run length when None
    epoch_steps: int = 120
    task_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epoch_steps < 1:
            raise ValueError("epoch_steps must be >= 1")
        if self.epochs is not None and self.strategy == "annealed" and self.epochs < 2:
            raise ValueError(f"annealed sampling needs at least 2 epochs, got {self.epochs}")
        if any(n < 1 for n in self.task_sizes):
            raise ValueError(f"task sizes must be >= 1, got {list(self.task_sizes)}")


class SamplerState:
    """Chooses the task for each step; annealed probabilities change only at epoch boundaries."""

    def __init__(self, config: SamplerConfig, total_steps: int | None = None):
        if not config.task_sizes:
            raise ValueError("sampler needs the task sizes")
        self.config = config
        self.n_tasks = len(config.task_sizes)
        self.step = 0
        self.epoch = 1
        self.epochs = config.epochs
        if config.strategy == "annealed" and self.epochs is None:
            if total_steps is None:
                raise ValueError("annealed sampling needs epochs or total_steps")
            self.epochs = max(2, math.ceil(total_steps / config.epoch_steps))
        self.probs = self._probs_for(1)

    def alpha_for(self, epoch: int) -> float:
        cfg = self.config
        if cfg.strategy == "annealed":
            return anneal_alpha(min(epoch, self.epochs), self.epochs)
        return cfg.alpha

    def _probs_for(self, epoch: int) -> np.ndarray | None:
        if self.config.strategy == "round_robin":
            return None
        return sampling_probs(self.config.task_sizes, self.alpha_for(epoch))

    def next_task(self, rng: Rng) -> int:
        cfg = self.config
        epoch = self.step // cfg.epoch_steps + 1
        if epoch != self.epoch:
            self.epoch = epoch
            self.probs = self._probs_for(epoch)
        self.step += 1
        if cfg.strategy == "round_robin":
            return (self.step - 1) % self.n_tasks
        return rng.choice(self.n_tasks, p=self.probs)


def next_task(state: SamplerState, rng: Rng) -> int:
    return state.next_task(rng)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainRunConfig:
    total_steps: int = 3000
    batch_size: int = 32
    max_seq_len: int = 128
    warmup_frac: float = 0.1
    eval_every: int = 120
    base_lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6
    weight_decay: float = 0.01
    eval_batch_size: int = 256
    freeze_base: bool = False
    freeze_adapters: bool = False
    freeze_heads: bool = False

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must lie strictly between 0 and 1, got {self.warmup_frac}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.max_seq_len < 3:
            raise ValueError("max_seq_len must be >= 3")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.base_lr < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("base_lr and weight_decay must be >= 0 and adam_eps > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_frac * self.total_steps


def lr_at(step: int, cfg: TrainRunConfig) -> float:
    """Linear warmup to base_lr, then linear decay to zero at total_steps."""
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside 0..{total}")
    warm = cfg.warmup_steps
    if step <= warm:
        return cfg.base_lr * step / warm
    return cfg.base_lr * (total - step) / (total - warm)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay skips biases, layer-norm vectors and other 1-D parameters."""
    return value.ndim >= 2


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_run(cls, run: TrainRunConfig) -> OptimizerState:
        return cls(run.beta1, run.beta2, run.adam_eps, run.weight_decay)


def adam_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam with decoupled weight decay, in place.

    Parameters whose ``grad`` is None took no part in the step and are left
    untouched, moments included.
    """
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        t = state.t[name] = state.t[name] + 1
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        update = mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay and decays(name, p.data):
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    spec: TaskSpec
    train: EncodedTask
    dev: EncodedTask


@dataclass(frozen=True)
class MetricRow:
    step: int
    task: str
    kind: str  # train | dev
    name: str
    value: float

    def as_csv(self) -> list[str]:
        return [str(self.step), self.task, self.kind, self.name, repr(float(self.value))]


class MetricsWriter:
    """Append-only CSV sink with a fixed header."""

    def __init__(self, stream: io.TextIOBase):
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)
        self._stream = stream

    def write(self, rows: Iterable[MetricRow]) -> None:
        for r in rows:
            self._writer.writerow(r.as_csv())


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    history: list[MetricRow]
    best_step: int | None
    best_score: float | None
    best_state: dict[str, np.ndarray]
    best_scores: dict[str, float]
    final_scores: dict[str, float]
    steps_per_task: list[int]


class BatchStream:
    """Shuffled passes over one task's training set."""

    def __init__(self, data: EncodedTask, batch_size: int, rng: Rng):
        self.data = data
        self.batch_size = min(batch_size, len(data))
        self.rng = rng
        self.order = rng.permutation(len(data))
        self.cursor = 0

    def next(self):
        if self.cursor + self.batch_size > len(self.order):
            self.order = self.rng.permutation(len(self.data))
            self.cursor = 0
        idx = self.order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return self.data.batch(np.sort(idx))


def evaluate(model, t: int, data: EncodedTask, metric: str, batch_size: int = 256) -> float:
    if len(data) == 0:
        raise ValueError(f"task {t}: empty evaluation set")
    preds = []
    for start in range(0, len(data), batch_size):
        ids, seg, mask, _ = data.batch(np.arange(start, min(start + batch_size, len(data))))
        preds.append(model.predict(t, ids, seg, mask))
    return score(metric, np.concatenate(preds), data.labels)


def evaluate_all(model, tasks: Sequence[TaskData], batch_size: int = 256) -> dict[str, float]:
    return {td.spec.name: evaluate(model, t, td.dev, td.spec.metric, batch_size)
            for t, td in enumerate(tasks)}


def trainable_params(model, run: TrainRunConfig) -> dict[str, Tensor]:
    frozen = {"base": run.freeze_base, "adapter": run.freeze_adapters, "head": run.freeze_heads}
    out = {}
    for name, p in model.params.items():
        p.requires_grad = not frozen[model.group_of(name)]
        if p.requires_grad:
            out[name] = p
    return out


def train(model, tasks: Sequence[TaskData], sampler: SamplerConfig, run: TrainRunConfig,
          seed: int = 0, on_rows: Callable[[list[MetricRow]], None] | None = None) -> TrainResult:
    """Sample a task per step, take an Adam step on its batch loss, evaluate every ``eval_every`` steps.

    The returned ``best_state`` is the parameter snapshot with the highest
    mean dev score (earliest step on ties); with zero steps it is the
    initial model.
    """
    if not tasks:
        raise ValueError("train needs at least one task")
    if len(tasks) != model.n_tasks:
        raise ValueError(f"{len(tasks)} tasks given for a model with {model.n_tasks} heads")
    names = [td.spec.name for td in tasks]
    if len(set(names)) != len(names):
        raise ValueError(f"task names must be unique, got {names}")
    for td in tasks:
        if len(td.train) == 0:
            raise ValueError(f"task {td.spec.name!r} has no training examples")
    sizes = sampler.task_sizes or tuple(len(td.train) for td in tasks)
    if len(sizes) != len(tasks):
        raise ValueError(f"sampler has {len(sizes)} task sizes for {len(tasks)} tasks")
    state = SamplerState(SamplerConfig(sampler.strategy, sampler.alpha, sampler.epochs,
                                       sampler.epoch_steps, tuple(sizes)), run.total_steps)
    root = Rng(seed)
    task_rng = root.spawn(1)
    streams = [BatchStream(td.train, run.batch_size, root.spawn(100 + t)) for t, td in enumerate(tasks)]
    params = trainable_params(model, run)
    opt = OptimizerState.from_run(run)
    emit = on_rows or (lambda rows: None)

    history: list[MetricRow] = []
    best_step = best_score = None
    best_state = model.state_dict()
    best_scores: dict[str, float] = {}
    final_scores: dict[str, float] = {}
    counts = [0] * len(tasks)

    for step in range(1, run.total_steps + 1):
        t = state.next_task(task_rng)
        counts[t] += 1
        ids, seg, mask, labels = streams[t].next()
        zero_grad(model.params.values())
        loss = model.loss(t, ids, seg, mask, labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step} on task {names[t]!r}")
        lr = lr_at(step, run)
        if params:
            loss.backward()
            try:
                adam_step(params, opt, lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"step {step}, task {names[t]!r}: {exc}") from exc
        rows = [MetricRow(step, names[t], "train", "lr", lr), MetricRow(step, names[t], "train", "loss", value)]

        if step % run.eval_every == 0 or step == run.total_steps:
            scores = evaluate_all(model, tasks, run.eval_batch_size)
            avg = float(np.mean(list(scores.values())))
            rows += [MetricRow(step, n, "dev", tasks[i].spec.metric, scores[n]) for i, n in enumerate(names)]
            rows.append(MetricRow(step, "average", "dev", "score", avg))
            final_scores = scores
            if best_score is None or avg > best_score:
                best_step, best_score, best_scores = step, avg, dict(scores)
                best_state = model.state_dict()
            log.info("step %d: dev average %.4f", step, avg)
        history.extend(rows)
        emit(rows)

    for p in model.params.values():
        p.requires_grad = True
        p.grad = None
    return TrainResult(history, best_step, best_score, best_state, best_scores, final_scores, counts)


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error of the mean (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("nothing to summarize")
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se

"""Experiment configuration: a YAML document validated strictly into dataclasses.

Top-level keys: ``model``, ``adapter``, ``sampler``, ``run``, ``tasks``,
``seeds``, ``output_dir``, ``init_std``.  Unknown keys anywhere are rejected.
``model.vocab_size`` and ``model.n_tasks`` may be omitted and are filled
from the task data; the resolved document records the filled values.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml
from pydantic import ConfigDict, TypeAdapter, ValidationError

from palkit.adapters import AdapterSpec
from palkit.encoder import ModelConfig
from palkit.scheduler import SamplerConfig, TaskData, TrainRunConfig
from palkit.tasks import (
    SYNTH_VOCAB_SIZE,
    TaskDataset,
    TaskSpec,
    Vocab,
    encode_dataset,
    load_tsv,
    synth_splits,
    synth_tokens,
    with_train_size,
)


class ConfigError(ValueError):
    pass


# A vocabulary cannot be smaller than the four specials, so 1 marks "size from the data".
AUTO_VOCAB = 1


@dataclass(frozen=True)
class TaskSource:
    """One task: either a synthetic family or a pair of TSV files."""

    name: str
    family: str | None = None
    size: int | None = None
    dev_size: int = 512
    seed: int = 0
    train_path: str | None = None
    dev_path: str | None = None
    input_kind: str = "single"
    output_kind: str = "classes"
    n_classes: int = 2
    metric: str = "accuracy"

    def __post_init__(self):
        synthetic = self.family is not None
        files = self.train_path is not None or self.dev_path is not None
        if synthetic == files:
            raise ValueError(f"task {self.name!r}: give either a synthetic family or train_path/dev_path")
        if synthetic and (self.size is None or self.size < 1):
            raise ValueError(f"task {self.name!r}: synthetic tasks need size >= 1")
        if files and (self.train_path is None or self.dev_path is None):
            raise ValueError(f"task {self.name!r}: both train_path and dev_path are required")
        if synthetic and self.dev_size < 1:
            raise ValueError(f"task {self.name!r}: dev_size must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    run: TrainRunConfig = field(default_factory=TrainRunConfig)
    tasks: tuple[TaskSource, ...] = ()
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    init_std: float = 0.02

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {list(self.seeds)}")
        if not self.init_std > 0:
            raise ValueError("init_std must be positive")


_STRICT = ConfigDict(extra="forbid")
for _cls in (ModelConfig, AdapterSpec, SamplerConfig, TrainRunConfig, TaskSource, ExperimentConfig):
    _cls.__pydantic_config__ = _STRICT
_ADAPTER = TypeAdapter(ExperimentConfig)


def _format_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """``a.b.c=value`` assignments; values are parsed as YAML scalars or lists."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        path = key.strip().split(".")
        value = yaml.safe_load(text)
        node: Any = raw
        for part in path[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = path[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return raw


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    raw = copy.deepcopy(raw)
    model = raw.setdefault("model", {})
    if not isinstance(model, dict):
        raise ConfigError("model: expected a mapping")
    tasks = raw.get("tasks") or []
    model.setdefault("n_tasks", max(1, len(tasks)))
    model.setdefault("vocab_size", AUTO_VOCAB)
    try:
        cfg = _ADAPTER.validate_python(raw)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None
    return cfg


def load_config(path, overrides: list[str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config(apply_overrides(raw, overrides or []))


def _plain(value):
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=False)


# ---------------------------------------------------------------------------
# data resolution
# ---------------------------------------------------------------------------


def load_task_splits(src: TaskSource, base_dir: Path | None = None) -> tuple[TaskDataset, TaskDataset]:
    if src.family is not None:
        return synth_splits(src.family, src.size, src.dev_size, SYNTH_VOCAB_SIZE, src.seed, name=src.name)
    spec = TaskSpec(src.name, src.input_kind, src.output_kind, src.n_classes, src.metric)
    root = base_dir or Path(".")
    train = load_tsv(root / src.train_path, spec)
    dev = load_tsv(root / src.dev_path, spec)
    if len(train) == 0:
        raise ConfigError(f"task {src.name!r}: training file has no examples")
    spec = with_train_size(spec, len(train))
    train.spec = dev.spec = spec
    return train, dev


def build_vocab(splits: list[tuple[TaskDataset, TaskDataset]], sources: tuple[TaskSource, ...]) -> Vocab:
    if all(s.family is not None for s in sources):
        return Vocab(synth_tokens(SYNTH_VOCAB_SIZE))
    return Vocab.from_datasets([ds for pair in splits for ds in pair])


@dataclass
class ResolvedExperiment:
    config: ExperimentConfig
    vocab: Vocab
    tasks: list[TaskData]


def resolve(cfg: ExperimentConfig, base_dir: Path | None = None) -> ResolvedExperiment:
    """Load every task, build the vocabulary and fill the data-dependent model fields."""
    if not cfg.tasks:
        raise ConfigError("config lists no tasks")
    names = [s.name for s in cfg.tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"task names must be unique, got {names}")
    splits = [load_task_splits(s, base_dir) for s in cfg.tasks]
    vocab = build_vocab(splits, cfg.tasks)
    model = cfg.model
    if model.vocab_size == AUTO_VOCAB:
        model = replace(model, vocab_size=len(vocab))
    elif model.vocab_size < len(vocab):
        raise ConfigError(f"model.vocab_size={model.vocab_size} is smaller than the task vocabulary ({len(vocab)})")
    if model.n_tasks != len(cfg.tasks):
        raise ConfigError(f"model.n_tasks={model.n_tasks} but {len(cfg.tasks)} tasks are listed")
    if cfg.run.max_seq_len > model.max_seq_len:
        raise ConfigError(f"run.max_seq_len={cfg.run.max_seq_len} exceeds model.max_seq_len={model.max_seq_len}")
    cfg.adapter.validate_for(model)
    tasks = [TaskData(tr.spec, encode_dataset(tr, vocab, cfg.run.max_seq_len),
                      encode_dataset(dv, vocab, cfg.run.max_seq_len)) for tr, dv in splits]
    cfg = replace(cfg, model=model)
    return ResolvedExperiment(cfg, vocab, tasks)

"""Task data: TSV ingestion, whitespace vocabulary, encoding, synthetic tasks, metrics.

TSV rows are ``text_a<TAB>label`` for single-sentence tasks and
``text_a<TAB>text_b<TAB>label`` for pair tasks, with an optional header
whose last column is ``label``.  Texts are whitespace-tokenised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, UNK)
METRICS = ("accuracy", "matthews", "pearson")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    input_kind: str = "single"  # single | pair
    output_kind: str = "classes"  # classes | regression
    n_classes: int = 2
    metric: str = "accuracy"
    train_size: int = 1

    def __post_init__(self):
        if self.input_kind not in ("single", "pair"):
            raise ValueError(f"{self.name}: input_kind must be 'single' or 'pair'")
        if self.output_kind not in ("classes", "regression"):
            raise ValueError(f"{self.name}: output_kind must be 'classes' or 'regression'")
        if self.metric not in METRICS:
            raise ValueError(f"{self.name}: unknown metric {self.metric!r}")
        if (self.metric == "pearson") != (self.output_kind == "regression"):
            raise ValueError(f"{self.name}: pearson is the metric for regression tasks and only for them")
        if self.metric == "matthews" and self.n_classes != 2:
            raise ValueError(f"{self.name}: matthews correlation needs binary labels")
        if self.output_kind == "classes" and self.n_classes < 1:
            raise ValueError(f"{self.name}: n_classes must be >= 1")
        if self.train_size < 1:
            raise ValueError(f"{self.name}: train_size must be >= 1")

    @property
    def n_outputs(self) -> int:
        return 1 if self.output_kind == "regression" else self.n_classes


@dataclass(frozen=True)
class Example:
    text_a: tuple[str, ...]
    text_b: tuple[str, ...] | None = None
    label: float | int = 0


@dataclass
class TaskDataset:
    spec: TaskSpec
    examples: list[Example] = field(default_factory=list)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)


class Vocab:
    """Dense token ids; ``[PAD]`` is 0 and the other specials follow."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.tokens: list[str] = list(SPECIALS)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.index:
            self.index[token] = len(self.tokens)
            self.tokens.append(token)
        return self.index[token]

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @classmethod
    def from_datasets(cls, datasets: Iterable[TaskDataset]) -> Vocab:
        seen = set()
        for ds in datasets:
            for ex in ds:
                seen.update(ex.text_a)
                if ex.text_b:
                    seen.update(ex.text_b)
        return cls(sorted(seen - set(SPECIALS)))


# ---------------------------------------------------------------------------
# TSV
# ---------------------------------------------------------------------------


def _parse_label(raw: str, spec: TaskSpec, where: str):
    if spec.output_kind == "regression":
        try:
            value = float(raw)
        except ValueError:
            raise ValueError(f"{where}: regression label {raw!r} is not a number") from None
        if not math.isfinite(value):
            raise ValueError(f"{where}: non-finite label {raw!r}")
        return value
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{where}: class label {raw!r} is not an integer") from None
    if not 0 <= value < spec.n_classes:
        raise ValueError(f"{where}: label {value} out of range for {spec.n_classes} classes")
    return value


def load_tsv(path, spec: TaskSpec) -> TaskDataset:
    path = Path(path)
    n_cols = 3 if spec.input_kind == "pair" else 2
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if lineno == 1 and cols[-1].strip().lower() == "label":
                continue
            where = f"{path}:{lineno}"
            if len(cols) != n_cols:
                raise ValueError(f"{where}: expected {n_cols} tab-separated columns for a "
                                 f"{spec.input_kind} task, found {len(cols)}")
            label = _parse_label(cols[-1].strip(), spec, where)
            text_b = tuple(cols[1].split()) if n_cols == 3 else None
            examples.append(Example(tuple(cols[0].split()), text_b, label))
    return TaskDataset(spec, examples)


def _format_label(label, spec: TaskSpec) -> str:
    return repr(float(label)) if spec.output_kind == "regression" else str(int(label))


def export_tsv(dataset: TaskDataset, path) -> Path:
    path = Path(path)
    pair = dataset.spec.input_kind == "pair"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("text_a\ttext_b\tlabel\n" if pair else "text_a\tlabel\n")
        for ex in dataset:
            cols = [" ".join(ex.text_a)]
            if pair:
                cols.append(" ".join(ex.text_b or ()))
            cols.append(_format_label(ex.label, dataset.spec))
            fh.write("\t".join(cols) + "\n")
    return path


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def truncate_pair(a: list, b: list, budget: int) -> None:
    """Trim the longer list (``b`` on ties) one token at a time until both fit."""
    while len(a) + len(b) > budget:
        if len(a) > len(b):
            a.pop()
        else:
            b.pop()


def encode_example(ex: Example, vocab: Vocab, max_len: int):
    """``[CLS] a [SEP] (b [SEP])`` padded to ``max_len``; returns ids, segment ids, mask."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3")
    a = list(ex.text_a)
    if ex.text_b is None:
        a = a[: max_len - 2]
        toks = [CLS] + a + [SEP]
        segs = [0] * len(toks)
    else:
        b = list(ex.text_b)
        truncate_pair(a, b, max_len - 3)
        toks = [CLS] + a + [SEP] + b + [SEP]
        segs = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    n = len(toks)
    ids = np.zeros(max_len, dtype=np.int64)
    ids[:n] = [vocab[t] for t in toks]
    seg = np.zeros(max_len, dtype=np.int64)
    seg[:n] = segs
    mask = np.zeros(max_len, dtype=bool)
    mask[:n] = True
    return ids, seg, mask


def decode_ids(ids, vocab: Vocab) -> tuple[list[str], list[str] | None]:
    """Inverse of :func:`encode_example` up to truncation: (text_a, text_b or None)."""
    parts: list[list[str]] = [[]]
    for i in ids:
        tok = vocab.tokens[int(i)]
        if tok in (PAD, CLS):
            continue
        if tok == SEP:
            parts.append([])
            continue
        parts[-1].append(tok)
    parts = parts[:-1] if len(parts) > 1 else parts
    return parts[0], (parts[1] if len(parts) > 1 else None)


@dataclass
class EncodedTask:
    """Array form of one split: ids, segments and mask are (N, max_len)."""

    ids: np.ndarray
    segments: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def batch(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Rows ``index``, trimmed to the longest real sequence among them."""
        mask = self.mask[index]
        width = int(mask.sum(axis=1).max())
        return (self.ids[index, :width], self.segments[index, :width], mask[:, :width],
                self.labels[index])


def encode_dataset(dataset: TaskDataset, vocab: Vocab, max_len: int) -> EncodedTask:
    n = len(dataset)
    ids = np.zeros((n, max_len), dtype=np.int64)
    seg = np.zeros((n, max_len), dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=bool)
    regression = dataset.spec.output_kind == "regression"
    labels = np.zeros(n, dtype=np.float64 if regression else np.int64)
    for i, ex in enumerate(dataset):
        ids[i], seg[i], mask[i] = encode_example(ex, vocab, max_len)
        labels[i] = ex.label
    return EncodedTask(ids, seg, mask, labels)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

SYNTH_FAMILIES = {
    # family: (input_kind, output_kind, metric)
    "parity": ("single", "classes", "matthews"),
    "majority": ("single", "classes", "accuracy"),
    "overlap": ("pair", "classes", "accuracy"),
    "affinity": ("pair", "regression", "pearson"),
}
SYNTH_VOCAB_SIZE = 16


def synth_tokens(vocab_size: int) -> list[str]:
    return [f"w{i}" for i in range(vocab_size)]


def parity_label(tokens: Sequence[str], marked: str = "w0") -> int:
    return sum(t == marked for t in tokens) % 2


def majority_label(tokens: Sequence[str], first: str = "w1", second: str = "w2") -> int:
    return int(sum(t == second for t in tokens) > sum(t == first for t in tokens))


def overlap_label(a: Sequence[str], b: Sequence[str]) -> int:
    return int(bool(set(a) & set(b)))


def affinity_label(a: Sequence[str], b: Sequence[str]) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    return 5.0 * len(sa & sb) / len(union) if union else 0.0


def _fill(rng, pool: list[str], n: int) -> list[str]:
    return [pool[i] for i in rng.integers(0, len(pool), size=n)]


def _draw(family: str, rng, vocab: list[str]) -> Example:
    if family == "parity":
        length = int(rng.integers(3, 7))
        count = int(rng.integers(0, 4))
        toks = _fill(rng, vocab[1:], length - count) + [vocab[0]] * count
        rng.shuffle(toks)
        return Example(tuple(toks), None, parity_label(toks, vocab[0]))
    if family == "majority":
        c1, c2 = rng.choice(np.arange(1, 4), size=2, replace=False)
        length = int(rng.integers(int(c1 + c2), 8))
        toks = [vocab[1]] * int(c1) + [vocab[2]] * int(c2) + _fill(rng, vocab[3:], length - int(c1 + c2))
        rng.shuffle(toks)
        return Example(tuple(toks), None, majority_label(toks, vocab[1], vocab[2]))
    if family == "overlap":
        la, lb = (int(x) for x in rng.integers(2, 5, size=2))
        a = list(rng.choice(vocab, size=la, replace=False))
        if rng.random() < 0.5:
            rest = [t for t in vocab if t not in a]
            b = list(rng.choice(rest, size=lb, replace=False))
        else:
            b = [a[int(rng.integers(0, la))]] + list(rng.choice(vocab, size=lb - 1, replace=False))
            rng.shuffle(b)
        return Example(tuple(a), tuple(b), overlap_label(a, b))
    if family == "affinity":
        la, lb = (int(x) for x in rng.integers(2, 5, size=2))
        shared = int(rng.integers(0, min(la, lb) + 1))
        picks = list(rng.choice(vocab, size=la + lb - shared, replace=False))
        common, only_a, only_b = picks[:shared], picks[shared:la], picks[la:]
        a, b = common + only_a, common + only_b
        rng.shuffle(a)
        rng.shuffle(b)
        return Example(tuple(a), tuple(b), affinity_label(a, b))
    raise ValueError(f"unknown synthetic family {family!r}; expected one of {sorted(SYNTH_FAMILIES)}")


def synth_spec(family: str, name: str | None = None, train_size: int = 1) -> TaskSpec:
    if family not in SYNTH_FAMILIES:
        raise ValueError(f"unknown synthetic family {family!r}; expected one of {sorted(SYNTH_FAMILIES)}")
    input_kind, output_kind, metric = SYNTH_FAMILIES[family]
    return TaskSpec(name or family, input_kind, output_kind, 2, metric, max(1, train_size))


def synth_generate(family: str, size: int, vocab_size: int = SYNTH_VOCAB_SIZE, seed: int = 0,
                   exclude: Iterable[Example] = (), name: str | None = None) -> TaskDataset:
    """``size`` examples labelled exactly by the family's rule, skipping any in ``exclude``."""
    spec = synth_spec(family, name, size)
    if vocab_size < 8:
        raise ValueError("synthetic tasks need at least 8 content tokens")
    rng = np.random.default_rng(seed)
    vocab = synth_tokens(vocab_size)
    banned = set(exclude)
    examples = []
    attempts = 0
    while len(examples) < size:
        ex = _draw(family, rng, vocab)
        attempts += 1
        if ex in banned:
            if attempts > 50 * size + 1000:
                raise RuntimeError(f"{family}: cannot draw {size} examples disjoint from the excluded set")
            continue
        examples.append(ex)
    return TaskDataset(spec, examples)


def synth_splits(family: str, train_size: int, dev_size: int, vocab_size: int = SYNTH_VOCAB_SIZE,
                 seed: int = 0, name: str | None = None) -> tuple[TaskDataset, TaskDataset]:
    """Train and dev sets from independent streams; dev never repeats a training example."""
    train = synth_generate(family, train_size, vocab_size, seed, name=name)
    dev = synth_generate(family, dev_size, vocab_size, seed + 1_000_003, exclude=train.examples, name=name)
    dev.spec = train.spec
    return train, dev


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("accuracy needs equal-length, non-empty inputs")
    return float(np.mean(preds == labels))


def metric_matthews(preds, labels) -> float:
    preds, labels = np.asarray(preds).astype(int), np.asarray(labels).astype(int)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("matthews needs equal-length, non-empty inputs")
    tp = float(np.sum((preds == 1) & (labels == 1)))
    tn = float(np.sum((preds == 0) & (labels == 0)))
    fp = float(np.sum((preds == 1) & (labels == 0)))
    fn = float(np.sum((preds == 0) & (labels == 1)))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def metric_pearson(preds, labels) -> float:
    x, y = np.asarray(preds, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


METRIC_FUNCS = {"accuracy": metric_accuracy, "matthews": metric_matthews, "pearson": metric_pearson}


def score(metric: str, preds, labels) -> float:
    return METRIC_FUNCS[metric](preds, labels)


def with_train_size(spec: TaskSpec, n: int) -> TaskSpec:
    return replace(spec, train_size=max(1, n))

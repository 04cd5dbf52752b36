"""End-to-end gradient checks: encoder, adapter, head and loss for each adapter family."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from palkit.adapters import FAMILIES, PROJECTED_WITHIN, AdapterSpec
from palkit.encoder import ModelConfig
from palkit.model import HeadSpec, MultiTaskModel
from palkit.numerics import GradCheckReport, Rng, gradient_check

MAX_GRADCHECK_DIM = 32
DEFAULT_COORDS = 12  # entries differenced per tensor; None differences all of them


@dataclass(frozen=True)
class GradCheckCase:
    label: str
    spec: AdapterSpec
    regression: bool = False


def default_cases(d_s: int = 8) -> list[GradCheckCase]:
    """Every family once in parallel, projected within-layer families also in series."""
    cases = []
    for fam in FAMILIES:
        kwargs = {}
        if fam not in ("None", "LHUC", "TopBertLayer"):
            kwargs = {"d_s": d_s, "n_heads_s": 2}
        if fam in ("TopProjectedAttention", "TopProjectedFFN", "TopBertLayer"):
            kwargs["n_top_layers"] = 1 if fam == "TopBertLayer" else 2
        cases.append(GradCheckCase(fam, AdapterSpec(fam, **kwargs)))
        if fam in PROJECTED_WITHIN:
            cases.append(GradCheckCase(f"{fam}/serial", AdapterSpec(fam, composition="serial", **kwargs)))
    cases.append(GradCheckCase("PAL/regression", AdapterSpec("PAL", d_s=d_s, n_heads_s=2), regression=True))
    cases.append(GradCheckCase("PAL/task-pooling", AdapterSpec("PAL", d_s=d_s, n_heads_s=2, share_pooling=False)))
    return cases


def gradcheck_model(case: GradCheckCase, d_m: int = 16, seed: int = 0):
    """A tiny model with every parameter drawn at random, decoders included.

    Random decoders make the adapter path contribute to the loss, which a
    zero-initialised decoder would hide from the check.
    """
    if d_m > MAX_GRADCHECK_DIM:
        raise ValueError(f"gradient checks are limited to d_m <= {MAX_GRADCHECK_DIM}, got {d_m}")
    config = ModelConfig(d_m=d_m, n_layers=2, n_heads=2, d_ff=2 * d_m, vocab_size=12,
                         max_seq_len=8, n_tasks=1)
    head = HeadSpec(1 if case.regression else 3, case.regression)
    model = MultiTaskModel(config, case.spec, [head], seed=seed)
    rng = Rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith(".gain"):
            p.data = 1.0 + rng.normal(p.shape, 0.1)
        else:
            p.data = rng.normal(p.shape, 0.3)
    batch, length = 2, 5
    ids = rng.integers(4, config.vocab_size, size=(batch, length))
    ids[:, 0] = 1
    seg = np.zeros((batch, length), dtype=np.int64)
    seg[:, 3:] = 1
    mask = np.ones((batch, length), dtype=bool)
    mask[1, 4:] = False
    ids[1, 4:] = 0
    labels = rng.normal(batch) if case.regression else rng.integers(0, 3, size=batch)
    return model, (ids, seg, mask, labels)


def structural_zero_grads(names) -> list[str]:
    """Key biases shift every score of a query equally, which softmax ignores."""
    return [n for n in names if n.endswith(".bk")]


def check_case(case: GradCheckCase, d_m: int = 16, tol: float = 1e-5, eps: float = 1e-5,
               seed: int = 0, max_coords: int | None = DEFAULT_COORDS) -> GradCheckReport:
    model, (ids, seg, mask, labels) = gradcheck_model(case, d_m, seed)
    return gradient_check(lambda: model.loss(0, ids, seg, mask, labels), model.params, tol=tol, eps=eps,
                          max_coords=max_coords, seed=seed, zero_grad_names=structural_zero_grads(model.params))


@dataclass
class CaseResult:
    label: str
    report: GradCheckReport
    seconds: float


def run_gradchecks(cases: list[GradCheckCase] | None = None, d_m: int = 16, tol: float = 1e-5,
                   seed: int = 0, max_coords: int | None = DEFAULT_COORDS) -> list[CaseResult]:
    out = []
    for case in cases or default_cases():
        t0 = time.perf_counter()
        report = check_case(case, d_m, tol, seed=seed, max_coords=max_coords)
        out.append(CaseResult(case.label, report, time.perf_counter() - t0))
    return out

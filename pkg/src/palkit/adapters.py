"""Task-specific adaptation modules and parameter budgeting.

Every projected family computes ``TS(h) = V^D g(V^E h)``:

* ``LowRank``      g is the identity; (V^E, V^D) per layer.
* ``PAL``          g is multi-head attention in the d_s space without W^o;
                   one (V^E, V^D) pair shared across layers.
* ``PAL-unshared-proj``  as PAL with per-layer projections.
* ``FFNAdapter``   g is a small GeLU feed-forward net (default shared projections).

Within-layer modules are composed with a base layer in parallel,
``LN(h + SA(h) + TS(h))``, or in series, ``LN'(ĥ + TS(ĥ))`` with
``ĥ = LN(h + SA(h))`` and a fresh ``LN'``.  ``LHUC`` rescales each hidden
unit of a layer's output by ``2*sigmoid(a)``.

Top families act once on the final hidden states.  The projected ones
(``TopProjectedAttention``, ``TopProjectedFFN``) are added residually,
``h + TS(h)``, so a zero decoder leaves the base model untouched;
``TopBertLayer`` stacks full task-specific BERT layers whose output
matrices (W^o, W_2) start at zero.

Decoders start at zero, so every family reproduces the adapter-free model at
initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from palkit.encoder import (
    LN_EPS,
    BaseLayer,
    ModelConfig,
    ParamSpec,
    base_param_shapes,
    bert_layer_shapes,
    head_param_shapes,
    quadratic_layer_count,
)
from palkit.numerics import Tensor, add, attention, gelu, layer_norm, linear, mul, sigmoid

PROJECTED_WITHIN = ("PAL", "PAL-unshared-proj", "LowRank", "FFNAdapter")
WITHIN = PROJECTED_WITHIN + ("LHUC",)
TOP = ("TopProjectedAttention", "TopProjectedFFN", "TopBertLayer")
FAMILIES = ("None",) + WITHIN + TOP
ATTENTION_FAMILIES = ("PAL", "PAL-unshared-proj", "TopProjectedAttention")
BUDGET_LIMIT = 1.13
BUDGET_ABSOLUTE = 15_000_000


@dataclass(frozen=True)
class AdapterSpec:
    family: str = "None"
    d_s: int = 0
    inner_size: int | None = None
    n_heads_s: int = 1
    composition: str = "parallel"
    share_proj_across_layers: bool | None = None
    n_top_layers: int | None = None
    share_pooling: bool = True
    layers: str | tuple[int, ...] = "all"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown adapter family {self.family!r}; expected one of {FAMILIES}")
        if self.composition not in ("parallel", "serial"):
            raise ValueError(f"composition must be 'parallel' or 'serial', got {self.composition!r}")
        if self.family == "PAL" and self.share_proj_across_layers is False:
            raise ValueError("PAL shares its projections across layers; use PAL-unshared-proj")
        if self.family == "PAL-unshared-proj" and self.share_proj_across_layers:
            raise ValueError("PAL-unshared-proj cannot share projections across layers")
        if self.projected:
            if self.d_s <= 0:
                raise ValueError(f"{self.family} needs a positive d_s")
        if self.family in ATTENTION_FAMILIES and (self.n_heads_s <= 0 or self.d_s % self.n_heads_s):
            raise ValueError(f"d_s={self.d_s} not divisible by n_heads_s={self.n_heads_s}")
        if isinstance(self.layers, str) and self.layers not in ("all", "top", "bottom"):
            raise ValueError("layers must be 'all', 'top', 'bottom' or a tuple of layer indices")
        if self.n_top_layers is not None and self.n_top_layers < 0:
            raise ValueError("n_top_layers must be non-negative")

    @property
    def projected(self) -> bool:
        return self.family in PROJECTED_WITHIN or self.family in ("TopProjectedAttention", "TopProjectedFFN")

    @property
    def within(self) -> bool:
        return self.family in WITHIN

    @property
    def top(self) -> bool:
        return self.family in TOP

    @property
    def shares_projections(self) -> bool:
        if self.share_proj_across_layers is not None:
            return self.share_proj_across_layers
        return self.family in ("PAL", "FFNAdapter")

    @property
    def ffn_inner(self) -> int:
        if self.inner_size is not None:
            return self.inner_size
        # parameter-matched defaults: 306 for d_s=204 within layers, 408 on top
        if self.family == "FFNAdapter":
            return (3 * self.d_s) // 2
        return 2 * self.d_s

    @property
    def top_layers(self) -> int:
        if self.n_top_layers is not None:
            return self.n_top_layers
        return 1 if self.family == "TopBertLayer" else 6

    def validate_for(self, config: ModelConfig) -> None:
        if self.projected and self.d_s >= config.d_m:
            raise ValueError(f"d_s={self.d_s} must be smaller than d_m={config.d_m}")
        if self.within and not any(self.enabled_layers(config.n_layers)):
            raise ValueError("adapter enabled on no layer")
        if not isinstance(self.layers, str):
            bad = [i for i in self.layers if not 0 <= i < config.n_layers]
            if bad:
                raise ValueError(f"adapter layer indices out of range: {bad}")

    def enabled_layers(self, n_layers: int) -> list[bool]:
        if not self.within:
            return [False] * n_layers
        if self.layers == "all":
            return [True] * n_layers
        half = n_layers // 2
        if self.layers == "top":
            return [i >= n_layers - half for i in range(n_layers)]
        if self.layers == "bottom":
            return [i < half for i in range(n_layers)]
        chosen = set(self.layers)
        return [i in chosen for i in range(n_layers)]


# ---------------------------------------------------------------------------
# parameter shapes
# ---------------------------------------------------------------------------


def _g_attention_shapes(prefix: str, d_s: int, with_output: bool) -> dict[str, ParamSpec]:
    shapes = {}
    for w in ("wq", "wk", "wv") + (("wo",) if with_output else ()):
        shapes[f"{prefix}.{w}"] = ParamSpec((d_s, d_s), "normal", "g")
        shapes[f"{prefix}.b{w[1]}"] = ParamSpec((d_s,), "zeros", "bias")
    return shapes


def _g_ffn_shapes(prefix: str, d_s: int, inner: int) -> dict[str, ParamSpec]:
    return {
        f"{prefix}.w1": ParamSpec((inner, d_s), "normal", "g"),
        f"{prefix}.b1": ParamSpec((inner,), "zeros", "bias"),
        f"{prefix}.w2": ParamSpec((d_s, inner), "normal", "g"),
        f"{prefix}.b2": ParamSpec((d_s,), "zeros", "bias"),
    }


def _norm_shapes(prefix: str, d: int) -> dict[str, ParamSpec]:
    return {
        f"{prefix}.gain": ParamSpec((d,), "ones", "bias"),
        f"{prefix}.bias": ParamSpec((d,), "zeros", "bias"),
    }


def _projection_shapes(prefix: str, d_m: int, d_s: int) -> dict[str, ParamSpec]:
    return {
        f"{prefix}.enc": ParamSpec((d_s, d_m), "normal", "projection"),
        f"{prefix}.dec": ParamSpec((d_m, d_s), "zeros", "projection"),
    }


def adapter_param_shapes(spec: AdapterSpec, config: ModelConfig, task: int) -> dict[str, ParamSpec]:
    """Every parameter one task's adapter instantiates, in a fixed order."""
    d, d_s, fam = config.d_m, spec.d_s, spec.family
    pre = f"task{task}.adapter"
    shapes: dict[str, ParamSpec] = {}
    if fam == "None":
        return shapes
    if fam == "LHUC":
        for i, on in enumerate(spec.enabled_layers(config.n_layers)):
            if on:
                shapes[f"{pre}.layer{i}.lhuc"] = ParamSpec((d,), "zeros", "lhuc")
        return shapes
    if spec.within:
        shared = spec.shares_projections
        if shared:
            shapes.update(_projection_shapes(pre, d, d_s))
        for i, on in enumerate(spec.enabled_layers(config.n_layers)):
            if not on:
                continue
            lp = f"{pre}.layer{i}"
            if not shared:
                shapes.update(_projection_shapes(lp, d, d_s))
            if fam in ("PAL", "PAL-unshared-proj"):
                shapes.update(_g_attention_shapes(lp, d_s, with_output=False))
            elif fam == "FFNAdapter":
                shapes.update(_g_ffn_shapes(lp, d_s, spec.ffn_inner))
            if spec.composition == "serial":
                shapes.update(_norm_shapes(f"{lp}.ln", d))
        return shapes
    if fam == "TopBertLayer":
        for j in range(spec.top_layers):
            shapes.update(bert_layer_shapes(f"{pre}.top{j}", d, config.d_ff, matrix_role="g",
                                            vector_role="bias", zero_outputs=True))
        return shapes
    shapes[f"{pre}.enc"] = ParamSpec((d_s, d), "normal", "projection")
    for j in range(spec.top_layers):
        lp = f"{pre}.top{j}"
        if fam == "TopProjectedAttention":
            shapes.update(_g_attention_shapes(lp, d_s, with_output=True))
        else:
            shapes.update(_g_ffn_shapes(lp, d_s, spec.ffn_inner))
        shapes.update(_norm_shapes(f"{lp}.ln", d_s))
    shapes[f"{pre}.dec"] = ParamSpec((d, d_s), "zeros", "projection")
    return shapes


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class ProjectedParams:
    """V^E, V^D and the g-parameters of one task-specific function."""

    enc: Tensor
    dec: Tensor
    g: dict[str, Tensor] = field(default_factory=dict)


def ts_apply(H: Tensor, ts: ProjectedParams, family: str, n_heads_s: int = 1, mask=None) -> Tensor:
    """``V^D g(V^E h)`` for every position of ``H`` (g attends across the sequence)."""
    z = linear(H, ts.enc)
    g = ts.g
    if family == "LowRank":
        if g:
            raise ValueError("LowRank adapters carry no g-parameters")
    elif family in ("PAL", "PAL-unshared-proj"):
        if "wo" in g:
            raise ValueError("PAL attention has no output matrix")
        squeeze = z.ndim == 2
        if squeeze:
            z = z.reshape(1, *z.shape)
            mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        q = linear(z, g["wq"], g.get("bq"))
        k = linear(z, g["wk"], g.get("bk"))
        v = linear(z, g["wv"], g.get("bv"))
        z = attention(q, k, v, n_heads_s, mask)
        if squeeze:
            z = z.reshape(z.shape[1:])
    elif family == "FFNAdapter":
        z = linear(gelu(linear(z, g["w1"], g.get("b1"))), g["w2"], g.get("b2"))
    else:
        raise ValueError(f"ts_apply does not handle family {family!r}")
    return linear(z, ts.dec)


def compose_parallel(H: Tensor, base_layer: BaseLayer, adapter: Callable[[Tensor], Tensor]) -> Tensor:
    """``LN(h + SA(h) + TS(h))`` with TS fed the layer input."""
    return base_layer.output(H, add(base_layer.self_attention(H), adapter(H)))


def compose_serial(H: Tensor, base_layer: BaseLayer, adapter: Callable[[Tensor], Tensor],
                   ln_gain: Tensor, ln_bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """``LN'(ĥ + TS(ĥ))`` with ``ĥ`` the base layer's output."""
    h_hat = base_layer(H)
    return layer_norm(add(h_hat, adapter(h_hat)), ln_gain, ln_bias, eps)


def lhuc_apply(H: Tensor, scalars: Tensor) -> Tensor:
    """Scale hidden unit j by ``2*sigmoid(a_j)``; ``a = 0`` is the identity."""
    return mul(H, mul(sigmoid(scalars), 2.0))


@dataclass
class TopStackParams:
    enc: Tensor
    dec: Tensor
    layers: list[dict[str, Tensor]] = field(default_factory=list)


def top_stack_apply(H: Tensor, stack: TopStackParams, family: str, n_heads_s: int = 1, mask=None,
                    eps: float = LN_EPS) -> Tensor:
    """Task-specific function on the final hidden states.

    Projects once with V^E, runs each layer as ``LN(x + f(x))`` where f is
    multi-head attention with W^o or a GeLU FFN, and projects back with V^D.
    The caller adds the result to its input.
    """
    z = linear(H, stack.enc)
    squeeze = z.ndim == 2
    if squeeze:
        z = z.reshape(1, *z.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
    for lp in stack.layers:
        if family == "TopProjectedAttention":
            a = attention(linear(z, lp["wq"], lp["bq"]), linear(z, lp["wk"], lp["bk"]),
                          linear(z, lp["wv"], lp["bv"]), n_heads_s, mask)
            delta = linear(a, lp["wo"], lp["bo"])
        elif family == "TopProjectedFFN":
            delta = linear(gelu(linear(z, lp["w1"], lp["b1"])), lp["w2"], lp["b2"])
        else:
            raise ValueError(f"top_stack_apply does not handle family {family!r}")
        z = layer_norm(add(z, delta), lp["ln.gain"], lp["ln.bias"], eps)
    if squeeze:
        z = z.reshape(z.shape[1:])
    return linear(z, stack.dec)


# ---------------------------------------------------------------------------
# budget
# ---------------------------------------------------------------------------


def closed_form_per_task(spec: AdapterSpec, config: ModelConfig) -> int:
    """Matrix parameters of one task's adapter, ignoring terms linear in d.

    With 12 adapted layers these reduce to the published table: PALs
    ``2 d_m d_s + 12*3 d_s^2``, low rank ``12*2 d_m d_s``, projected
    attention on top ``2 d_m d_s + 6*4 d_s^2``.
    """
    d, d_s, fam = config.d_m, spec.d_s, spec.family
    n_on = sum(spec.enabled_layers(config.n_layers))
    proj = 2 * d * d_s
    if fam in ("None", "LHUC"):
        return 0
    if fam in PROJECTED_WITHIN:
        g = {"PAL": 3 * d_s * d_s, "PAL-unshared-proj": 3 * d_s * d_s,
             "LowRank": 0, "FFNAdapter": 2 * d_s * spec.ffn_inner}[fam]
        if spec.shares_projections:
            return proj + n_on * g
        return n_on * (proj + g)
    if fam == "TopProjectedAttention":
        return proj + spec.top_layers * 4 * d_s * d_s
    if fam == "TopProjectedFFN":
        return proj + spec.top_layers * 2 * d_s * spec.ffn_inner
    return spec.top_layers * quadratic_layer_count(d, config.d_ff)


@dataclass
class BudgetReport:
    family: str
    n_tasks: int
    base_total: int
    per_task_quadratic: int
    per_task_linear: int
    per_task_formula: int
    components: dict[str, int]
    adapter_total: int
    head_total: int

    @property
    def per_task_adapter(self) -> int:
        return self.per_task_quadratic + self.per_task_linear

    @property
    def formula_matches(self) -> bool:
        return self.per_task_formula == self.per_task_quadratic

    @property
    def quadratic_total(self) -> int:
        return self.n_tasks * self.per_task_quadratic

    @property
    def ratio(self) -> float:
        return (self.base_total + self.adapter_total + self.head_total) / self.base_total

    def rows(self) -> list[dict]:
        """Machine-readable rows: one per component plus totals."""
        out = [{"item": k, "count": v} for k, v in self.components.items()]
        out += [
            {"item": "per_task_quadratic", "count": self.per_task_quadratic},
            {"item": "per_task_formula", "count": self.per_task_formula},
            {"item": "per_task_linear", "count": self.per_task_linear},
            {"item": "adapter_total", "count": self.adapter_total},
            {"item": "head_total", "count": self.head_total},
            {"item": "base_total", "count": self.base_total},
        ]
        return out


def count_parameters(spec: AdapterSpec, config: ModelConfig, n_tasks: int,
                     head_outputs: list[int] | None = None) -> BudgetReport:
    """Closed-form adapter count next to a walk over the instantiated parameter shapes."""
    spec.validate_for(config)
    if head_outputs is None:
        head_outputs = [2] * n_tasks
    if len(head_outputs) != n_tasks:
        raise ValueError("head_outputs needs one entry per task")
    base = base_param_shapes(config, shared_pooling=spec.share_pooling)
    base_total = sum(p.size for p in base.values())
    components = {"projection": 0, "g": 0, "bias": 0, "lhuc": 0, "head": 0, "pooling": 0}
    per_task_quad = per_task_lin = None
    for t in range(n_tasks):
        shapes = adapter_param_shapes(spec, config, t)
        shapes.update(head_param_shapes(t, config.d_m, head_outputs[t], spec.share_pooling))
        quad = lin = 0
        for p in shapes.values():
            components[p.role] += p.size
            if p.role in ("projection", "g"):
                quad += p.size
            elif p.role in ("bias", "lhuc"):
                lin += p.size
        if per_task_quad is None:
            per_task_quad, per_task_lin = quad, lin
    if per_task_quad is None:
        one = adapter_param_shapes(spec, config, 0)
        per_task_quad = sum(p.size for p in one.values() if p.role in ("projection", "g"))
        per_task_lin = sum(p.size for p in one.values() if p.role in ("bias", "lhuc"))
    adapter_total = components["projection"] + components["g"] + components["bias"] + components["lhuc"]
    head_total = components["head"] + components["pooling"]
    return BudgetReport(
        family=spec.family,
        n_tasks=n_tasks,
        base_total=base_total,
        per_task_quadratic=per_task_quad,
        per_task_linear=per_task_lin,
        per_task_formula=closed_form_per_task(spec, config),
        components=components,
        adapter_total=adapter_total,
        head_total=head_total,
    )


@dataclass
class BudgetVerdict:
    passed: bool
    ratio: float
    limit_ratio: float
    margin: float
    adapter_total: int
    per_task: int


def check_budget(report: BudgetReport, limit_ratio: float = BUDGET_LIMIT) -> BudgetVerdict:
    """Pass iff the parameter ratio, at the two-decimal precision it is quoted in, is within the limit."""
    ratio = report.ratio
    return BudgetVerdict(
        passed=round(ratio, 2) <= limit_ratio,
        ratio=ratio,
        limit_ratio=limit_ratio,
        margin=limit_ratio - ratio,
        adapter_total=report.adapter_total,
        per_task=report.per_task_adapter,
    )


def projected_params(params: Mapping[str, Tensor], spec: AdapterSpec, task: int, layer: int) -> ProjectedParams:
    pre = f"task{task}.adapter"
    lp = f"{pre}.layer{layer}"
    src = pre if spec.shares_projections else lp
    g_names = {"PAL": ("wq", "bq", "wk", "bk", "wv", "bv"),
               "PAL-unshared-proj": ("wq", "bq", "wk", "bk", "wv", "bv"),
               "FFNAdapter": ("w1", "b1", "w2", "b2"),
               "LowRank": ()}[spec.family]
    return ProjectedParams(params[f"{src}.enc"], params[f"{src}.dec"],
                           {n: params[f"{lp}.{n}"] for n in g_names})


def top_stack_params(params: Mapping[str, Tensor], spec: AdapterSpec, task: int) -> TopStackParams:
    pre = f"task{task}.adapter"
    layers = []
    for j in range(spec.top_layers):
        lp = f"{pre}.top{j}."
        layers.append({k[len(lp):]: v for k, v in params.items() if k.startswith(lp)})
    return TopStackParams(params[f"{pre}.enc"], params[f"{pre}.dec"], layers)

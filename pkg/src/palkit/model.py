"""Multi-task model: one shared encoder, per-task adapters and output heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from palkit import adapters as ad
from palkit.encoder import (
    BaseLayer,
    ModelConfig,
    ParamSpec,
    TaskHead,
    base_param_shapes,
    encode,
    head_param_shapes,
    pool_and_predict,
)
from palkit.numerics import INIT_STD, Rng, Tensor, add, cross_entropy, mse, no_grad


@dataclass(frozen=True)
class HeadSpec:
    n_outputs: int
    regression: bool = False


def model_param_shapes(config: ModelConfig, spec: ad.AdapterSpec,
                       heads: Sequence[HeadSpec]) -> dict[str, ParamSpec]:
    shapes = base_param_shapes(config, shared_pooling=spec.share_pooling)
    for t, head in enumerate(heads):
        shapes.update(ad.adapter_param_shapes(spec, config, t))
        shapes.update(head_param_shapes(t, config.d_m, head.n_outputs, spec.share_pooling))
    return shapes


def init_array(rng: Rng, p: ParamSpec, std: float = INIT_STD) -> np.ndarray:
    if p.init == "zeros":
        return np.zeros(p.shape)
    if p.init == "ones":
        return np.ones(p.shape)
    return rng.normal(p.shape, std)


class MultiTaskModel:
    """Shared encoder plus, for each task, an adapter and a pooled output head.

    ``params`` maps names to leaf tensors.  Names under ``task{t}.`` belong
    to task ``t``; everything else is shared.
    """

    def __init__(self, config: ModelConfig, spec: ad.AdapterSpec, heads: Sequence[HeadSpec],
                 seed: int = 0, init_std: float = INIT_STD,
                 state: Mapping[str, np.ndarray] | None = None):
        spec.validate_for(config)
        if config.n_tasks != len(heads):
            raise ValueError(f"config.n_tasks={config.n_tasks} but {len(heads)} heads given")
        self.config = config
        self.spec = spec
        self.heads = list(heads)
        self.shapes = model_param_shapes(config, spec, heads)
        rng = Rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, p in self.shapes.items():
            arr = init_array(rng, p, init_std) if state is None else np.array(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True, name=name)
        self._top_cache: dict[int, ad.TopStackParams] = {}

    # -- parameter groups -------------------------------------------------
    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    def group_of(self, name: str) -> str:
        if not name.startswith("task"):
            return "base"
        return "adapter" if ".adapter." in name else "head"

    def task_of(self, name: str) -> int | None:
        if not name.startswith("task"):
            return None
        return int(name[4:name.index(".")])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=t.data.dtype)

    # -- heads / adapters -------------------------------------------------
    def task_head(self, t: int) -> TaskHead:
        p = self.params
        pool = "pool" if self.spec.share_pooling else f"task{t}.pool"
        return TaskHead(p[f"{pool}.w"], p[f"{pool}.b"], p[f"task{t}.out.w"], p[f"task{t}.out.b"],
                        regression=self.heads[t].regression)

    def layer_adapters(self, t: int, mask=None):
        spec, cfg, p = self.spec, self.config, self.params
        if not spec.within:
            return None
        hooks = []
        for i, on in enumerate(spec.enabled_layers(cfg.n_layers)):
            if not on:
                hooks.append(None)
                continue
            if spec.family == "LHUC":
                a = p[f"task{t}.adapter.layer{i}.lhuc"]
                hooks.append(lambda H, base, a=a: ad.lhuc_apply(base(H), a))
                continue
            tsp = ad.projected_params(p, spec, t, i)

            def ts(X, tsp=tsp):
                return ad.ts_apply(X, tsp, spec.family, spec.n_heads_s, mask)

            if spec.composition == "parallel":
                hooks.append(lambda H, base, ts=ts: ad.compose_parallel(H, base, ts))
            else:
                g = p[f"task{t}.adapter.layer{i}.ln.gain"]
                b = p[f"task{t}.adapter.layer{i}.ln.bias"]
                hooks.append(lambda H, base, ts=ts, g=g, b=b: ad.compose_serial(H, base, ts, g, b))
        return hooks

    def _apply_top(self, t: int, H: Tensor, mask) -> Tensor:
        spec = self.spec
        if spec.family == "TopBertLayer":
            for j in range(spec.top_layers):
                H = BaseLayer(self.params, f"task{t}.adapter.top{j}", self.config.n_heads, mask)(H)
            return H
        if t not in self._top_cache:
            self._top_cache[t] = ad.top_stack_params(self.params, spec, t)
        return add(H, ad.top_stack_apply(H, self._top_cache[t], spec.family, spec.n_heads_s, mask))

    # -- forward ----------------------------------------------------------
    def encode(self, t: int, token_ids, segment_ids, mask=None) -> Tensor:
        if not 0 <= t < self.n_tasks:
            raise IndexError(f"task index {t} out of range for {self.n_tasks} tasks")
        if mask is None:
            mask = np.ones(np.shape(token_ids), dtype=bool)
        H = encode(token_ids, segment_ids, self.params, self.config, mask, self.layer_adapters(t, mask))
        if self.spec.top:
            H = self._apply_top(t, H, mask)
        return H

    def forward(self, t: int, token_ids, segment_ids, mask=None) -> Tensor:
        """Outputs for a (batch, l) id array: (batch, k) logits or (batch, 1) regression values."""
        H = self.encode(t, token_ids, segment_ids, mask)
        h_cls = H[:, 0, :] if H.ndim == 3 else H[0]
        return pool_and_predict(h_cls, self.task_head(t))

    def loss(self, t: int, token_ids, segment_ids, mask, labels) -> Tensor:
        out = self.forward(t, token_ids, segment_ids, mask)
        if self.heads[t].regression:
            return mse(out, labels)
        return cross_entropy(out, labels)

    def predict(self, t: int, token_ids, segment_ids, mask=None) -> np.ndarray:
        """Class indices, or real values for regression tasks."""
        with no_grad():
            out = self.forward(t, token_ids, segment_ids, mask).data
        if self.heads[t].regression:
            return out[..., 0]
        return out.argmax(axis=-1)

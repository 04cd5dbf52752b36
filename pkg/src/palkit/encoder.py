"""Base transformer encoder: embeddings, attention, FFN, layer-norm, layers, pooled heads.

Parameters live in a flat ``{name: Tensor}`` mapping.  Layer ``i`` owns the
names ``layer{i}.*``; the functions here take the mapping plus a name prefix,
so the same code runs base layers and task-specific extra layers.

Layer structure follows
    SA(h) = FFN(LN1(h + MH(h)))
    BL(h) = LN2(h + SA(h))
with GeLU inside the FFN and a tanh pooler on the [CLS] state.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from palkit.numerics import (
    Tensor,
    add,
    attention,
    embedding,
    gelu,
    layer_norm,
    linear,
    tanh,
)

LN_EPS = 1e-12
CHECKPOINT_FORMAT = "palkit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_m: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    max_seq_len: int = 32
    n_segment_types: int = 2
    n_tasks: int = 1
    embedding_layer_norm: bool = True
    position_embeddings: bool = True

    def __post_init__(self):
        for name in ("d_m", "n_heads", "d_ff", "vocab_size", "n_segment_types"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.n_layers < 0 or self.n_tasks < 0:
            raise ValueError("ModelConfig.n_layers and n_tasks must be non-negative")
        if self.d_m % self.n_heads:
            raise ValueError(f"d_m={self.d_m} is not divisible by n_heads={self.n_heads}")
        if self.max_seq_len < 3:
            raise ValueError("max_seq_len must leave room for [CLS], a token and [SEP]")

    @classmethod
    def bert_base(cls, n_tasks: int = 8) -> ModelConfig:
        return cls(d_m=768, n_layers=12, n_heads=12, d_ff=3072, vocab_size=30522,
                   max_seq_len=512, n_tasks=n_tasks)


@dataclass(frozen=True)
class ParamSpec:
    """Shape, initialiser and budget role of one named parameter."""

    shape: tuple[int, ...]
    init: str = "normal"  # normal | zeros | ones
    role: str = "base"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def bert_layer_shapes(prefix: str, d: int, d_ff: int, matrix_role: str = "base",
                      vector_role: str = "base", zero_outputs: bool = False) -> dict[str, ParamSpec]:
    """Shapes for one BERT layer.  W^q, W^k, W^v are full d x d stacks of n row-blocks."""
    out_init = "zeros" if zero_outputs else "normal"
    mat, vec = matrix_role, vector_role
    shapes = {}
    for w in ("wq", "wk", "wv"):
        shapes[f"{prefix}.attn.{w}"] = ParamSpec((d, d), "normal", mat)
        shapes[f"{prefix}.attn.b{w[1]}"] = ParamSpec((d,), "zeros", vec)
    shapes[f"{prefix}.attn.wo"] = ParamSpec((d, d), out_init, mat)
    shapes[f"{prefix}.attn.bo"] = ParamSpec((d,), "zeros", vec)
    shapes[f"{prefix}.ln1.gain"] = ParamSpec((d,), "ones", vec)
    shapes[f"{prefix}.ln1.bias"] = ParamSpec((d,), "zeros", vec)
    shapes[f"{prefix}.ffn.w1"] = ParamSpec((d_ff, d), "normal", mat)
    shapes[f"{prefix}.ffn.b1"] = ParamSpec((d_ff,), "zeros", vec)
    shapes[f"{prefix}.ffn.w2"] = ParamSpec((d, d_ff), out_init, mat)
    shapes[f"{prefix}.ffn.b2"] = ParamSpec((d,), "zeros", vec)
    shapes[f"{prefix}.ln2.gain"] = ParamSpec((d,), "ones", vec)
    shapes[f"{prefix}.ln2.bias"] = ParamSpec((d,), "zeros", vec)
    return shapes


def base_param_shapes(config: ModelConfig, shared_pooling: bool = True) -> dict[str, ParamSpec]:
    d = config.d_m
    shapes = {
        "emb.token": ParamSpec((config.vocab_size, d)),
        "emb.position": ParamSpec((config.max_seq_len, d),
                                  "normal" if config.position_embeddings else "zeros"),
        "emb.segment": ParamSpec((config.n_segment_types, d)),
    }
    if config.embedding_layer_norm:
        shapes["emb.ln.gain"] = ParamSpec((d,), "ones")
        shapes["emb.ln.bias"] = ParamSpec((d,), "zeros")
    for i in range(config.n_layers):
        shapes.update(bert_layer_shapes(f"layer{i}", d, config.d_ff))
    if shared_pooling:
        shapes["pool.w"] = ParamSpec((d, d))
        shapes["pool.b"] = ParamSpec((d,), "zeros")
    return shapes


def head_param_shapes(task: int, d: int, n_outputs: int, shared_pooling: bool) -> dict[str, ParamSpec]:
    shapes = {}
    if not shared_pooling:
        shapes[f"task{task}.pool.w"] = ParamSpec((d, d), "normal", "pooling")
        shapes[f"task{task}.pool.b"] = ParamSpec((d,), "zeros", "pooling")
    shapes[f"task{task}.out.w"] = ParamSpec((n_outputs, d), "normal", "head")
    shapes[f"task{task}.out.b"] = ParamSpec((n_outputs,), "zeros", "head")
    return shapes


def quadratic_layer_count(d: int, d_ff: int) -> int:
    """Matrix parameters of one layer, ignoring terms linear in d."""
    return 4 * d * d + 2 * d * d_ff


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def embed(token_ids, segment_ids, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Sum of token, learned-position and segment embeddings, (..., l, d)."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if token_ids.shape != segment_ids.shape:
        raise ValueError(f"token/segment length mismatch: {token_ids.shape} vs {segment_ids.shape}")
    length = token_ids.shape[-1]
    if length > config.max_seq_len:
        raise ValueError(f"sequence length {length} exceeds max_seq_len={config.max_seq_len}")
    for ids, limit, what in ((token_ids, config.vocab_size, "token"),
                             (segment_ids, config.n_segment_types, "segment")):
        bad = np.argwhere((ids < 0) | (ids >= limit))
        if bad.size:
            pos = tuple(int(i) for i in bad[0])
            raise IndexError(f"{what} id {ids[pos]} out of range at position {pos}")
    positions = np.arange(length)
    h = add(embedding(params["emb.token"], token_ids), embedding(params["emb.position"], positions))
    return add(h, embedding(params["emb.segment"], segment_ids))


def _batched(H: Tensor, mask):
    if H.ndim == 2:
        H = H.reshape(1, *H.shape)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None, :]
        return H, mask, True
    return H, mask, False


def multi_head_attention(H: Tensor, params: Mapping[str, Tensor], prefix: str, n_heads: int,
                         mask=None, use_output: bool = True) -> Tensor:
    """``W^o [head_1; ...; head_n]`` for (l, d) or (batch, l, d) input.

    ``mask`` marks real (True) vs padding (False) key positions.
    """
    Hb, maskb, squeeze = _batched(H, mask)
    p = params
    q = linear(Hb, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = linear(Hb, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = linear(Hb, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    out = attention(q, k, v, n_heads, maskb)
    if use_output:
        out = linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


def ffn(h: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """``W_2 gelu(W_1 h + b_1) + b_2`` applied to the last axis."""
    inner = gelu(linear(h, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(inner, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


class BaseLayer:
    """One BERT layer bound to its parameters and the batch's key mask.

    Exposes the self-attention sub-block and the output layer-norm separately
    so adapters can be composed in parallel (added before the output norm) or
    in series (applied to the layer output).
    """

    def __init__(self, params: Mapping[str, Tensor], prefix: str, n_heads: int, mask=None,
                 eps: float = LN_EPS):
        self.params = params
        self.prefix = prefix
        self.n_heads = n_heads
        self.mask = mask
        self.eps = eps

    def self_attention(self, H: Tensor) -> Tensor:
        p, pre = self.params, self.prefix
        mh = multi_head_attention(H, p, f"{pre}.attn", self.n_heads, self.mask)
        a = layer_norm(add(H, mh), p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"], self.eps)
        return ffn(a, p, f"{pre}.ffn")

    def output(self, H: Tensor, delta: Tensor) -> Tensor:
        p, pre = self.params, self.prefix
        return layer_norm(add(H, delta), p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"], self.eps)

    def __call__(self, H: Tensor) -> Tensor:
        return self.output(H, self.self_attention(H))


def bert_layer(H: Tensor, params: Mapping[str, Tensor], prefix: str, n_heads: int, mask=None,
               eps: float = LN_EPS) -> Tensor:
    return BaseLayer(params, prefix, n_heads, mask, eps)(H)


LayerAdapter = Callable[[Tensor, BaseLayer], Tensor]


def encode(token_ids, segment_ids, params: Mapping[str, Tensor], config: ModelConfig, mask=None,
           layer_adapters: Sequence[LayerAdapter | None] | None = None) -> Tensor:
    """Embeddings through every layer; ``layer_adapters[i]`` (if given) replaces layer i's call."""
    if layer_adapters is not None and len(layer_adapters) != config.n_layers:
        raise ValueError(f"got {len(layer_adapters)} layer adapters for {config.n_layers} layers")
    H = embed(token_ids, segment_ids, params, config)
    if config.embedding_layer_norm:
        H = layer_norm(H, params["emb.ln.gain"], params["emb.ln.bias"], LN_EPS)
    for i in range(config.n_layers):
        base = BaseLayer(params, f"layer{i}", config.n_heads, mask)
        hook = layer_adapters[i] if layer_adapters is not None else None
        H = base(H) if hook is None else hook(H, base)
    return H


@dataclass
class TaskHead:
    """Pooling (d x d + bias, possibly shared) followed by a d -> k projection."""

    pool_w: Tensor
    pool_b: Tensor
    out_w: Tensor
    out_b: Tensor
    regression: bool = False

    def __post_init__(self):
        if self.out_w.shape[0] < 1:
            raise ValueError("a task head needs at least one output")

    @property
    def n_outputs(self) -> int:
        return self.out_w.shape[0]


def pool_and_predict(h_cls: Tensor, head: TaskHead) -> Tensor:
    pooled = tanh(linear(h_cls, head.pool_w, head.pool_b))
    return linear(pooled, head.out_w, head.out_b)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> Path:
    """Write an ``.npz`` container: one float array per parameter plus a JSON header.

    Arrays are stored losslessly, so a save/load round trip is bit-exact.
    """
    path = Path(path)
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta or {}}
    arrays = {f"param/{name}": np.asarray(getattr(t, "data", t)) for name, t in params.items()}
    arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
    # np.savez stamps entries with the wall clock; a fixed stamp keeps reruns byte-identical.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_EPOCH)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arrays[key], allow_pickle=False)
            zf.writestr(info, buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__header__" not in data.files:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
    return params, header["meta"]


def config_to_dict(config) -> dict:
    return asdict(config)

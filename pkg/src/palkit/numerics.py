"""Dense tensors with reverse-mode gradients, plus a finite-difference oracle.

The graph is built eagerly: every op returns a :class:`Tensor` that keeps
references to its inputs and a closure computing their vector-Jacobian
products.  :meth:`Tensor.backward` walks the graph in reverse topological
order.  Gradients accumulate additively into ``.grad``; callers reset them
with :func:`zero_grad` before each backward pass.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from palkit import kernels

DEFAULT_DTYPE = np.float64
INIT_STD = 0.02
MASK_NEG = -1e9

_grad_enabled = True
_corrupted_ops: set[str] = set()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (evaluation / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupt_backward(*ops: str):
    """Negate the upstream gradient of the named ops; a negative control for gradient checks."""
    added = [op for op in ops if op not in _corrupted_ops]
    _corrupted_ops.update(added)
    try:
        yield
    finally:
        _corrupted_ops.difference_update(added)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # -- graph ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit grad needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            g = node.grad
            if node.op in _corrupted_ops:
                g = -g
            node._backward(g)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward, "mul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def backward(g):
        _accumulate(a, g.reshape(src))

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inv))

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _result(a.data[idx], (a,), backward, "getitem")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - y * y))

    return _result(y, (a,), backward, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _result(y, (a,), backward, "sigmoid")


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def gelu(a: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (not the tanh approximation)."""
    a = as_tensor(a)
    x = np.atleast_1d(a.data)
    rows = _rows(x)
    y, cdf = kernels.gelu_rows(rows)
    y = y.reshape(a.shape)

    def backward(g):
        gx = kernels.gelu_rows_backward(_rows(np.atleast_1d(g)), rows, cdf)
        _accumulate(a, gx.reshape(a.shape))

    return _result(y, (a,), backward, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    a = as_tensor(a)
    if a.size == 0 or a.shape[-1] == 0:
        raise ValueError("softmax of an empty tensor")
    y = kernels.softmax_rows(_rows(a.data)).reshape(a.shape)

    def backward(g):
        gx = kernels.softmax_rows_backward(_rows(g), _rows(y))
        _accumulate(a, gx.reshape(a.shape))

    return _result(y, (a,), backward, "softmax")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``w`` (out x in) to the last axis of ``x``: ``x @ w.T + b``."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data.T
    if b is not None:
        y += b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data).reshape(x.shape))
        if w.requires_grad:
            _accumulate(w, g2.T @ x2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))

    return _result(y.reshape(*lead, w.shape[0]), parents, backward, "linear")


# ---------------------------------------------------------------------------
# fused network ops
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    shape = x.shape
    if shape[-1] < 2:
        raise DimensionError("layer_norm needs at least two features")
    y, xhat, rstd = kernels.layer_norm_rows(_rows(x.data), gain.data, bias.data, eps)

    def backward(g):
        gx, ggain, gbias = kernels.layer_norm_rows_backward(_rows(g), xhat, rstd, gain.data)
        _accumulate(x, gx.reshape(shape))
        _accumulate(gain, ggain)
        _accumulate(bias, gbias)

    return _result(y.reshape(shape), (x, gain, bias), backward, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    flat = ids.reshape(-1)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            kernels.scatter_add_rows(full, flat, _rows(g))
            _accumulate(table, full)

    return _result(table.data[ids], (table,), backward, "embedding")


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` row-blocks of the feature axis.

    ``q``, ``k``, ``v`` are (batch, length, width) projections.  Head ``i``
    uses features ``i*w/n : (i+1)*w/n``; scores are divided by ``sqrt(w/n)``.
    ``key_mask`` is a (batch, length) boolean array, True for real tokens.
    Returns the concatenated head outputs, (batch, length, width).
    """
    bsz, length, width = q.shape
    if width % n_heads:
        raise DimensionError(f"width {width} not divisible by {n_heads} heads")
    dh = width // n_heads
    scale = 1.0 / math.sqrt(dh)

    def split(t):
        return t.reshape(bsz, length, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any(axis=-1).all():
            raise ValueError("attention: every position of a sequence is masked")
        scores = scores + np.where(key_mask, 0.0, MASK_NEG)[:, None, None, :]
    p = kernels.softmax_rows(_rows(scores)).reshape(scores.shape)
    ctx = p @ vh
    out = ctx.transpose(0, 2, 1, 3).reshape(bsz, length, width)

    def backward(g):
        gctx = g.reshape(bsz, length, n_heads, dh).transpose(0, 2, 1, 3)
        if v.requires_grad:
            gv = p.transpose(0, 1, 3, 2) @ gctx
            _accumulate(v, gv.transpose(0, 2, 1, 3).reshape(bsz, length, width))
        if q.requires_grad or k.requires_grad:
            gp = gctx @ vh.transpose(0, 1, 3, 2)
            gs = kernels.softmax_rows_backward(_rows(gp), _rows(p)).reshape(p.shape) * scale
            if q.requires_grad:
                _accumulate(q, (gs @ kh).transpose(0, 2, 1, 3).reshape(bsz, length, width))
            if k.requires_grad:
                gk = gs.transpose(0, 1, 3, 2) @ qh
                _accumulate(k, gk.transpose(0, 2, 1, 3).reshape(bsz, length, width))

    res = _result(out, (q, k, v), backward, "attention")
    return res


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])

    def backward(g):
        probs = np.exp(z - logsum[:, None])
        probs[np.arange(n), labels] -= 1.0
        _accumulate(logits, probs * (g / n))

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error between a (batch,) or (batch, 1) prediction and targets."""
    target = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    diff = pred.data - target
    n = diff.size

    def backward(g):
        _accumulate(pred, diff * (2.0 * g / n))

    return _result(np.asarray(np.mean(diff * diff)), (pred,), backward, "mse")


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


class Rng:
    """Seeded PCG64 stream; equal seeds give equal draws at equal draw order."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        self.counter += 1
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        self.counter += 1
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, p: Sequence[float] | None = None) -> int:
        self.counter += 1
        return int(self._gen.choice(n, p=p))

    def permutation(self, n: int) -> np.ndarray:
        self.counter += 1
        return self._gen.permutation(n)

    def spawn(self, key: int) -> Rng:
        """Independent child stream derived from (seed, key)."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


def normal_init(rng: Rng, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(shape, std)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_difference_grad(f: Callable, p: Tensor, eps: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f(p)`` with respect to entries of ``p``.

    With ``coords`` (flat indices) only those entries are differenced and a
    vector of the same length is returned; otherwise the full gradient.
    ``p.data`` is perturbed in place and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    flat = p.data.reshape(-1)
    index = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    grad = np.zeros(index.size, dtype=np.float64)
    with no_grad():
        for n, i in enumerate(index):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(p))
            flat[i] = orig - eps
            fm = _scalar(f(p))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                where = tuple(int(j) for j in np.unravel_index(i, p.shape))
                raise FloatingPointError(f"non-finite function value at coordinate {where}")
            grad[n] = (fp - fm) / (2.0 * eps)
    return grad.reshape(p.shape) if coords is None else grad


@dataclass
class GradCheckReport:
    """Relative errors per tensor, plus absolute errors for tensors whose exact gradient is zero."""

    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    atol: float = 1e-9
    zero_errors: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def failures(self) -> list[str]:
        bad = [n for n, e in self.errors.items() if not e < self.tol]
        return bad + [n for n, e in self.zero_errors.items() if not e < self.atol]


def gradient_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    tol: float = 1e-5,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    zero_grad_names: Iterable[str] = (),
    atol: float = 1e-9,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    Relative error per tensor is ``max|g_ad - g_fd| / max(1e-8, max|g_fd|)``.
    ``max_coords`` caps the differenced entries per tensor at a seeded random
    subset.  Tensors named in ``zero_grad_names`` have an identically zero
    true gradient, where a relative error only measures rounding noise; both
    gradients are held to ``atol`` instead.
    """
    if not isinstance(params, Mapping):
        params = {getattr(p, "name", None) or f"param{i}": p for i, p in enumerate(params)}
    zeros = set(zero_grad_names)
    zero_grad(params.values())
    f().backward()
    report = GradCheckReport(tol=tol, atol=atol)
    for k, (name, p) in enumerate(params.items()):
        g_ad = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            pick = np.random.default_rng([seed, k]).choice(p.data.size, size=max_coords, replace=False)
            coords = np.sort(pick)
            g_ad = g_ad[coords]
        g_fd = finite_difference_grad(lambda _: f(), p, eps, coords).reshape(-1)
        if name in zeros:
            report.zero_errors[name] = float(max(np.max(np.abs(g_ad)), np.max(np.abs(g_fd))))
            continue
        denom = max(1e-8, float(np.max(np.abs(g_fd))))
        report.errors[name] = float(np.max(np.abs(g_ad - g_fd))) / denom
    return report

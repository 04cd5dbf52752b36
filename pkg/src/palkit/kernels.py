"""Row-wise hot kernels with a numba path and a pure-numpy path.

Every kernel operates on C-contiguous float64 2-D arrays (rows x features)
and exists twice: ``<name>_np`` (numpy) and ``<name>_nb`` (numba-compiled).
The unsuffixed name is bound to one of them according to
:data:`palkit._accel.USE_NUMBA`.  Both paths are kept importable so tests and
the benchmark can compare them directly.
"""

import math

import numpy as np
from scipy.special import ndtr

from palkit._accel import USE_NUMBA, njit

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward_np(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_rows_np(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_rows_backward_np(g, xhat, rstd, gain):
    gxhat = g * gain
    d = xhat.shape[1]
    gx = (
        gxhat
        - gxhat.sum(axis=1, keepdims=True) / d
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True) / d
    ) * rstd[:, None]
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_np(x):
    cdf = ndtr(x)
    return x * cdf, cdf


def gelu_backward_np(g, x, cdf):
    return g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def scatter_add_rows_np(out, idx, rows):
    np.add.at(out, idx, rows)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit
def softmax_rows_nb(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


@njit
def softmax_rows_backward_nb(g, y):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


@njit
def layer_norm_rows_nb(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n)
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mean
            var += c * c
        var /= d
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            xh = (x[i, j] - mean) * r
            xhat[i, j] = xh
            y[i, j] = xh * gain[j] + bias[j]
    return y, xhat, rstd


@njit
def layer_norm_rows_backward_nb(g, xhat, rstd, gain):
    n, d = xhat.shape
    gx = np.empty_like(xhat)
    ggain = np.zeros(d)
    gbias = np.zeros(d)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gh = g[i, j] * gain[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            ggain[j] += g[i, j] * xhat[i, j]
            gbias[j] += g[i, j]
        s1 /= d
        s2 /= d
        r = rstd[i]
        for j in range(d):
            gx[i, j] = (g[i, j] * gain[j] - s1 - xhat[i, j] * s2) * r
    return gx, ggain, gbias


@njit
def gelu_nb(x):
    n, m = x.shape
    out = np.empty_like(x)
    cdf = np.empty_like(x)
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            c = 0.5 * math.erfc(-v * _INV_SQRT_2)
            cdf[i, j] = c
            out[i, j] = v * c
    return out, cdf


@njit
def gelu_backward_nb(g, x, cdf):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            out[i, j] = g[i, j] * (cdf[i, j] + v * _INV_SQRT_2PI * math.exp(-0.5 * v * v))
    return out


@njit
def scatter_add_rows_nb(out, idx, rows):
    d = rows.shape[1]
    for i in range(idx.shape[0]):
        k = idx[i]
        for j in range(d):
            out[k, j] += rows[i, j]
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

BACKEND = "numba" if USE_NUMBA else "numpy"

if USE_NUMBA:
    softmax_rows = softmax_rows_nb
    softmax_rows_backward = softmax_rows_backward_nb
    layer_norm_rows = layer_norm_rows_nb
    layer_norm_rows_backward = layer_norm_rows_backward_nb
    gelu_rows = gelu_nb
    gelu_rows_backward = gelu_backward_nb
    scatter_add_rows = scatter_add_rows_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_backward = softmax_rows_backward_np
    layer_norm_rows = layer_norm_rows_np
    layer_norm_rows_backward = layer_norm_rows_backward_np
    gelu_rows = gelu_np
    gelu_rows_backward = gelu_backward_np
    scatter_add_rows = scatter_add_rows_np

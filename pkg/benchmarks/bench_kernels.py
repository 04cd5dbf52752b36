"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py            # per-kernel table
    python3 benchmarks/bench_kernels.py --step     # also a full training step per backend

Shapes are those of a desk-scale training step (batch 32, length 16,
d_m 64, 4 heads, d_ff 256).  The --step mode runs each backend in a fresh
interpreter because the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from palkit import kernels as K

BATCH, LENGTH, D_M, HEADS, D_FF = 32, 16, 64, 4, 256


def _cases(rng):
    scores = rng.normal(size=(BATCH * HEADS * LENGTH, LENGTH))
    hidden = rng.normal(size=(BATCH * LENGTH, D_M))
    inner = rng.normal(size=(BATCH * LENGTH, D_FF))
    gain, bias = rng.normal(size=D_M), rng.normal(size=D_M)
    probs = K.softmax_rows_np(scores)
    _, xhat, rstd = K.layer_norm_rows_np(hidden, gain, bias, 1e-12)
    _, cdf = K.gelu_np(inner)
    idx = rng.integers(0, 14, size=BATCH * LENGTH)
    table = np.zeros((14, D_M))
    return {
        "softmax": (K.softmax_rows_np, K.softmax_rows_nb, (scores,)),
        "softmax_backward": (K.softmax_rows_backward_np, K.softmax_rows_backward_nb, (scores, probs)),
        "layer_norm": (K.layer_norm_rows_np, K.layer_norm_rows_nb, (hidden, gain, bias, 1e-12)),
        "layer_norm_backward": (K.layer_norm_rows_backward_np, K.layer_norm_rows_backward_nb,
                                (hidden, xhat, rstd, gain)),
        "gelu": (K.gelu_np, K.gelu_nb, (inner,)),
        "gelu_backward": (K.gelu_backward_np, K.gelu_backward_nb, (inner, inner, cdf)),
        "scatter_add": (lambda *a: K.scatter_add_rows_np(table.copy(), *a),
                        lambda *a: K.scatter_add_rows_nb(table.copy(), *a), (idx, hidden)),
    }


def _best_of(fn, args, repeat=5):
    n, _ = timeit.Timer(lambda: fn(*args)).autorange()
    return min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n


def _max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) for x, y in zip(a, b))


def bench_kernels():
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, (f_np, f_nb, args) in _cases(rng).items():
        f_nb(*args)  # compile outside the timing
        t_np, t_nb = _best_of(f_np, args), _best_of(f_nb, args)
        diff = _max_diff(f_np(*args), f_nb(*args))
        print(f"{name:<22}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>10.2f}{diff:>14.2e}")


_STEP_SCRIPT = """
import time, numpy as np
from palkit.adapters import AdapterSpec
from palkit.encoder import ModelConfig
from palkit.model import HeadSpec, MultiTaskModel
from palkit import kernels
cfg = ModelConfig(d_m=64, n_layers=4, n_heads=4, d_ff=256, vocab_size=14, max_seq_len=16, n_tasks=1)
m = MultiTaskModel(cfg, AdapterSpec("PAL", d_s=16, n_heads_s=4), [HeadSpec(2)], seed=0, init_std=0.1)
rng = np.random.default_rng(0)
ids = rng.integers(4, 14, size=(32, 16)); ids[:, 0] = 1
seg, mask, labels = np.zeros_like(ids), np.ones(ids.shape, bool), rng.integers(0, 2, 32)
def step():
    for p in m.params.values():
        p.grad = None
    m.loss(0, ids, seg, mask, labels).backward()
step()
times = []
for _ in range(20):
    t0 = time.perf_counter(); step(); times.append(time.perf_counter() - t0)
print(kernels.BACKEND, 1e3 * min(times))
"""


def bench_step():
    print("\nforward+backward, PAL(16) desk model, batch 32 x 16")
    for flag in ("0", "1"):
        env = {**os.environ, "PALKIT_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", _STEP_SCRIPT], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"  {out[0]:<8} {float(out[1]):8.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = parser.parse_args()
    bench_kernels()
    if args.step:
        bench_step()


if __name__ == "__main__":
    main()

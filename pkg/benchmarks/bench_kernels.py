"""Numba vs pure-numpy timings for the hot kernels and one training step.

    python3 benchmarks/bench_kernels.py [--iterations 50] [--skip-step]

Kernel timings compare the two kernel tables side by side in one process.
The training step is timed in two subprocesses, one with PBT_DISABLE_NUMBA=1,
because the backend is fixed at import time.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from pbt import _accel


def timeit(fn, iterations):
    fn()  # warmup (and JIT compile)
    start = time.perf_counter()
    for _ in range(iterations):
        fn()
    return (time.perf_counter() - start) / iterations


def kernel_cases(rng):
    rows, d = 3200, 128  # 32 cells x 100 cycles at width 128
    x = rng.normal(size=(rows, d))
    g, b = rng.normal(size=d), rng.normal(size=d)
    y, xhat, rstd = _accel.NUMPY_KERNELS["layer_norm_fwd"](x, g, b, 1e-5)
    scores = rng.normal(size=(32 * 8 * 100, 100))
    valid = np.ones_like(scores, dtype=bool)
    valid[:, 60:] = False
    sm = _accel.NUMPY_KERNELS["masked_softmax"](scores, valid)
    h = rng.normal(size=(rows, 512))
    t = np.linspace(0.0, 7200.0, 20000)
    cur = np.concatenate([np.full(10000, 1.0), np.full(10000, -1.0)])
    toks = [w.encode() for w in ("the battery was charged at 0.5C to 80% SOC " * 40).split()]
    lengths = np.array([len(w) for w in toks])
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    buf = np.frombuffer(b"".join(toks), dtype=np.uint8)
    return {
        "layer_norm_fwd": (x, g, b, 1e-5),
        "layer_norm_bwd": (x, xhat, rstd, g),
        "masked_softmax": (scores, valid),
        "softmax_bwd": (scores, sm),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, h),
        "cumtrapz_abs": (t, cur),
        "phase_bounds": (cur,),
        "fnv1a": (buf, offsets, -1),
    }


def bench_kernels(iterations):
    if not _accel.NUMBA_KERNELS:
        print("numba is not installed; only the numpy path exists")
        return
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<16}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, args in cases.items():
        t_np = timeit(lambda: _accel.NUMPY_KERNELS[name](*args), iterations)
        t_nb = timeit(lambda: _accel.NUMBA_KERNELS[name](*args), iterations)
        print(f"{name:<16}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.2f}x")


STEP_SCRIPT = """
import time, numpy as np
from pbt import _accel
from pbt.aging import EmbeddingCache, HashEmbedder
from pbt.battmoe import build_registry
from pbt.cycledata import SynthConfig, generate_synthetic, preprocess_cell
from pbt.model import PBTConfig, batch_of, init_model, prepare_cells
from pbt.train import compute_gradients

cells = [preprocess_cell(r) for r in generate_synthetic(SynthConfig(n_cells=16), 0)]
cfg = PBTConfig(d=32, d_ff=64, L1=1, L2=2, heads=4, dropout=0.0)
model = init_model(cfg, build_registry([c.condition for c in cells]), 0)
batch = batch_of(prepare_cells(cells, model, EmbeddingCache(HashEmbedder(cfg.d_embed))), model)
compute_gradients(model, batch)
n = 5
t = time.perf_counter()
for _ in range(n):
    compute_gradients(model, batch)
print(_accel.backend(), (time.perf_counter() - t) / n)
"""


def bench_step():
    out = {}
    for flag in ("1", "0"):
        env = dict(os.environ, PBT_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SCRIPT], env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()[-2:]
        out[name] = float(secs)
    print(f"\ntraining step (16 cells x 100 cycles, d=32, 3 layers, forward + backward)")
    for name, secs in out.items():
        print(f"  {name:<6} {secs * 1e3:9.1f} ms")
    if "numba" in out:
        print(f"  speedup {out['numpy'] / out['numba']:.2f}x")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iterations", type=int, default=50)
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.iterations)
    if not args.skip_step:
        bench_step()


if __name__ == "__main__":
    main()

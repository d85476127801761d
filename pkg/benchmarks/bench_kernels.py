"""Time the compiled training kernel against the numpy fallback.

    python benchmarks/bench_kernels.py [--batches 500] [--repeat 3]
"""

import argparse
import time

import numpy as np

from nacl_pad import _fallback

try:
    from nacl_pad import _kernels
except ImportError:
    _kernels = None


def problem(dim=32, n=1000, batches=500, batch_size=100, seed=0):
    rng = np.random.default_rng(seed)
    sizes = np.array([dim, 64, 32, 2], dtype=np.int64)
    n_par = int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))
    params = rng.normal(0, 0.1, size=n_par)
    X = rng.normal(size=(n, dim))
    y = (rng.random(n) < 0.5).astype(np.int64)
    anchors = np.abs(rng.normal(size=(n, 32)))
    anchored = (rng.random(n) < 0.5).astype(np.uint8)
    idx = rng.integers(0, n, size=(batches, batch_size)).astype(np.int64)
    return params, sizes, X, y, anchors, anchored, idx


def time_backend(mod, args, repeat):
    params, sizes, X, y, anchors, anchored, idx = args
    best = float("inf")
    for _ in range(repeat):
        p = params.copy()
        m, v = np.zeros_like(p), np.zeros_like(p)
        losses = np.zeros(len(idx))
        start = time.perf_counter()
        mod.train_steps(p, sizes, X, y, anchors, anchored, idx, 1.0, 2e-4, 1e-4,
                        0.9, 0.999, 1e-7, m, v, 0, losses)
        best = min(best, time.perf_counter() - start)
    return best, p


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batches", type=int, default=500)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    data = problem(batches=args.batches)
    t_py, p_py = time_backend(_fallback, data, args.repeat)
    print(f"python   {t_py * 1e3:8.1f} ms  ({args.batches / t_py:8.0f} batches/s)")
    if _kernels is None:
        print("compiled extension not built")
        return
    t_c, p_c = time_backend(_kernels, data, args.repeat)
    print(f"compiled {t_c * 1e3:8.1f} ms  ({args.batches / t_c:8.0f} batches/s)")
    print(f"speedup  {t_py / t_c:8.2f}x   max param diff {np.abs(p_py - p_c).max():.2e}")


if __name__ == "__main__":
    main()

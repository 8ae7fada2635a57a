"""Time the numba and numpy paths of each hot kernel.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from primpoly import kernels
from primpoly._accel import HAS_NUMBA


def polygon(rng, n, size):
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.4, 1.0, n) * size / 2.5
    return size / 2 + rad * np.cos(ang), size / 2 + rad * np.sin(ang)


def timeit(fn, args, repeat):
    fn(*args)  # warm-up (and JIT compile)
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    xs, ys = polygon(rng, 12, 512)
    cost = rng.random((30, 30))
    a = (rng.random((30, 128, 128)) < 0.3).astype(np.uint8).reshape(30, -1)
    b = (rng.random((20, 128, 128)) < 0.3).astype(np.uint8).reshape(20, -1)
    return [
        ("fill 12-gon 512x512", kernels._fill_nb, kernels._fill_np, (xs, ys, 512, 512)),
        ("lsap 30x30", kernels._lsap_nb, kernels._lsap_np, (cost,)),
        ("mask iou 30x20 @128^2", kernels._pairwise_iou_nb, kernels._pairwise_iou_np, (a, b)),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fast, slow, fargs in cases(rng):
        tf = timeit(fast, fargs, args.repeat)
        ts = timeit(slow, fargs, args.repeat)
        print(f"{name:<24} {tf * 1e3:10.3f} {ts * 1e3:10.3f} {ts / tf:8.1f}x")


if __name__ == "__main__":
    main()

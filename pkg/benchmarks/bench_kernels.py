"""Compiled versus numpy segment kernels, alone and inside ``invert``.

Run with ``python3 benchmarks/bench_kernels.py [--n 20000] [--reps 7]``.
"""
import argparse
import time

import numpy as np

from mlfactor import _backend, _kernels_py
from mlfactor.inverse import invert
from mlfactor.synth import SynthConfig, Generator

try:
    from mlfactor import _kernels
except ImportError:
    _kernels = None


def median_time(fn, reps):
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def bounds_for(n, p, rng, uniform):
    if uniform:
        return np.rint(np.arange(p + 1) * (n / p)).astype(np.int64)
    cuts = np.sort(rng.choice(np.arange(1, n), size=p - 1, replace=False))
    return np.concatenate([[0], cuts, [n]]).astype(np.int64)


def kernel_rows(n, reps, rng):
    rows = []
    A = rng.standard_normal((n, 6))
    B = rng.standard_normal((n, 24))
    for p in (4, 32, 512, n // 4):
        for uniform in (True, False):
            b = bounds_for(n, p, rng, uniform)
            M = rng.standard_normal((p, 6, 24))
            for name, mod in (("python", _kernels_py), ("cython", _kernels)):
                if mod is None:
                    continue
                tg = median_time(lambda: mod.segment_gram(A, B, b), reps)
                ta = median_time(lambda: mod.segment_apply(A, M, b), reps)
                rows.append((p, "uniform" if uniform else "uneven", name, tg, ta))
    return rows


def invert_rows(n, reps):
    m = Generator(SynthConfig(n, (1, 4, 8, 16, 32, n), (10, 5, 4, 3, 2, 1), seed=1)).truth
    out = []
    saved = (_backend.segment_gram, _backend.segment_apply)
    try:
        for name, mod in (("python", _kernels_py), ("cython", _kernels)):
            if mod is None:
                continue
            _backend.segment_gram, _backend.segment_apply = mod.segment_gram, mod.segment_apply
            out.append((name, median_time(lambda: invert(m), reps)))
    finally:
        _backend.segment_gram, _backend.segment_apply = saved
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--reps", type=int, default=7)
    a = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"selected backend: {_backend.BACKEND}")
    print(f"{'groups':>7} {'layout':>8} {'backend':>8} {'gram ms':>9} {'apply ms':>9}")
    for p, lay, name, tg, ta in kernel_rows(a.n, a.reps, rng):
        print(f"{p:>7} {lay:>8} {name:>8} {1e3 * tg:>9.3f} {1e3 * ta:>9.3f}")
    print(f"\ninvert, n={a.n}, ranks (10,5,4,3,2,1):")
    for name, t in invert_rows(a.n, a.reps):
        print(f"  {name:>8} {1e3 * t:9.3f} ms")


if __name__ == "__main__":
    main()

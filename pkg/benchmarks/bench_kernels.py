#!/usr/bin/env python3
"""Benchmark the numba and numpy paths of the pooled-similarity kernels.

Runs the fused forward and backward kernels on a few batch geometries, checks
that both backends agree, and reports speedups. Invoke from the repo root:

    python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import time

import numpy as np

from marginnce import kernels
from marginnce.backend import NUMBA_AVAILABLE, backend_name
from marginnce.numerics import RngStream

EPS, BETA = 0.65, 0.03


def make_inputs(seed, n, c, pixels):
    g = RngStream(seed).generator()
    vn = g.normal(size=(n, c, pixels))
    vn /= np.linalg.norm(vn, axis=1, keepdims=True)
    an = g.normal(size=(n, c))
    an /= np.linalg.norm(an, axis=1, keepdims=True)
    grad_s = g.normal(size=(n, n))
    return vn, an, grad_s


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    print(f"numba available: {NUMBA_AVAILABLE}   selected backend: {backend_name()}")
    shapes = [(16, 16, 64), (64, 16, 64), (64, 32, 196), (128, 16, 64)]

    if NUMBA_AVAILABLE:
        # trigger jit compilation outside the timed region
        vn, an, grad_s = make_inputs(0, 4, 4, 9)
        kernels.pooled_similarity(vn, an, EPS, BETA, use_numba=True)
        kernels.pooled_similarity_backward(vn, an, EPS, BETA, grad_s, use_numba=True)

    header = f"{'batch x c x pixels':>20} {'kernel':>8} {'numpy':>10} {'numba':>10} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    for n, c, pixels in shapes:
        vn, an, grad_s = make_inputs(1, n, c, pixels)
        for kind in ("forward", "backward"):
            if kind == "forward":
                run_np = lambda: kernels.pooled_similarity(vn, an, EPS, BETA, use_numba=False)
                run_nb = lambda: kernels.pooled_similarity(vn, an, EPS, BETA, use_numba=True)
                diff = (np.abs(run_np() - run_nb()).max() if NUMBA_AVAILABLE else 0.0)
            else:
                run_np = lambda: kernels.pooled_similarity_backward(
                    vn, an, EPS, BETA, grad_s, use_numba=False)
                run_nb = lambda: kernels.pooled_similarity_backward(
                    vn, an, EPS, BETA, grad_s, use_numba=True)
                if NUMBA_AVAILABLE:
                    a = run_np()
                    b = run_nb()
                    diff = max(np.abs(a[0] - b[0]).max(), np.abs(a[1] - b[1]).max())
                else:
                    diff = 0.0
            t_np = best_of(run_np, args.repeats)
            if NUMBA_AVAILABLE:
                t_nb = best_of(run_nb, args.repeats)
                print(f"{n:>6} x {c:>3} x {pixels:>5} {kind:>8} {t_np * 1e3:>8.2f}ms "
                      f"{t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.2f}x {diff:>10.2e}")
            else:
                print(f"{n:>6} x {c:>3} x {pixels:>5} {kind:>8} {t_np * 1e3:>8.2f}ms "
                      f"{'-':>10} {'-':>8} {'-':>10}")


if __name__ == "__main__":
    main()

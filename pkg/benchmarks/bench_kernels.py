"""Times the numpy and numba kernel backends on the three hot paths.

Run as: python benchmarks/bench_kernels.py [--n 20000] [--k 3] [--repeat 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from moe_lab import _kernels_numba as knb
from moe_lab import _kernels_numpy as knp
from moe_lab._kernels_numpy import ACT_SIGMOID


def _problem(n: int, k: int, d: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    beta1 = rng.standard_normal((k, d))
    beta0 = rng.standard_normal(k)
    beta1[-1] = 0.0
    beta0[-1] = 0.0
    means = X @ rng.standard_normal((d, k)) + rng.standard_normal(k)
    nus = np.exp(rng.standard_normal(k)) + 0.1
    logits = X @ beta1.T + beta0
    resp = rng.dirichlet(np.ones(k), size=n)
    grids = rng.standard_normal((64, 257))
    w = rng.dirichlet(np.ones(k), size=64)
    gmeans = rng.standard_normal((64, k))
    return X, y, beta1, beta0, means, nus, logits, resp, grids, w, gmeans


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--d", type=int, default=2)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    X, y, beta1, beta0, means, nus, logits, resp, grids, w, gmeans = _problem(
        args.n, args.k, args.d, 7
    )
    nf = args.k - 1

    cases = {
        "posterior_from_logits": lambda m: m.posterior_from_logits(logits, means, nus, y),
        "mixture_pdf_grids": lambda m: m.mixture_pdf_grids(grids, w, gmeans, nus),
        "irls_loop(sigmoid, 25 iters)": lambda m: m.irls_loop(
            X, resp, beta1.copy(), beta0.copy(), 0.7, ACT_SIGMOID, 1, 25, 0.01, 1e-3, False, nf
        ),
    }

    # compile once so numba timings exclude jit cost
    for fn in cases.values():
        fn(knb)

    print(f"n={args.n} k={args.k} d={args.d}  (best of {args.repeat})")
    print(f"{'kernel':<32}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, fn in cases.items():
        t_np = _time(lambda: fn(knp), args.repeat)
        t_nb = _time(lambda: fn(knb), args.repeat)
        print(f"{name:<32}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()

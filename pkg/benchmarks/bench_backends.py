#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the three hot paths (training step gradient, batch log-density scoring,
Kalman filter rollout) on representative sizes and reports the speedup plus
the maximum numeric disagreement between backends.

Usage:
    python benchmarks/bench_backends.py [--n-examples 2000] [--dim 130] [--repeats 20]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from trajmine.kernels import _numpy as np_impl

try:
    from trajmine.kernels import _numba as nb_impl
except ImportError:
    nb_impl = None


def flow_args(rng, n, dim, n_couplings=4, hidden=64):
    dp = dim + (dim % 2)
    h = dp // 2
    v = rng.standard_normal((n, dp))
    if dp > dim:
        v[:, -1] = 0.0
    return (
        v,
        (np.arange(n_couplings) % 2).astype(np.uint8),
        rng.standard_normal((n_couplings, h, hidden)) / np.sqrt(h),
        np.zeros((n_couplings, hidden)),
        rng.standard_normal((n_couplings, hidden, hidden)) / np.sqrt(hidden),
        np.zeros((n_couplings, hidden)),
        rng.standard_normal((n_couplings, hidden, h)) / np.sqrt(hidden),
        np.zeros((n_couplings, h)),
        rng.uniform(-0.3, 0.3, dp),
        dim,
    )


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def bench(label, fn_np, fn_nb, args, repeats):
    t_np = min(timeit.repeat(lambda: fn_np(*args), number=1, repeat=repeats))
    row = f"{label:<28} numpy {t_np * 1e3:9.2f} ms"
    if fn_nb is not None:
        fn_nb(*args)  # compile outside the timed region
        t_nb = min(timeit.repeat(lambda: fn_nb(*args), number=1, repeat=repeats))
        diff = max_diff(fn_np(*args), fn_nb(*args))
        row += f"   numba {t_nb * 1e3:9.2f} ms   speedup {t_np / t_nb:5.2f}x   max|diff| {diff:.2e}"
    print(row)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-examples", type=int, default=2000)
    parser.add_argument("--dim", type=int, default=130)
    parser.add_argument("--batch", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    if nb_impl is None:
        print("numba not importable; timing the numpy path only")

    grad_args = flow_args(rng, args.batch, args.dim)
    score_args = flow_args(rng, args.n_examples, args.dim)
    hist = np.cumsum(rng.standard_normal((args.n_examples, 30, 2)) * 0.2, axis=1)
    hist[:, :, 1] += np.arange(30) * 2.0
    kalman_args = (hist, 50, 0.1, 1.0, 0.5, 2)

    print(f"sizes: grad batch {args.batch}x{args.dim}, scoring {args.n_examples}x{args.dim}, "
          f"kalman {args.n_examples} examples")
    bench("training step (nll+grad)", np_impl.flow_nll_grad_batch,
          None if nb_impl is None else nb_impl.flow_nll_grad_batch, grad_args, args.repeats)
    bench("log-density scoring", np_impl.flow_logprob_batch,
          None if nb_impl is None else nb_impl.flow_logprob_batch, score_args, args.repeats)
    bench("kalman filter + rollout", np_impl.kalman_cv_batch,
          None if nb_impl is None else nb_impl.kalman_cv_batch, kalman_args, args.repeats)


if __name__ == "__main__":
    main()

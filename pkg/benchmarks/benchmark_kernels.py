#!/usr/bin/env python3
"""Benchmark the compiled SGD kernels against the pure-numpy fallback.

Workload shapes mirror the shipped presets: the theorem-shape quadratic
instance (tiny model, batch 1) and a paper-shape logistic client
(d=20, 10 classes, batch 32).  Run after `pip install -e .`:

    python benchmarks/benchmark_kernels.py [--repeats 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fed_energy_sim.kernels import _python

try:
    from fed_energy_sim.kernels import _speedups
except ImportError:
    _speedups = None


def _workloads(rng: np.random.Generator):
    X_small = rng.standard_normal((12, 3))
    y_small = rng.standard_normal(12)
    w_small = rng.standard_normal(3)
    idx_small = np.stack([rng.choice(12, 1, replace=False) for _ in range(5)]).astype(np.int64)

    X_big = rng.standard_normal((200, 20))
    y_cls = rng.integers(0, 10, 200).astype(np.int64)
    w_cls = 0.1 * rng.standard_normal(200)
    idx_big = np.stack([rng.choice(200, 32, replace=False) for _ in range(5)]).astype(np.int64)

    eta = np.full(5, 0.02)
    return [
        ("quadratic d=3 b=1 T=5", "sgd_quadratic",
         (X_small, y_small, w_small, idx_small, eta, 0.1)),
        ("logistic d=20 C=10 b=32 T=5", "sgd_logistic",
         (X_big, y_cls, w_cls, idx_big, eta, 0.01, 10)),
    ]


def _time_backend(fn, args, repeats: int) -> tuple[float, np.ndarray]:
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        w, _ = fn(*args)
    elapsed = time.perf_counter() - t0
    return elapsed / repeats, w


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=500)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'workload':<30} {'python':>12} {'cython':>12} {'speedup':>9}")
    print("-" * 67)
    for label, fn_name, fn_args in _workloads(rng):
        t_py, w_py = _time_backend(getattr(_python, fn_name), fn_args, args.repeats)
        if _speedups is None:
            print(f"{label:<30} {t_py*1e6:>10.1f}us {'(not built)':>12} {'-':>9}")
            continue
        t_cy, w_cy = _time_backend(getattr(_speedups, fn_name), fn_args, args.repeats)
        drift = float(np.max(np.abs(w_py - w_cy)))
        if drift > 1e-9:
            raise SystemExit(f"backend disagreement {drift:.2e} on {label}")
        print(
            f"{label:<30} {t_py*1e6:>10.1f}us {t_cy*1e6:>10.1f}us {t_py/t_cy:>8.1f}x"
        )
    if _speedups is None:
        print("\ncompiled backend missing; install with `pip install -e .` to build it")


if __name__ == "__main__":
    main()

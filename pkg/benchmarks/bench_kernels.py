#!/usr/bin/env python3
"""Time the numba kernels against their numpy fallbacks.

Both backends are imported side by side (``nb_*`` / ``np_*``), so a single run
compares them; ``FLOWOOD_DISABLE_NUMBA`` only changes which one the package uses.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from flowood import kernels
from flowood.metrics import group_scores


def best_of(fn, repeat):
    fn()  # warm-up, includes JIT compilation on the first call
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.normal(size=20_000).round(2)
    yield "midranks n=20000", (x,), kernels.nb_midranks, kernels.np_midranks

    idg, oodg, n = group_scores(rng.normal(1, 1, 5000).round(3), rng.normal(0, 1, 5000).round(3))
    ic = np.bincount(idg, minlength=n).astype(np.float64)
    oc = np.bincount(oodg, minlength=n).astype(np.float64)
    yield "metrics 5000+5000", (ic, oc, 0.95, True), kernels.nb_metrics_from_counts, kernels.np_metrics_from_counts

    ii = rng.integers(0, idg.size, (200, idg.size))
    oi = rng.integers(0, oodg.size, (200, oodg.size))
    yield ("bootstrap 200 reps, 5000+5000", (idg, oodg, n, ii, oi, 0.95, True),
           kernels.nb_bootstrap_metrics, kernels.np_bootstrap_metrics)

    size = 4_000_000
    p = rng.normal(size=size).astype(np.float32)
    g = rng.normal(size=size).astype(np.float32)
    m, v = np.zeros(size), np.zeros(size)
    yield "adam 4M params", (p, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001), kernels.nb_adam_update, kernels.np_adam_update


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"package backend: {kernels.BACKEND}")
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fargs, nb, npf in cases(np.random.default_rng(0)):
        t_nb = best_of(lambda: nb(*fargs), args.repeat)
        t_np = best_of(lambda: npf(*fargs), args.repeat)
        print(f"{name:32s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()

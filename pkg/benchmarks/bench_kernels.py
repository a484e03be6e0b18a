#!/usr/bin/env python3
"""Time the numba and numpy variants of the distance, clustering and window kernels.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--sensors N] [--json PATH]
"""

import argparse
import json
import time

import numpy as np

from fedflow import kernels


def _time(fn, *args, repeats=5):
    fn(*args)  # warm-up (and JIT compile for the numba path)
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def make_inputs(n_sensors, n_slots, seed=0):
    rng = np.random.default_rng(seed)
    lat = 33.7 + rng.random(n_sensors) * 0.5
    lon = -117.9 + rng.random(n_sensors) * 0.5
    X = rng.standard_normal((n_sensors, 4))
    C = rng.standard_normal((6, 4))
    labels = rng.integers(0, 6, n_sensors)
    series = rng.random(n_slots) * 300
    series[rng.random(n_slots) < 0.01] = np.nan
    return {
        "haversine_matrix": (lat, lon),
        "kmeans_assign": (X, C),
        "silhouette_samples": (X, labels, 6),
        "valid_window_starts": (series, 12, 4),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--sensors", type=int, default=400)
    ap.add_argument("--slots", type=int, default=96 * 28)
    ap.add_argument("--json", default=None, help="also write results to this file")
    args = ap.parse_args()

    inputs = make_inputs(args.sensors, args.slots)
    rows = []
    print(f"{'kernel':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}  agree")
    for name, fargs in inputs.items():
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        t_np = _time(f_np, *fargs, repeats=args.repeats)
        t_nb = _time(f_nb, *fargs, repeats=args.repeats)
        a, b = f_np(*fargs), f_nb(*fargs)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        agree = all(np.allclose(x, y, rtol=1e-10, atol=1e-10, equal_nan=True) for x, y in zip(a, b))
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "agree": agree})
        print(f"{name:<22}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.1f}  {agree}")
    print(f"active backend: {kernels.backend()}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy RGrN kernels (forward + backward unroll).

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Prints one line per (T, nodes, hidden) case with the best-of-``repeat`` wall
time of each backend and the speedup. Results are also checked for agreement.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from msgl import kernels
from msgl.kernels import _rgrn_numpy

CASES = [(50, 60, 16), (50, 480, 16), (200, 80, 16), (200, 80, 64), (200, 10, 64)]


def make(T, n, h, F=7, seed=0):
    rng = np.random.default_rng(seed)
    A = np.zeros((n, n))
    for i in range(1, n):
        A[i, rng.integers(i)] = 1.0
    A /= np.maximum(A.sum(1, keepdims=True), 1)
    rmask = (rng.random((n, h)) > 0.2) / 0.8
    args = (rng.normal(size=(T, n, F)), A, rng.normal(size=(F, 4 * h)) * 0.3,
            rng.normal(size=(h, 4 * h)) * 0.3, np.zeros(4 * h), rng.normal(size=(h, h)) * 0.3,
            np.zeros(h), rmask)
    return args, rng.normal(size=(T, n, h))


def time_backend(name, args, dH, repeat):
    best = np.inf
    with kernels.use_backend(name):
        for _ in range(repeat):
            t0 = time.perf_counter()
            H, cache = kernels.rgrn_forward(*args)
            grads = kernels.rgrn_backward(cache, dH, need_dx=True)
            best = min(best, time.perf_counter() - t0)
    return best, H, grads


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    have = kernels.available_backends()
    print(f"backends: {have} (default {kernels.backend_name()})")
    rows = []
    for T, n, h in CASES:
        a, dH = make(T, n, h)
        t_np, H0, g0 = time_backend("numpy", a, dH, args.repeat)
        row = {"T": T, "nodes": n, "hidden": h, "numpy_s": t_np}
        if "compiled" in have:
            t_c, H1, g1 = time_backend("compiled", a, dH, args.repeat)
            err = max([float(np.abs(H1 - H0).max())]
                      + [float(np.abs(x - y).max()) for x, y in zip(g1, g0)])
            row.update(compiled_s=t_c, speedup=t_np / t_c, max_abs_diff=err)
            print(f"T={T:4d} n={n:4d} h={h:3d}  numpy {t_np * 1e3:8.2f} ms  "
                  f"compiled {t_c * 1e3:8.2f} ms  x{t_np / t_c:5.2f}  diff {err:.1e}")
        else:
            print(f"T={T:4d} n={n:4d} h={h:3d}  numpy {t_np * 1e3:8.2f} ms  (compiled not built)")
        rows.append(row)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()

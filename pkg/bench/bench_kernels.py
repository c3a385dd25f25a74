"""Time the compiled kernels against the numpy fallback.

    python bench/bench_kernels.py [--repeat 5] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from odc import _kernels_py as py

try:
    from odc import _kernels as cy
except ImportError:
    cy = None


def cases(rng):
    a2 = rng.normal(size=(2000, 2))
    b2 = rng.normal(size=(2000, 2))
    a3 = rng.normal(size=(1500, 3))
    g = rng.normal(size=2000)
    cost = rng.random((200, 200))
    return {
        "nearest_neighbors 2000x2000 d=2": lambda m: m.nearest_neighbors(a2, b2),
        "nearest_neighbors 1500x1500 d=3": lambda m: m.nearest_neighbors(a3, a3[::-1].copy()),
        "min_pairwise_distance n=2000": lambda m: m.min_pairwise_distance(a2),
        "pair_potential n=2000": lambda m: m.pair_potential(a2, py.INVERSE_POWER, 1.0, 2.0),
        "pair_potential_vjp n=2000": lambda m: m.pair_potential_vjp(a2, g, py.INVERSE_POWER, 1.0, 2.0),
        "linear_sum_assignment 200x200": lambda m: m.linear_sum_assignment(cost),
    }


def best_of(fn, repeat: int) -> float:
    fn()  # warm up
    timer = timeit.Timer(fn)
    loops, _ = timer.autorange()
    return min(timer.repeat(repeat, loops)) / loops


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':34s} {'python ms':>11s} {'cython ms':>11s} {'speedup':>8s}")
    for name, call in cases(np.random.default_rng(0)).items():
        t_py = best_of(lambda: call(py), args.repeat)
        t_cy = best_of(lambda: call(cy), args.repeat)
        rows.append({"kernel": name, "python_s": t_py, "cython_s": t_cy, "speedup": t_py / t_cy})
        print(f"{name:34s} {t_py * 1e3:11.3f} {t_cy * 1e3:11.3f} {t_py / t_cy:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())

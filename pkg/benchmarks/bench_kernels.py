"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run on identical inputs under both implementations; outputs
are checked for equality before timings are reported.
"""

import argparse
import time

import numpy as np
from scipy.spatial import cKDTree

from truckvlm import kernels


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _dbscan_case(rng):
    pts = np.vstack([rng.normal(c, 0.6, size=(1500, 3)) for c in rng.uniform(-20, 20, size=(8, 3))])
    nb = cKDTree(pts).query_ball_point(pts, 0.8, return_sorted=True)
    indptr = np.zeros(len(pts) + 1, dtype=np.int64)
    np.cumsum([len(n) for n in nb], out=indptr[1:])
    indices = np.concatenate([np.asarray(n, dtype=np.int64) for n in nb])
    core = (np.diff(indptr) >= 5).astype(np.uint8)
    return "dbscan_expand (12k pts)", lambda m: m.dbscan_expand(indptr, indices, core)


def _morph_case(rng, name):
    img = (rng.random((400, 600)) < 0.6).astype(np.uint8) * 255
    se = np.ones((3, 3), dtype=np.uint8)
    return f"{name} (400x600, 3x3)", lambda m: getattr(m, name)(img, se)


def _hungarian_case(rng):
    cost = rng.random((120, 120))
    return "hungarian (120x120)", lambda m: m.hungarian(cost)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    impls = kernels.implementations()
    print(f"active backend: {kernels.BACKEND}; available: {', '.join(impls)}")
    rng = np.random.default_rng(args.seed)
    cases = [_dbscan_case(rng), _morph_case(rng, "erode"), _morph_case(rng, "dilate"), _hungarian_case(rng)]

    header = f"{'kernel':28s}" + "".join(f"{name:>12s}" for name in impls) + f"{'speedup':>10s}"
    print(header)
    print("-" * len(header))
    for label, call in cases:
        times, outs = {}, {}
        for name, mod in impls.items():
            times[name], outs[name] = _best_of(lambda: call(mod), args.repeat)
        ref = outs["python"]
        for name, out in outs.items():
            if not np.array_equal(np.asarray(out), np.asarray(ref)):
                raise SystemExit(f"{label}: {name} output differs from the python fallback")
        row = f"{label:28s}" + "".join(f"{times[n] * 1e3:10.2f}ms" for n in impls)
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(row + f"{speed:9.1f}x")


if __name__ == "__main__":
    main()

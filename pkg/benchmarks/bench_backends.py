#!/usr/bin/env python3
"""Compare the numba and pure-numpy column kernels on every operator.

Usage:
  python3 benchmarks/bench_backends.py
  python3 benchmarks/bench_backends.py --shape 1,8,8,32,32 --shape 1,16,8,32,32 --reps 5 --out bench.csv
"""

import argparse
import sys
from collections import defaultdict

from d2conv3d import _backend, bench
from d2conv3d.cli import _shape


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shape", type=_shape, action="append")
    ap.add_argument("--ops", default=",".join(bench.BENCH_OPS))
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--width", type=int, choices=(32, 64), default=32)
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    if not _backend.HAS_NUMBA:
        print("numba is not installed; only the numpy backend can run", file=sys.stderr)
        return 1
    shapes = args.shape or [(1, 8, 8, 32, 32)]
    recs = bench.run_bench(args.ops.split(","), shapes, args.width, args.reps, ["numba", "numpy"])
    if args.out:
        bench.write_csv(recs, args.out)
    by = defaultdict(dict)
    for r in recs:
        by[(r.op, r.shape)][r.backend] = r
    print(f"{'op':9s} {'shape':14s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for (op, shape), d in by.items():
        a, b = d["numba"].median_ms, d["numpy"].median_ms
        print(f"{op:9s} {shape:14s} {a:10.2f} {b:10.2f} {b / a:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Micro-benchmark of the operator family in inference mode."""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from . import _backend, conv_ops
from .conv_ops import ConvConfig
from .tensor import KernelWeights

BENCH_OPS = ("conv3d", "dilated", "dcn1", "dcn2", "d2conv3d")
COLUMNS = ["op", "shape", "width", "backend", "workers", "reps",
           "median_ms", "p10_ms", "p90_ms", "peak_bytes"]


@dataclass
class BenchRecord:
    op: str
    shape: str
    width: int
    backend: str
    workers: int
    reps: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    peak_bytes: int

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError(f"repetitions must be >= 3, got {self.reps}")


def make_call(op: str, shape, width: int = 32, seed: int = 0):
    """Build inputs for ``op`` on a same-padded 3x3x3 layer and return a zero-argument callable."""
    if op not in BENCH_OPS:
        raise ValueError(f"unknown operator {op!r}; expected one of {BENCH_OPS}")
    rng = np.random.default_rng(seed)
    dt = np.float32 if width == 32 else np.float64
    N, C, T, H, W = shape
    x = rng.normal(size=shape).astype(dt)
    kw = KernelWeights(rng.normal(0, 0.1, size=(C, C, 3, 3, 3)).astype(dt), np.zeros(C, dt))
    cfg = ConvConfig.same(dilation=(1, 2, 2) if op == "dilated" else (1, 1, 1))
    out = cfg.output_shape((T, H, W))
    K = cfg.num_points
    if op in ("conv3d", "dilated"):
        return lambda: conv_ops.conv3d_forward(x, kw, cfg)
    mod = rng.uniform(size=(N, K, *out)).astype(dt)
    if op == "d2conv3d":
        dil = rng.uniform(0.5, 2.0, size=(N, 3, *out)).astype(dt)
        return lambda: conv_ops.d2conv3d_forward(x, kw, dil, mod, cfg)
    off = rng.normal(0.0, 1.0, size=(N, 3 * K, *out)).astype(dt)
    if op == "dcn1":
        return lambda: conv_ops.dcn1_3d_forward(x, kw, off, cfg)
    return lambda: conv_ops.dcn2_3d_forward(x, kw, off, mod, cfg)


def bench_one(op, shape, width=32, reps=5, backend=None) -> BenchRecord:
    if reps < 3:
        raise ValueError(f"repetitions must be >= 3, got {reps}")
    backend = backend or _backend.active_backend()
    with _backend.use_backend(backend):
        fn = make_call(op, shape, width)
        fn()  # warm-up, includes JIT compilation
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        tracemalloc.start()
        try:
            fn()
            peak = tracemalloc.get_traced_memory()[1]
        finally:
            tracemalloc.stop()
    p10, med, p90 = np.percentile(times, [10, 50, 90])
    workers = _backend.num_threads() if backend == "numba" else 1
    return BenchRecord(op, "x".join(map(str, shape)), width, backend, workers, reps,
                       float(med), float(p10), float(p90), int(peak))


def run_bench(ops, shapes, width=32, reps=5, backends=None) -> list[BenchRecord]:
    backends = backends or [_backend.active_backend()]
    return [bench_one(op, shape, width, reps, b) for shape in shapes for op in ops for b in backends]


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))

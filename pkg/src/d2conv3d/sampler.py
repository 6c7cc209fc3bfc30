"""Scalar trilinear sampling with zero padding, its gradient, and OOB counting.

Voxel centres sit on integer coordinates, so a volume of extent ``T`` is
valid on ``[0, T-1]``. Lattice neighbours outside the volume read as 0.
These scalar routines define the semantics; the batched kernels in
:mod:`d2conv3d.kernels` must agree with them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _corners(p):
    """Yield ``(it, iy, ix, weight, dweight/dt, dweight/dy, dweight/dx)`` for the 8 neighbours."""
    t0, y0, x0 = math.floor(p[0]), math.floor(p[1]), math.floor(p[2])
    ft, fy, fx = p[0] - t0, p[1] - y0, p[2] - x0
    wt = ((1.0 - ft, -1.0), (ft, 1.0))
    wy = ((1.0 - fy, -1.0), (fy, 1.0))
    wx = ((1.0 - fx, -1.0), (fx, 1.0))
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                (vt, gt), (vy, gy), (vx, gx) = wt[a], wy[b], wx[c]
                yield t0 + a, y0 + b, x0 + c, vt * vy * vx, gt * vy * vx, vt * gy * vx, vt * vy * gx


def _inside(vol, it, iy, ix) -> bool:
    T, H, W = vol.shape
    return 0 <= it < T and 0 <= iy < H and 0 <= ix < W


def trilinear_sample(vol: np.ndarray, p) -> float:
    """Sample ``vol`` (shape ``(T, H, W)``) at fractional point ``p = (t, y, x)``."""
    acc = 0.0
    for it, iy, ix, w, _, _, _ in _corners(p):
        if _inside(vol, it, iy, ix):
            acc += w * float(vol[it, iy, ix])
    return acc


def trilinear_sample_backward(vol: np.ndarray, p, upstream: float = 1.0):
    """Gradients of :func:`trilinear_sample` scaled by ``upstream``.

    Returns ``(grad_vol, grad_p)``: ``grad_vol`` is a list of
    ``((t, y, x), weight)`` entries for in-bounds neighbours only, and
    ``grad_p`` is a length-3 array. At integer coordinates the derivative is
    the right-sided one (``floor(p)`` is the cell origin).
    """
    grad_vol = []
    grad_p = np.zeros(3)
    for it, iy, ix, w, dt, dy, dx in _corners(p):
        if not _inside(vol, it, iy, ix):
            continue
        v = float(vol[it, iy, ix])
        grad_vol.append(((it, iy, ix), upstream * w))
        grad_p[0] += upstream * dt * v
        grad_p[1] += upstream * dy * v
        grad_p[2] += upstream * dx * v
    return grad_vol, grad_p


def is_oob(p, extents) -> bool:
    """True if any coordinate of ``p`` lies outside ``[0, size - 1]``."""
    return any(not (0.0 <= q <= n - 1) for q, n in zip(p, extents))


@dataclass
class SamplingStats:
    """Counts of sampling locations and how many fell outside the volume."""

    label: str = ""
    total_samples: int = 0
    oob_samples: int = 0

    def __post_init__(self):
        if not 0 <= self.oob_samples <= self.total_samples:
            raise ValueError(f"need 0 <= oob ({self.oob_samples}) <= total ({self.total_samples})")

    @property
    def percent(self) -> float:
        if self.total_samples == 0:
            return 0.0
        return 100.0 * self.oob_samples / self.total_samples

    def __add__(self, other: "SamplingStats") -> "SamplingStats":
        return SamplingStats(
            self.label or other.label,
            self.total_samples + other.total_samples,
            self.oob_samples + other.oob_samples,
        )

    def merge(self, other: "SamplingStats") -> None:
        self.total_samples += other.total_samples
        self.oob_samples += other.oob_samples


def record_oob(p, extents, stats: SamplingStats) -> None:
    if any(n <= 0 for n in extents):
        raise ValueError(f"extents must be positive, got {tuple(extents)}")
    stats.total_samples += 1
    if is_oob(p, extents):
        stats.oob_samples += 1

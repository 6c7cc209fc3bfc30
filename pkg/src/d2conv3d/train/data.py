"""Synthetic moving-object clips with exact masks."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class SyntheticClipSpec:
    frames: int = 8
    height: int = 32
    width: int = 32
    kind: str = "square"
    size: int = 6
    start: tuple = (13.0, 13.0)  # top-left (y, x) of the bounding box in frame 0
    velocity: tuple = (0.0, 0.0)  # pixels per frame along (y, x)
    intensity: float = 1.0
    noise: float = 0.1
    seed: int = 0


def object_mask(spec: SyntheticClipSpec) -> np.ndarray:
    """Exact object support, ``(T, H, W)`` of 0/1."""
    if spec.kind not in ("square", "disc"):
        raise ValueError(f"unknown object kind {spec.kind!r}")
    T, H, W = spec.frames, spec.height, spec.width
    mask = np.zeros((T, H, W))
    yy, xx = np.mgrid[0:H, 0:W]
    for t in range(T):
        y0 = int(round(spec.start[0] + spec.velocity[0] * t))
        x0 = int(round(spec.start[1] + spec.velocity[1] * t))
        if spec.kind == "square":
            inside = (yy >= y0) & (yy < y0 + spec.size) & (xx >= x0) & (xx < x0 + spec.size)
        else:
            r = spec.size / 2.0
            inside = (yy + 0.5 - (y0 + r)) ** 2 + (xx + 0.5 - (x0 + r)) ** 2 <= r * r
        if not inside.any():
            raise ValueError(f"object leaves the frame at t={t} (top-left {y0}, {x0})")
        mask[t] = inside
    return mask


def synth_generate(spec: SyntheticClipSpec):
    """Return ``(clip, mask)``, both ``(1, 1, T, H, W)`` float64."""
    mask = object_mask(spec)
    rng = np.random.default_rng(spec.seed)
    clip = spec.intensity * mask + rng.normal(0.0, spec.noise, size=mask.shape)
    return clip[None, None], mask[None, None]


def random_spec(rng, base: SyntheticClipSpec, max_speed: float = 1.5) -> SyntheticClipSpec:
    """Random start/velocity keeping the object fully inside for every frame."""
    T, H, W, s = base.frames, base.height, base.width, base.size
    for _ in range(1000):
        v = rng.uniform(-max_speed, max_speed, size=2)
        lo = np.maximum(0.0, -v * (T - 1))
        hi = np.array([H - s, W - s]) - np.maximum(0.0, v * (T - 1))
        if np.all(hi > lo):
            start = rng.uniform(lo, hi)
            return replace(base, start=tuple(start), velocity=tuple(v), seed=int(rng.integers(2**31)))
    raise ValueError("cannot place the object inside the frame at this speed")


def make_dataset(n_clips: int, seed: int, base: SyntheticClipSpec, max_speed: float = 1.5):
    """Stack ``n_clips`` random clips into ``(n, 1, T, H, W)`` inputs and masks."""
    rng = np.random.default_rng(seed)
    clips, masks = [], []
    for _ in range(n_clips):
        c, m = synth_generate(random_spec(rng, base, max_speed))
        clips.append(c[0])
        masks.append(m[0])
    shape = (0, 1, base.frames, base.height, base.width)
    if not clips:
        return np.zeros(shape), np.zeros(shape)
    return np.stack(clips), np.stack(masks)

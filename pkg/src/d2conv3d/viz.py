"""Binary PGM (P5) writers for dilation, modulation and mask maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray) -> None:
    """Write an ``(H, W)`` uint8 image as binary PGM."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("expected a 2-D uint8 image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def normalize_sequence(frames: np.ndarray, lo=None, hi=None):
    """Min-max scale a ``(T, H, W)`` sequence to uint8; a constant sequence maps to mid-gray.

    ``lo``/``hi`` override the data range. Returns ``(images, lo, hi)``.
    """
    lo = float(frames.min()) if lo is None else lo
    hi = float(frames.max()) if hi is None else hi
    if hi - lo <= 0:
        return np.full(frames.shape, 128, dtype=np.uint8), lo, hi
    scaled = np.round(255.0 * np.clip((frames - lo) / (hi - lo), 0.0, 1.0))
    return scaled.astype(np.uint8), lo, hi


def emit_maps(out_dir, dilation, modulation, mask) -> list[Path]:
    """Write per-frame images for the three map families plus ``scale.txt``.

    ``dilation`` is ``(3, T, H, W)``, ``modulation`` is ``(K, T, H, W)`` or
    ``None`` (treated as all ones) and ``mask`` is ``(T, H, W)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mean_dil = dilation.mean(axis=0)
    mean_mod = np.ones_like(mean_dil) if modulation is None else modulation.mean(axis=0)
    families = {"dilation": mean_dil, "modulation": mean_mod, "mask": mask.astype(np.float64)}
    written = []
    scales = []
    for name, seq in families.items():
        imgs, lo, hi = normalize_sequence(seq, *((0.0, 1.0) if name == "mask" else (None, None)))
        scales.append(f"{name} min={lo:.6g} max={hi:.6g}")
        for t, img in enumerate(imgs):
            path = out_dir / f"{name}_{t:03d}.pgm"
            write_pgm(path, img)
            written.append(path)
    (out_dir / "scale.txt").write_text("\n".join(scales) + "\n")
    return written

"""Vectorised numpy versions of the column kernels (no compiler required)."""

import numpy as np


def _corner_tables(coords, T, H, W):
    """Per-corner flat indices, in-bounds weights and weight derivatives.

    ``coords`` is ``(N, K, 3, P)``; every returned array is ``(N, K, P)``.
    """
    pt, py, px = coords[:, :, 0], coords[:, :, 1], coords[:, :, 2]
    hit = (pt > -1) & (pt < T) & (py > -1) & (py < H) & (px > -1) & (px < W)
    pt = np.where(hit, pt, 0.0)
    py = np.where(hit, py, 0.0)
    px = np.where(hit, px, 0.0)
    t0, y0, x0 = np.floor(pt), np.floor(py), np.floor(px)
    ft, fy, fx = pt - t0, py - y0, px - x0
    t0, y0, x0 = t0.astype(np.int64), y0.astype(np.int64), x0.astype(np.int64)
    tables = []
    for a in (0, 1):
        it = t0 + a
        vt, gt = (ft, 1.0) if a else (1.0 - ft, -1.0)
        for b in (0, 1):
            iy = y0 + b
            vy, gy = (fy, 1.0) if b else (1.0 - fy, -1.0)
            for c in (0, 1):
                ix = x0 + c
                vx, gx = (fx, 1.0) if c else (1.0 - fx, -1.0)
                inb = hit & (it >= 0) & (it < T) & (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
                lin = np.where(inb, (it * H + iy) * W + ix, 0)
                tables.append((
                    lin,
                    np.where(inb, vt * vy * vx, 0.0),
                    np.where(inb, gt * vy * vx, 0.0),
                    np.where(inb, vt * gy * vx, 0.0),
                    np.where(inb, vt * vy * gx, 0.0),
                ))
    return tables


def _gather(xf, lin):
    N, C, _ = xf.shape
    K, P = lin.shape[1:]
    idx = np.broadcast_to(lin.reshape(N, 1, K * P), (N, C, K * P))
    return np.take_along_axis(xf, idx, axis=2).reshape(N, C, K, P)


def sample_columns(x, coords, mod, cols):
    N, C, T, H, W = x.shape
    xf = x.reshape(N, C, T * H * W).astype(np.float64, copy=False)
    acc = np.zeros(cols.shape)
    for lin, w, _, _, _ in _corner_tables(coords, T, H, W):
        acc += w[:, None] * _gather(xf, lin)
    cols[...] = mod[:, None] * acc


def scatter_columns(x, coords, mod, grad_cols, grad_x, grad_coords, grad_mod):
    N, C, T, H, W = x.shape
    THW = T * H * W
    xf = x.reshape(N, C, THW).astype(np.float64, copy=False)
    K, P = coords.shape[1], coords.shape[3]
    v = np.zeros(grad_cols.shape)
    vt = np.zeros(grad_cols.shape)
    vy = np.zeros(grad_cols.shape)
    vx = np.zeros(grad_cols.shape)
    scaled = grad_cols * mod[:, None]
    base = (np.arange(N)[:, None] * C + np.arange(C)[None, :]) * THW  # (N, C)
    flat_grad = np.zeros(N * C * THW)
    for lin, w, dwt, dwy, dwx in _corner_tables(coords, T, H, W):
        xs = _gather(xf, lin)
        v += w[:, None] * xs
        vt += dwt[:, None] * xs
        vy += dwy[:, None] * xs
        vx += dwx[:, None] * xs
        idx = base[:, :, None, None] + lin[:, None, :, :]
        flat_grad += np.bincount(
            idx.ravel(), weights=(scaled * w[:, None]).ravel(), minlength=N * C * THW
        )
    grad_x += flat_grad.reshape(grad_x.shape)
    grad_mod[...] = np.sum(grad_cols * v, axis=1)
    grad_coords[:, :, 0] = mod * np.sum(grad_cols * vt, axis=1)
    grad_coords[:, :, 1] = mod * np.sum(grad_cols * vy, axis=1)
    grad_coords[:, :, 2] = mod * np.sum(grad_cols * vx, axis=1)

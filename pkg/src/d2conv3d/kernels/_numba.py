"""Numba loop nests for column sampling (deformable im2col) and its adjoint."""

import math

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _cell(pt, py, px, T, H, W, offs, w, dwt, dwy, dwx):
    """Fill the 8 neighbour offsets/weights; returns False if no neighbour is in bounds."""
    if not (pt > -1.0 and pt < T and py > -1.0 and py < H and px > -1.0 and px < W):
        return False
    t0 = math.floor(pt)
    y0 = math.floor(py)
    x0 = math.floor(px)
    ft = pt - t0
    fy = py - y0
    fx = px - x0
    it0 = int(t0)
    iy0 = int(y0)
    ix0 = int(x0)
    j = 0
    for a in range(2):
        it = it0 + a
        vt = ft if a == 1 else 1.0 - ft
        gt = 1.0 if a == 1 else -1.0
        for b in range(2):
            iy = iy0 + b
            vy = fy if b == 1 else 1.0 - fy
            gy = 1.0 if b == 1 else -1.0
            for c in range(2):
                ix = ix0 + c
                vx = fx if c == 1 else 1.0 - fx
                gx = 1.0 if c == 1 else -1.0
                if 0 <= it < T and 0 <= iy < H and 0 <= ix < W:
                    offs[j] = (it * H + iy) * W + ix
                    w[j] = vt * vy * vx
                    dwt[j] = gt * vy * vx
                    dwy[j] = vt * gy * vx
                    dwx[j] = vt * vy * gx
                else:
                    offs[j] = -1
                    w[j] = 0.0
                    dwt[j] = 0.0
                    dwy[j] = 0.0
                    dwx[j] = 0.0
                j += 1
    return True


@njit(cache=True, parallel=True)
def sample_columns(x, coords, mod, cols):
    N, C, T, H, W = x.shape
    K = coords.shape[1]
    P = coords.shape[3]
    xf = x.reshape(N, C, T * H * W)
    for nk in prange(N * K):
        n = nk // K
        k = nk % K
        offs = np.empty(8, np.int64)
        w = np.empty(8)
        dwt = np.empty(8)
        dwy = np.empty(8)
        dwx = np.empty(8)
        for p in range(P):
            hit = _cell(coords[n, k, 0, p], coords[n, k, 1, p], coords[n, k, 2, p],
                        T, H, W, offs, w, dwt, dwy, dwx)
            m = mod[n, k, p]
            for c in range(C):
                if not hit:
                    cols[n, c, k, p] = 0.0
                    continue
                acc = 0.0
                for j in range(8):
                    if offs[j] >= 0:
                        acc += w[j] * xf[n, c, offs[j]]
                cols[n, c, k, p] = m * acc


@njit(cache=True, parallel=True)
def scatter_columns(x, coords, mod, grad_cols, grad_x, grad_coords, grad_mod):
    N, C, T, H, W = x.shape
    K = coords.shape[1]
    P = coords.shape[3]
    xf = x.reshape(N, C, T * H * W)
    gxf = grad_x.reshape(N, C, T * H * W)
    # one worker per sample: grad_x[n] is owned by a single thread
    for n in prange(N):
        offs = np.empty(8, np.int64)
        w = np.empty(8)
        dwt = np.empty(8)
        dwy = np.empty(8)
        dwx = np.empty(8)
        for k in range(K):
            for p in range(P):
                hit = _cell(coords[n, k, 0, p], coords[n, k, 1, p], coords[n, k, 2, p],
                            T, H, W, offs, w, dwt, dwy, dwx)
                if not hit:
                    grad_mod[n, k, p] = 0.0
                    grad_coords[n, k, 0, p] = 0.0
                    grad_coords[n, k, 1, p] = 0.0
                    grad_coords[n, k, 2, p] = 0.0
                    continue
                m = mod[n, k, p]
                gm = 0.0
                gt = 0.0
                gy = 0.0
                gx = 0.0
                for c in range(C):
                    g = grad_cols[n, c, k, p]
                    v = 0.0
                    vt = 0.0
                    vy = 0.0
                    vx = 0.0
                    for j in range(8):
                        if offs[j] >= 0:
                            xv = xf[n, c, offs[j]]
                            v += w[j] * xv
                            vt += dwt[j] * xv
                            vy += dwy[j] * xv
                            vx += dwx[j] * xv
                    gm += g * v
                    gt += g * vt
                    gy += g * vy
                    gx += g * vx
                    gmw = g * m
                    for j in range(8):
                        if offs[j] >= 0:
                            gxf[n, c, offs[j]] += gmw * w[j]
                grad_mod[n, k, p] = gm
                grad_coords[n, k, 0, p] = m * gt
                grad_coords[n, k, 1, p] = m * gy
                grad_coords[n, k, 2, p] = m * gx

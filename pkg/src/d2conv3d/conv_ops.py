"""Forward and backward passes for the 3-D convolution family.

Every operator is expressed as "build columns, then multiply by the kernel":

* standard / fixed-dilation Conv3D gathers columns on the integer lattice;
* DCNv1 / DCNv2 move each kernel point by a learned offset;
* D²Conv3D scales the kernel grid per output point by a dilation triple.

The sampled variants go through :mod:`d2conv3d.kernels`, the lattice path is
plain numpy slicing. Both produce bit-identical columns when the sampling
coordinates are integers, so the reduction laws hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import kernels
from .sampler import SamplingStats, trilinear_sample
from .tensor import KernelWeights


def _triple(v, name, minimum):
    if np.isscalar(v):
        v = (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3 or any(a < minimum for a in v):
        raise ValueError(f"{name} must be three integers >= {minimum}, got {v}")
    return v


@dataclass(frozen=True)
class ConvConfig:
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)
    fixed_dilation: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel, "kernel", 1))
        object.__setattr__(self, "stride", _triple(self.stride, "stride", 1))
        object.__setattr__(self, "padding", _triple(self.padding, "padding", 0))
        object.__setattr__(self, "fixed_dilation", _triple(self.fixed_dilation, "fixed_dilation", 1))
        if any(k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel sizes must be odd, got {self.kernel}")

    @classmethod
    def same(cls, kernel=(3, 3, 3), dilation=(1, 1, 1), stride=(1, 1, 1)) -> "ConvConfig":
        """Padding that preserves extents at stride 1."""
        kernel = _triple(kernel, "kernel", 1)
        dilation = _triple(dilation, "fixed_dilation", 1)
        pad = tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))
        return cls(kernel, stride, pad, dilation)

    @property
    def num_points(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.kernel[2]

    def output_shape(self, spatial) -> tuple[int, int, int]:
        out = []
        for n, k, s, p, d in zip(spatial, self.kernel, self.stride, self.padding, self.fixed_dilation):
            o = (n + 2 * p - d * (k - 1) - 1) // s + 1
            if o < 1:
                raise ValueError(f"degenerate output extent {o} for input extent {n} with {self}")
            out.append(o)
        return tuple(out)


class ConvGrads(NamedTuple):
    x: np.ndarray
    weight: np.ndarray
    bias: Optional[np.ndarray]


class DCNGrads(NamedTuple):
    x: np.ndarray
    weight: np.ndarray
    bias: Optional[np.ndarray]
    offsets: np.ndarray
    modulation: Optional[np.ndarray]


class D2Grads(NamedTuple):
    x: np.ndarray
    weight: np.ndarray
    bias: Optional[np.ndarray]
    dilation: np.ndarray
    modulation: Optional[np.ndarray]


# ---------------------------------------------------------------- geometry


def kernel_grid(kernel) -> np.ndarray:
    """Centred integer kernel points, ``(K, 3)``, enumerated in (t, y, x) row-major order."""
    axes = [np.arange(k) - (k - 1) // 2 for k in kernel]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g.reshape(-1, 3).astype(np.float64)


def output_centers(cfg: ConvConfig, out_spatial) -> np.ndarray:
    """Input-space kernel centre for each output point, ``(3, P)``."""
    axes = []
    for o, s, p, d, k in zip(out_spatial, cfg.stride, cfg.padding, cfg.fixed_dilation, cfg.kernel):
        axes.append(np.arange(o) * s - p + d * (k - 1) // 2)
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)
    return g.reshape(3, -1).astype(np.float64)


def lattice_coords(cfg: ConvConfig, out_spatial) -> np.ndarray:
    """Sampling points of a standard convolution, ``(K, 3, P)``."""
    fd = np.asarray(cfg.fixed_dilation, dtype=np.float64)
    pts = kernel_grid(cfg.kernel) * fd
    return output_centers(cfg, out_spatial)[None] + pts[:, :, None]


def offset_coords(offsets: np.ndarray, cfg: ConvConfig, out_spatial) -> np.ndarray:
    N = offsets.shape[0]
    K = cfg.num_points
    d = offsets.reshape(N, K, 3, -1).astype(np.float64)
    return lattice_coords(cfg, out_spatial)[None] + d


def dilation_coords(dilation: np.ndarray, cfg: ConvConfig, out_spatial) -> np.ndarray:
    """``center + fixed_dilation * p_n * D(p0)`` for every kernel point, ``(N, K, 3, P)``."""
    N = dilation.shape[0]
    fd = np.asarray(cfg.fixed_dilation, dtype=np.float64)
    pts = kernel_grid(cfg.kernel) * fd  # (K, 3)
    D = dilation.reshape(N, 1, 3, -1).astype(np.float64)
    return output_centers(cfg, out_spatial)[None, None] + pts[None, :, :, None] * D


def expand_dilation(raw: np.ndarray) -> np.ndarray:
    """Broadcast a 1-, 2- or 3-channel dilation map to ``(d_t, d_y, d_x)``.

    One channel means a shared spatial rate and two channels separate spatial
    rates; in both cases the temporal rate is pinned to 1.
    """
    ch = raw.shape[1]
    if ch == 3:
        return raw
    ones = np.ones_like(raw[:, :1])
    if ch == 1:
        return np.concatenate([ones, raw, raw], axis=1)
    if ch == 2:
        return np.concatenate([ones, raw], axis=1)
    raise ValueError(f"dilation map must have 1, 2 or 3 channels, got {ch}")


def expand_dilation_backward(grad: np.ndarray, channels: int) -> np.ndarray:
    if channels == 3:
        return grad
    if channels == 1:
        return grad[:, 1:2] + grad[:, 2:3]
    if channels == 2:
        return grad[:, 1:3].copy()
    raise ValueError(f"dilation map must have 1, 2 or 3 channels, got {channels}")


# ---------------------------------------------------------------- checks


def _check_input(x: np.ndarray, w: KernelWeights, cfg: ConvConfig):
    if x.ndim != 5:
        raise ValueError(f"input must be 5-D (n, c, t, h, w), got shape {x.shape}")
    if x.shape[1] != w.c_in:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {w.c_in}")
    if w.kernel_size != cfg.kernel:
        raise ValueError(f"kernel weights are {w.kernel_size}, config says {cfg.kernel}")
    return cfg.output_shape(x.shape[2:])


def _check_map(m, name, n, channels, out_spatial):
    expected = (n, channels, *out_spatial)
    if m is None or m.shape != expected:
        got = None if m is None else m.shape
        raise ValueError(f"{name} must have shape {expected}, got {got}")


def _check_upstream(upstream, n, c_out, out_spatial):
    expected = (n, c_out, *out_spatial)
    if upstream.shape != expected:
        raise ValueError(f"upstream gradient must have shape {expected}, got {upstream.shape}")


# ---------------------------------------------------------------- shared core


def lattice_columns(x: np.ndarray, cfg: ConvConfig) -> np.ndarray:
    """im2col on the integer lattice with zero padding, ``(N, C, K, P)`` float64."""
    N, C = x.shape[:2]
    out = cfg.output_shape(x.shape[2:])
    pad = [(0, 0), (0, 0)] + [(p, p) for p in cfg.padding]
    xp = np.pad(x.astype(np.float64, copy=False), pad)
    P = out[0] * out[1] * out[2]
    cols = np.empty((N, C, cfg.num_points, P))
    st, sh, sw = cfg.stride
    dt, dh, dw = cfg.fixed_dilation
    k = 0
    for a in range(cfg.kernel[0]):
        for b in range(cfg.kernel[1]):
            for c in range(cfg.kernel[2]):
                sl = xp[
                    :, :,
                    a * dt : a * dt + st * (out[0] - 1) + 1 : st,
                    b * dh : b * dh + sh * (out[1] - 1) + 1 : sh,
                    c * dw : c * dw + sw * (out[2] - 1) + 1 : sw,
                ]
                cols[:, :, k] = sl.reshape(N, C, P)
                k += 1
    return cols


def _lattice_col2im(grad_cols: np.ndarray, x_shape, cfg: ConvConfig) -> np.ndarray:
    N, C, T, H, W = x_shape
    out = cfg.output_shape((T, H, W))
    pt, ph, pw = cfg.padding
    gxp = np.zeros((N, C, T + 2 * pt, H + 2 * ph, W + 2 * pw))
    st, sh, sw = cfg.stride
    dt, dh, dw = cfg.fixed_dilation
    k = 0
    for a in range(cfg.kernel[0]):
        for b in range(cfg.kernel[1]):
            for c in range(cfg.kernel[2]):
                gxp[
                    :, :,
                    a * dt : a * dt + st * (out[0] - 1) + 1 : st,
                    b * dh : b * dh + sh * (out[1] - 1) + 1 : sh,
                    c * dw : c * dw + sw * (out[2] - 1) + 1 : sw,
                ] += grad_cols[:, :, k].reshape(N, C, *out)
                k += 1
    return gxp[:, :, pt : pt + T, ph : ph + H, pw : pw + W]


def _apply_weights(cols, w: KernelWeights, out_spatial, dtype):
    N = cols.shape[0]
    W2 = w.weight.reshape(w.c_out, -1).astype(np.float64)
    y = np.matmul(W2, cols.reshape(N, W2.shape[1], -1))
    if w.bias is not None:
        y += w.bias.astype(np.float64)[None, :, None]
    return y.reshape(N, w.c_out, *out_spatial).astype(dtype, copy=False)


def _weight_grads(cols, w: KernelWeights, upstream):
    N = cols.shape[0]
    G = upstream.reshape(N, w.c_out, -1).astype(np.float64)
    CK = cols.shape[1] * cols.shape[2]
    flat = cols.reshape(N, CK, -1)
    gw = np.matmul(G, flat.transpose(0, 2, 1)).sum(axis=0).reshape(w.weight.shape)
    gb = None if w.bias is None else G.sum(axis=(0, 2))
    W2 = w.weight.reshape(w.c_out, -1).astype(np.float64)
    gcols = np.matmul(W2.T, G).reshape(cols.shape)
    return gw, gb, gcols


def _cast(a, dtype):
    return None if a is None else a.astype(dtype, copy=False)


def _sampled_forward(x, w, coords, mod, out_spatial):
    N, K = x.shape[0], coords.shape[1]
    m = None if mod is None else mod.reshape(N, K, -1)
    cols = kernels.sample_columns(x, coords, m)
    return _apply_weights(cols, w, out_spatial, x.dtype)


def _sampled_backward(x, w, coords, mod, upstream):
    N, K = x.shape[0], coords.shape[1]
    m = None if mod is None else mod.reshape(N, K, -1)
    cols = kernels.sample_columns(x, coords, m)
    gw, gb, gcols = _weight_grads(cols, w, upstream)
    gx, gcoords, gmod = kernels.scatter_columns(x, coords, gcols, m)
    return gx, gw, gb, gcoords, gmod


# ---------------------------------------------------------------- operators


def conv3d_forward(x: np.ndarray, w: KernelWeights, cfg: ConvConfig) -> np.ndarray:
    """Dense 3-D cross-correlation with zero padding, stride and fixed dilation."""
    out = _check_input(x, w, cfg)
    return _apply_weights(lattice_columns(x, cfg), w, out, x.dtype)


def conv3d_backward(x, w: KernelWeights, cfg: ConvConfig, upstream) -> ConvGrads:
    out = _check_input(x, w, cfg)
    _check_upstream(upstream, x.shape[0], w.c_out, out)
    gw, gb, gcols = _weight_grads(lattice_columns(x, cfg), w, upstream)
    gx = _lattice_col2im(gcols, x.shape, cfg)
    return ConvGrads(gx.astype(x.dtype), gw.astype(w.weight.dtype), _cast(gb, w.weight.dtype))


def dcn1_3d_forward(x, w: KernelWeights, offsets, cfg: ConvConfig) -> np.ndarray:
    out = _check_input(x, w, cfg)
    _check_map(offsets, "offsets", x.shape[0], 3 * cfg.num_points, out)
    return _sampled_forward(x, w, offset_coords(offsets, cfg, out), None, out)


def dcn2_3d_forward(x, w: KernelWeights, offsets, mod, cfg: ConvConfig) -> np.ndarray:
    out = _check_input(x, w, cfg)
    _check_map(offsets, "offsets", x.shape[0], 3 * cfg.num_points, out)
    _check_map(mod, "modulation", x.shape[0], cfg.num_points, out)
    return _sampled_forward(x, w, offset_coords(offsets, cfg, out), mod, out)


def d2conv3d_forward(x, w: KernelWeights, dil, mod, cfg: ConvConfig) -> np.ndarray:
    """Dynamically dilated, modulated convolution.

    ``dil`` is ``(N, 3, T_out, H_out, W_out)`` holding ``(d_t, d_y, d_x)``;
    ``mod`` is ``(N, K, T_out, H_out, W_out)`` or ``None`` for no modulation.
    """
    out = _check_input(x, w, cfg)
    _check_map(dil, "dilation", x.shape[0], 3, out)
    if mod is not None:
        _check_map(mod, "modulation", x.shape[0], cfg.num_points, out)
    return _sampled_forward(x, w, dilation_coords(dil, cfg, out), mod, out)


def _reshape_map(g, n, ch, out):
    return g.reshape(n, ch, *out)


def d2conv3d_backward(x, w: KernelWeights, dil, mod, cfg: ConvConfig, upstream) -> D2Grads:
    out = _check_input(x, w, cfg)
    N = x.shape[0]
    _check_map(dil, "dilation", N, 3, out)
    if mod is not None:
        _check_map(mod, "modulation", N, cfg.num_points, out)
    _check_upstream(upstream, N, w.c_out, out)
    gx, gw, gb, gcoords, gmod = _sampled_backward(x, w, dilation_coords(dil, cfg, out), mod, upstream)
    fd = np.asarray(cfg.fixed_dilation, dtype=np.float64)
    pts = kernel_grid(cfg.kernel) * fd  # (K, 3)
    gdil = np.sum(gcoords * pts[None, :, :, None], axis=1)
    dt = x.dtype
    return D2Grads(
        gx.astype(dt),
        gw.astype(w.weight.dtype),
        _cast(gb, w.weight.dtype),
        _reshape_map(gdil, N, 3, out).astype(dil.dtype, copy=False),
        None if mod is None else _reshape_map(gmod, N, cfg.num_points, out).astype(mod.dtype, copy=False),
    )


def dcn_3d_backward(variant, x, w: KernelWeights, offsets, cfg: ConvConfig, upstream, mod=None) -> DCNGrads:
    """Gradients of DCNv1 (``variant="v1"``) or DCNv2 (``variant="v2"``)."""
    if variant not in ("v1", "v2"):
        raise ValueError(f"variant must be 'v1' or 'v2', got {variant!r}")
    out = _check_input(x, w, cfg)
    N, K = x.shape[0], cfg.num_points
    _check_map(offsets, "offsets", N, 3 * K, out)
    if variant == "v2":
        _check_map(mod, "modulation", N, K, out)
    else:
        mod = None
    _check_upstream(upstream, N, w.c_out, out)
    gx, gw, gb, gcoords, gmod = _sampled_backward(x, w, offset_coords(offsets, cfg, out), mod, upstream)
    return DCNGrads(
        gx.astype(x.dtype),
        gw.astype(w.weight.dtype),
        _cast(gb, w.weight.dtype),
        _reshape_map(gcoords, N, 3 * K, out).astype(offsets.dtype, copy=False),
        None if mod is None else _reshape_map(gmod, N, K, out).astype(mod.dtype, copy=False),
    )


# ---------------------------------------------------------------- oracle


def reference_direct_conv(x, w: KernelWeights, cfg: ConvConfig, *, dilation=None, modulation=None, offsets=None):
    """Term-by-term loop nest over every output point and kernel point.

    Each term calls :func:`d2conv3d.sampler.trilinear_sample`, so this is slow
    and only meant as the correctness reference for small inputs.
    """
    out = _check_input(x, w, cfg)
    N, C = x.shape[:2]
    K = cfg.num_points
    if dilation is not None:
        _check_map(dilation, "dilation", N, 3, out)
    if offsets is not None:
        _check_map(offsets, "offsets", N, 3 * K, out)
    if modulation is not None:
        _check_map(modulation, "modulation", N, K, out)
    grid = kernel_grid(cfg.kernel)
    fd = cfg.fixed_dilation
    y = np.zeros((N, w.c_out, *out))
    for n in range(N):
        for to in range(out[0]):
            for yo in range(out[1]):
                for xo in range(out[2]):
                    p0 = [
                        o * s - p + d * (k - 1) // 2
                        for o, s, p, d, k in zip((to, yo, xo), cfg.stride, cfg.padding, fd, cfg.kernel)
                    ]
                    for k in range(K):
                        pt = []
                        for a in range(3):
                            step = fd[a] * grid[k, a]
                            if dilation is not None:
                                step = step * dilation[n, a, to, yo, xo]
                            q = p0[a] + step
                            if offsets is not None:
                                q = q + offsets[n, 3 * k + a, to, yo, xo]
                            pt.append(q)
                        m = 1.0 if modulation is None else modulation[n, k, to, yo, xo]
                        kt, kh, kw = np.unravel_index(k, cfg.kernel)
                        for c in range(C):
                            v = trilinear_sample(x[n, c], pt)
                            for o in range(w.c_out):
                                y[n, o, to, yo, xo] += m * w.weight[o, c, kt, kh, kw] * v
        if w.bias is not None:
            y[n] += w.bias[:, None, None, None]
    return y


# ---------------------------------------------------------------- OOB accounting


def sampling_coords(variant, x_shape, cfg: ConvConfig, *, dilation=None, offsets=None):
    """The exact sampling locations a forward pass would visit, ``(N, K, 3, P)``."""
    N = x_shape[0]
    out = cfg.output_shape(x_shape[2:])
    if variant in ("conv3d", "dilated"):
        return np.broadcast_to(lattice_coords(cfg, out), (N, cfg.num_points, 3, int(np.prod(out))))
    if variant in ("dcn1", "dcn2"):
        _check_map(offsets, "offsets", N, 3 * cfg.num_points, out)
        return offset_coords(offsets, cfg, out)
    if variant == "d2conv3d":
        _check_map(dilation, "dilation", N, 3, out)
        return dilation_coords(dilation, cfg, out)
    raise ValueError(f"unknown variant {variant!r}")


def oob_mask(coords: np.ndarray, extents) -> np.ndarray:
    """Boolean ``(N, K, P)``: sampling location outside ``[0, size-1]`` on any axis."""
    mask = np.zeros(coords.shape[:2] + coords.shape[3:], dtype=bool)
    for a, size in enumerate(extents):
        q = coords[:, :, a]
        mask |= ~((q >= 0) & (q <= size - 1))
    return mask


def interior_mask(cfg: ConvConfig, extents) -> np.ndarray:
    """Output points whose fixed-lattice footprint lies fully inside the volume, ``(P,)``."""
    out = cfg.output_shape(extents)
    centers = output_centers(cfg, out)
    keep = np.ones(centers.shape[1], dtype=bool)
    for a, size in enumerate(extents):
        r = cfg.fixed_dilation[a] * (cfg.kernel[a] - 1) // 2
        keep &= (centers[a] - r >= 0) & (centers[a] + r <= size - 1)
    return keep


def oob_stats_for(variant, x_shape, cfg: ConvConfig, *, dilation=None, offsets=None,
                  region: str = "all", label: str = "") -> SamplingStats:
    """Count sampling locations and out-of-volume ones for a forward pass.

    ``region="interior"`` restricts the count to output points whose standard
    kernel footprint is fully inside the volume.
    """
    if region not in ("all", "interior"):
        raise ValueError(f"region must be 'all' or 'interior', got {region!r}")
    extents = tuple(x_shape[2:])
    coords = sampling_coords(variant, x_shape, cfg, dilation=dilation, offsets=offsets)
    mask = oob_mask(coords, extents)
    if region == "interior":
        mask = mask[:, :, interior_mask(cfg, extents)]
    return SamplingStats(label or variant, int(mask.size), int(mask.sum()))

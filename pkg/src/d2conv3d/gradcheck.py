"""Central finite-difference checks for every analytic backward pass.

Each ``check_*`` function builds a small random instance, contracts the
operator output with a random upstream tensor to get a scalar, and compares
the analytic gradient of every input against central differences on a random
subset of entries. Sampling coordinates are kept at least ``LATTICE_MARGIN``
away from integers, because trilinear interpolation has kinks there.

The error of one tensor is ``max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-8)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import blocks, conv_ops
from .conv_ops import ConvConfig
from .sampler import trilinear_sample, trilinear_sample_backward
from .tensor import KernelWeights
from .train import losses

STEP = 1e-6
LATTICE_MARGIN = 2e-5
TOLERANCE = {64: 1e-5, 32: 1e-4}
DEFAULT_SHAPES = {
    "conv3d": (1, 2, 4, 5, 5),
    "dcn1": (1, 2, 4, 5, 5),
    "dcn2": (1, 2, 4, 5, 5),
    "d2conv3d": (1, 2, 4, 5, 5),
    "d2block": (1, 2, 3, 5, 5),
    "groupnorm": (2, 4, 3, 4, 4),
    "lovasz": (1, 1, 2, 6, 6),
    "bce": (1, 1, 2, 6, 6),
    "sampler": (1, 1, 3, 4, 4),
}
OPS = ("conv3d", "dcn1", "dcn2", "d2conv3d", "d2block", "lovasz", "bce", "groupnorm", "sampler")


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.max(np.abs(n), initial=0.0), np.max(np.abs(a), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - n), initial=0.0) / denom)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, idx, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr.flat[idx]``; ``arr`` is perturbed in place and restored."""
    flat = arr.reshape(-1)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


@dataclass
class GradReport:
    op: str
    width: int
    errors: dict = field(default_factory=dict)

    @property
    def tolerance(self) -> float:
        return TOLERANCE[self.width]

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def lines(self):
        for name, err in self.errors.items():
            flag = "ok" if err <= self.tolerance else "FAIL"
            yield f"{self.op:10s} {name:14s} rel_err={err:.3e} tol={self.tolerance:.0e} {flag}"


def _compare(report, rng, f, tensors: dict, analytic: dict, max_probes, corrupt):
    for name, arr in tensors.items():
        if arr is None:
            continue
        k = min(max_probes, arr.size)
        idx = rng.choice(arr.size, size=k, replace=False)
        num = numeric_grad(f, arr, idx)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)[idx]
        if corrupt:
            ana = ana * 1.01 + 1e-3 * np.max(np.abs(ana), initial=1.0)
        report.errors[name] = max(report.errors.get(name, 0.0), rel_error(ana, num))


def _fractional_margin(q) -> float:
    q = np.asarray(q)
    if q.size == 0:
        return 1.0
    return float(np.min(np.abs(q - np.round(q))))


def _moving_margin_d2(dil, cfg, out):
    coords = conv_ops.dilation_coords(dil, cfg, out)
    moving = conv_ops.kernel_grid(cfg.kernel) != 0  # (K, 3)
    return _fractional_margin(coords[:, moving]) if moving.any() else 1.0


def _vals64(*arrs):
    return [None if a is None else np.array(a, dtype=np.float64) for a in arrs]


def _cast(a, dtype):
    return None if a is None else a.astype(dtype)


def _conv_instance(rng, shape, c_out=2, bias=True):
    x = rng.normal(size=shape)
    w = KernelWeights(rng.normal(size=(c_out, shape[1], 3, 3, 3)), rng.normal(size=c_out) if bias else None)
    return x, w


def _random_cfg(rng, shape):
    """A random valid stride/padding/dilation combination for a 3x3x3 kernel."""
    while True:
        stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
        pad = tuple(int(p) for p in rng.integers(0, 3, size=3))
        dil = tuple(int(d) for d in rng.integers(1, 3, size=3))
        cfg = ConvConfig((3, 3, 3), stride, pad, dil)
        try:
            cfg.output_shape(shape[2:])
            return cfg
        except ValueError:
            continue


def check_conv3d(rng, shape=None, width=64, max_probes=24, corrupt=False, cfg=None):
    shape = shape or DEFAULT_SHAPES["conv3d"]
    x, w = _conv_instance(rng, shape)
    cfg = cfg or _random_cfg(rng, shape)
    U = rng.normal(size=(shape[0], w.c_out, *cfg.output_shape(shape[2:])))
    dt = np.float32 if width == 32 else np.float64
    g = conv_ops.conv3d_backward(x.astype(dt), KernelWeights(w.weight.astype(dt), w.bias.astype(dt)), cfg, U.astype(dt))
    report = GradReport("conv3d", width)

    def f():
        return float(np.sum(U * conv_ops.conv3d_forward(x, w, cfg)))

    _compare(report, rng, f, {"x": x, "weight": w.weight, "bias": w.bias},
             {"x": g.x, "weight": g.weight, "bias": g.bias}, max_probes, corrupt)
    return report


def _dcn_offsets(rng, N, K, out, cfg, scale=0.7):
    while True:
        off = rng.normal(0.0, scale, size=(N, 3 * K, *out))
        if _fractional_margin(conv_ops.offset_coords(off, cfg, out)) > LATTICE_MARGIN:
            return off


def check_dcn(rng, variant="dcn1", shape=None, width=64, max_probes=24, corrupt=False):
    shape = shape or DEFAULT_SHAPES[variant]
    x, w = _conv_instance(rng, shape)
    cfg = ConvConfig.same()
    out = cfg.output_shape(shape[2:])
    K = cfg.num_points
    off = _dcn_offsets(rng, shape[0], K, out, cfg)
    mod = rng.uniform(0.1, 1.0, size=(shape[0], K, *out)) if variant == "dcn2" else None
    U = rng.normal(size=(shape[0], w.c_out, *out))
    dt = np.float32 if width == 32 else np.float64
    g = conv_ops.dcn_3d_backward("v1" if variant == "dcn1" else "v2", x.astype(dt),
                                 KernelWeights(w.weight.astype(dt), w.bias.astype(dt)),
                                 off.astype(dt), cfg, U.astype(dt), mod=_cast(mod, dt))
    report = GradReport(variant, width)

    def f():
        if variant == "dcn1":
            return float(np.sum(U * conv_ops.dcn1_3d_forward(x, w, off, cfg)))
        return float(np.sum(U * conv_ops.dcn2_3d_forward(x, w, off, mod, cfg)))

    _compare(report, rng, f, {"x": x, "weight": w.weight, "bias": w.bias, "offsets": off, "modulation": mod},
             {"x": g.x, "weight": g.weight, "bias": g.bias, "offsets": g.offsets, "modulation": g.modulation},
             max_probes, corrupt)
    return report


def _d2_dilation(rng, N, out, cfg):
    while True:
        dil = rng.uniform(0.2, 2.4, size=(N, 3, *out))
        if _moving_margin_d2(dil, cfg, out) > LATTICE_MARGIN:
            return dil


def check_d2conv3d(rng, shape=None, width=64, max_probes=24, corrupt=False):
    shape = shape or DEFAULT_SHAPES["d2conv3d"]
    x, w = _conv_instance(rng, shape)
    cfg = ConvConfig.same()
    out = cfg.output_shape(shape[2:])
    K = cfg.num_points
    dil = _d2_dilation(rng, shape[0], out, cfg)
    mod = rng.uniform(0.1, 1.0, size=(shape[0], K, *out))
    U = rng.normal(size=(shape[0], w.c_out, *out))
    dt = np.float32 if width == 32 else np.float64
    g = conv_ops.d2conv3d_backward(x.astype(dt), KernelWeights(w.weight.astype(dt), w.bias.astype(dt)),
                                   dil.astype(dt), mod.astype(dt), cfg, U.astype(dt))
    report = GradReport("d2conv3d", width)

    def f():
        return float(np.sum(U * conv_ops.d2conv3d_forward(x, w, dil, mod, cfg)))

    _compare(report, rng, f, {"x": x, "weight": w.weight, "bias": w.bias, "dilation": dil, "modulation": mod},
             {"x": g.x, "weight": g.weight, "bias": g.bias, "dilation": g.dilation, "modulation": g.modulation},
             max_probes, corrupt)
    return report


def random_block(rng, c_in, c_out, activation="one_plus_elu", modulation="compensated", scale=0.3):
    blk = blocks.D2Block.create(c_in, c_out, rng=rng, activation=activation, modulation=modulation)
    blk.main.bias[:] = rng.normal(size=c_out)
    for p in (blk.f_d, blk.f_m):
        p.weight[...] = rng.normal(0.0, scale, size=p.weight.shape)
        p.bias[...] = rng.normal(0.0, scale, size=p.bias.shape)
    return blk


def check_d2block(rng, shape=None, width=64, max_probes=16, corrupt=False, activation="one_plus_elu",
                  modulation="compensated"):
    shape = shape or DEFAULT_SHAPES["d2block"]
    out = ConvConfig.same().output_shape(shape[2:])
    while True:
        x = rng.normal(size=shape)
        blk = random_block(rng, shape[1], 2, activation, modulation)
        raw_d, D, _, _ = blocks.d2block_maps(x, blk)
        if (_moving_margin_d2(D, blk.cfg, out) > LATTICE_MARGIN
                and (activation == "one_plus_elu" or np.min(np.abs(raw_d)) > LATTICE_MARGIN)):
            break
    U = rng.normal(size=(shape[0], 2, *out))
    dt = np.float32 if width == 32 else np.float64
    if dt is np.float64:
        g = blocks.d2block_backward(x, blk, U)
    else:
        blk32 = blocks.D2Block(*(KernelWeights(k.weight.astype(dt), k.bias.astype(dt)) for k in (blk.main, blk.f_d, blk.f_m)),
                               blk.cfg, blk.activation, blk.modulation)
        g = blocks.d2block_backward(x.astype(dt), blk32, U.astype(dt))
    report = GradReport("d2block", width)

    def f():
        return float(np.sum(U * blocks.d2block_forward(x, blk)))

    tensors = {"x": x}
    analytic = {"x": g.x}
    for part in ("main", "f_d", "f_m"):
        kw, gk = getattr(blk, part), getattr(g, part)
        tensors[f"{part}.weight"], analytic[f"{part}.weight"] = kw.weight, gk.weight
        tensors[f"{part}.bias"], analytic[f"{part}.bias"] = kw.bias, gk.bias
    if modulation == "disabled":
        tensors.pop("f_m.weight"), tensors.pop("f_m.bias")
    _compare(report, rng, f, tensors, analytic, max_probes, corrupt)
    return report


def check_groupnorm(rng, shape=None, width=64, max_probes=32, corrupt=False, groups=2):
    shape = shape or DEFAULT_SHAPES["groupnorm"]
    x = rng.normal(size=shape) * 2.0 + 0.5
    gamma = rng.normal(size=shape[1])
    beta = rng.normal(size=shape[1])
    U = rng.normal(size=shape)
    dt = np.float32 if width == 32 else np.float64
    gx, gg, gb = blocks.groupnorm_backward(x.astype(dt), groups, gamma.astype(dt), beta.astype(dt), 1e-5, U.astype(dt))
    report = GradReport("groupnorm", width)

    def f():
        return float(np.sum(U * blocks.groupnorm(x, groups, gamma, beta, 1e-5)))

    _compare(report, rng, f, {"x": x, "gamma": gamma, "beta": beta}, {"x": gx, "gamma": gg, "beta": gb},
             max_probes, corrupt)
    return report


def _lovasz_margin(z, y):
    frames_z = z.reshape(-1, z.shape[-2] * z.shape[-1])
    frames_y = y.reshape(frames_z.shape)
    m = np.inf
    for zi, yi in zip(frames_z, frames_y):
        e = np.sort(1.0 - zi * (2 * yi - 1))
        m = min(m, np.min(np.abs(e)), np.min(np.diff(e)) if e.size > 1 else np.inf)
    return m


def check_loss(rng, name="lovasz", shape=None, width=64, max_probes=32, corrupt=False):
    shape = shape or DEFAULT_SHAPES[name]
    while True:
        z = rng.normal(0.0, 1.5, size=shape)
        y = (rng.uniform(size=shape) < 0.4).astype(np.float64)
        if name == "bce" or _lovasz_margin(z, y) > LATTICE_MARGIN:
            break
    fwd, bwd = losses.LOSSES[name]
    dt = np.float32 if width == 32 else np.float64
    g = bwd(z.astype(dt), y.astype(dt))
    report = GradReport(name, width)
    _compare(report, rng, lambda: fwd(z, y), {"logits": z}, {"logits": g}, max_probes, corrupt)
    return report


def check_sampler(rng, shape=None, width=64, max_probes=48, corrupt=False):
    shape = shape or DEFAULT_SHAPES["sampler"]
    vol = rng.normal(size=shape[-3:])
    while True:
        p = rng.uniform(-0.8, np.array(shape[-3:]) - 0.2)
        if _fractional_margin(p) > LATTICE_MARGIN:
            break
    up = float(rng.normal())
    gv_list, gp = trilinear_sample_backward(vol.astype(np.float32) if width == 32 else vol, p, up)
    gv = np.zeros_like(vol)
    for (it, iy, ix), w in gv_list:
        gv[it, iy, ix] = w
    report = GradReport("sampler", width)

    def f():
        return up * trilinear_sample(vol, p)

    _compare(report, rng, f, {"vol": vol, "p": p}, {"vol": gv, "p": gp}, max_probes, corrupt)
    return report


def run_check(op: str, rng, shape=None, width=64, corrupt=False) -> GradReport:
    if width not in TOLERANCE:
        raise ValueError(f"width must be 32 or 64, got {width}")
    if op not in OPS:
        raise ValueError(f"unknown op {op!r}; expected one of {OPS}")
    if op == "conv3d":
        return check_conv3d(rng, shape, width, corrupt=corrupt)
    if op in ("dcn1", "dcn2"):
        return check_dcn(rng, op, shape, width, corrupt=corrupt)
    if op == "d2conv3d":
        return check_d2conv3d(rng, shape, width, corrupt=corrupt)
    if op == "d2block":
        return check_d2block(rng, shape, width, corrupt=corrupt)
    if op == "groupnorm":
        return check_groupnorm(rng, shape, width, corrupt=corrupt)
    if op in ("lovasz", "bce"):
        return check_loss(rng, op, shape, width, corrupt=corrupt)
    return check_sampler(rng, shape, width, corrupt=corrupt)

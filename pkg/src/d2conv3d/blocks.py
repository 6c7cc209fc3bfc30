"""Dynamic convolution blocks: predictor convolutions, activations, GroupNorm.

A :class:`D2Block` predicts a dilation map with ``f_d`` and a modulation map
with ``f_m`` from the same input it convolves. :class:`DeformBlock` is the
DCNv1/DCNv2 counterpart that predicts ``3K`` offsets instead.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import expit

from . import conv_ops
from .conv_ops import ConvConfig
from .sampler import SamplingStats
from .tensor import KernelWeights, npy_read, npy_write

ACTIVATIONS = ("none", "relu", "one_plus_relu", "one_plus_elu")
MODULATION_MODES = ("compensated", "sigmoid", "disabled")


# ---------------------------------------------------------------- activations


def dilation_activation(raw: np.ndarray, kind: str = "one_plus_elu") -> np.ndarray:
    """Map raw predictor output to dilation rates.

    ``one_plus_elu`` uses ``1 + elu(v) = exp(v)`` on the negative branch and
    floors it at the smallest positive normal float, so the result stays
    strictly positive even where ``exp`` underflows.
    """
    if kind == "none":
        return raw.copy()
    if kind == "relu":
        return np.maximum(raw, 0.0)
    if kind == "one_plus_relu":
        return 1.0 + np.maximum(raw, 0.0)
    if kind == "one_plus_elu":
        tiny = np.finfo(raw.dtype).tiny
        neg = np.maximum(np.exp(np.minimum(raw, 0.0)), tiny)
        return np.where(raw >= 0, 1.0 + raw, neg).astype(raw.dtype, copy=False)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def dilation_activation_grad(raw: np.ndarray, kind: str = "one_plus_elu") -> np.ndarray:
    """Elementwise derivative of :func:`dilation_activation` (right-sided at 0)."""
    if kind == "none":
        return np.ones_like(raw)
    if kind in ("relu", "one_plus_relu"):
        return (raw > 0).astype(raw.dtype)
    if kind == "one_plus_elu":
        return np.where(raw >= 0, 1.0, np.exp(np.minimum(raw, 0.0))).astype(raw.dtype, copy=False)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def modulation_activation(raw: np.ndarray, mode: str = "compensated") -> np.ndarray:
    """``2*sigmoid`` (so zero input gives exactly 1), plain ``sigmoid``, or all ones."""
    if mode == "compensated":
        return 2.0 * expit(raw)
    if mode == "sigmoid":
        return expit(raw)
    if mode == "disabled":
        return np.ones_like(raw)
    raise ValueError(f"unknown modulation mode {mode!r}; expected one of {MODULATION_MODES}")


def modulation_activation_grad(raw: np.ndarray, mode: str = "compensated") -> np.ndarray:
    if mode == "disabled":
        return np.zeros_like(raw)
    s = expit(raw)
    scale = 2.0 if mode == "compensated" else 1.0
    return scale * s * (1.0 - s)


# ---------------------------------------------------------------- GroupNorm


def groupnorm(x, groups: int, gamma=None, beta=None, eps: float = 1e-5):
    """Normalise each (sample, channel group) over channels and (T, H, W)."""
    N, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ValueError(f"{C} channels are not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xg = x.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    y = ((xg - mu) / np.sqrt(var + eps)).reshape(x.shape)
    shape = (1, C) + (1,) * (x.ndim - 2)
    if gamma is not None:
        y = y * gamma.reshape(shape)
    if beta is not None:
        y = y + beta.reshape(shape)
    return y


def groupnorm_backward(x, groups: int, gamma, beta, eps: float, upstream):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    N, C = x.shape[:2]
    xg = x.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    xhat = (xg - mu) * inv
    axes = (0,) + tuple(range(2, x.ndim))
    g = upstream
    ggamma = None if gamma is None else np.sum(g * xhat.reshape(x.shape), axis=axes)
    gbeta = None if beta is None else np.sum(g, axis=axes)
    if gamma is not None:
        g = g * gamma.reshape((1, C) + (1,) * (x.ndim - 2))
    gg = g.reshape(N, groups, -1)
    gx = inv * (gg - gg.mean(axis=2, keepdims=True) - xhat * np.mean(gg * xhat, axis=2, keepdims=True))
    return gx.reshape(x.shape), ggamma, gbeta


# ---------------------------------------------------------------- blocks


def predictor_config(cfg: ConvConfig) -> ConvConfig:
    """3x3x3 same-padded predictor on the main operator's output grid."""
    return ConvConfig(kernel=(3, 3, 3), stride=cfg.stride, padding=(1, 1, 1))


def _check_grid(x_spatial, cfg):
    main = cfg.output_shape(x_spatial)
    pred = predictor_config(cfg).output_shape(x_spatial)
    if main != pred:
        raise ValueError(f"predictor grid {pred} does not match operator output grid {main}")


@dataclass
class D2Block:
    main: KernelWeights
    f_d: KernelWeights
    f_m: KernelWeights
    cfg: ConvConfig = field(default_factory=ConvConfig)
    activation: str = "one_plus_elu"
    modulation: str = "compensated"

    predictor_names = ("f_d", "f_m")

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.modulation not in MODULATION_MODES:
            raise ValueError(f"unknown modulation mode {self.modulation!r}")
        if self.f_d.c_out not in (1, 2, 3):
            raise ValueError(f"f_d must produce 1, 2 or 3 channels, got {self.f_d.c_out}")
        if self.f_m.c_out != self.main.num_points:
            raise ValueError(f"f_m must produce {self.main.num_points} channels, got {self.f_m.c_out}")
        if not (self.main.c_in == self.f_d.c_in == self.f_m.c_in):
            raise ValueError("main, f_d and f_m must read the same number of input channels")

    @classmethod
    def create(cls, c_in, c_out, cfg: Optional[ConvConfig] = None, *, rng=None,
               activation="one_plus_elu", modulation="compensated", dilation_channels=3,
               dtype=np.float64) -> "D2Block":
        cfg = ConvConfig() if cfg is None else cfg
        main = KernelWeights.he_normal(c_out, c_in, cfg.kernel, rng=rng, dtype=dtype)
        f_d = KernelWeights.zeros(dilation_channels, c_in, dtype=dtype)
        f_m = KernelWeights.zeros(cfg.num_points, c_in, dtype=dtype)
        return cls(main, f_d, f_m, cfg, activation, modulation)

    def options(self):
        return {"activation": self.activation, "modulation": self.modulation}

    def params(self) -> dict:
        return {
            "main.weight": self.main.weight, "main.bias": self.main.bias,
            "f_d.weight": self.f_d.weight, "f_d.bias": self.f_d.bias,
            "f_m.weight": self.f_m.weight, "f_m.bias": self.f_m.bias,
        }


class BlockGrads(NamedTuple):
    x: np.ndarray
    main: KernelWeights
    f_d: KernelWeights
    f_m: KernelWeights


def _as_grads(weight, bias) -> KernelWeights:
    return KernelWeights(weight, bias)


def d2block_maps(x, blk: D2Block):
    """Dilation and modulation maps the block would use on ``x``.

    Returns ``(raw_d, D, raw_m, M)``; ``M`` is ``None`` when modulation is disabled.
    """
    _check_grid(x.shape[2:], blk.cfg)
    pcfg = predictor_config(blk.cfg)
    raw_d = conv_ops.conv3d_forward(x, blk.f_d, pcfg)
    D = conv_ops.expand_dilation(dilation_activation(raw_d, blk.activation))
    if blk.modulation == "disabled":
        return raw_d, D, None, None
    raw_m = conv_ops.conv3d_forward(x, blk.f_m, pcfg)
    return raw_d, D, raw_m, modulation_activation(raw_m, blk.modulation)


def d2block_forward(x, blk: D2Block, stats: Optional[SamplingStats] = None):
    _, D, _, M = d2block_maps(x, blk)
    if stats is not None:
        stats.merge(conv_ops.oob_stats_for("d2conv3d", x.shape, blk.cfg, dilation=D))
    return conv_ops.d2conv3d_forward(x, blk.main, D, M, blk.cfg)


def d2block_backward(x, blk: D2Block, upstream) -> BlockGrads:
    raw_d, D, raw_m, M = d2block_maps(x, blk)
    g = conv_ops.d2conv3d_backward(x, blk.main, D, M, blk.cfg, upstream)
    pcfg = predictor_config(blk.cfg)
    g_raw_d = conv_ops.expand_dilation_backward(g.dilation, blk.f_d.c_out)
    g_raw_d = g_raw_d * dilation_activation_grad(raw_d, blk.activation)
    gd = conv_ops.conv3d_backward(x, blk.f_d, pcfg, g_raw_d)
    gx = g.x + gd.x
    if M is None:
        gm_w, gm_b = np.zeros_like(blk.f_m.weight), None if blk.f_m.bias is None else np.zeros_like(blk.f_m.bias)
    else:
        g_raw_m = g.modulation * modulation_activation_grad(raw_m, blk.modulation)
        gm = conv_ops.conv3d_backward(x, blk.f_m, pcfg, g_raw_m)
        gx = gx + gm.x
        gm_w, gm_b = gm.weight, gm.bias
    return BlockGrads(gx, _as_grads(g.weight, g.bias), _as_grads(gd.weight, gd.bias), _as_grads(gm_w, gm_b))


def dropin_init(blk, pretrained: KernelWeights):
    """Copy ``pretrained`` into the main kernel and zero every predictor.

    Works for :class:`D2Block` and :class:`DeformBlock`. With the default
    activation and ``compensated``/``disabled`` modulation, the block then
    reproduces the standard convolution exactly.
    """
    if pretrained.weight.shape != blk.main.weight.shape:
        raise ValueError(f"pretrained kernel {pretrained.weight.shape} does not match {blk.main.weight.shape}")
    if (pretrained.bias is None) != (blk.main.bias is None):
        raise ValueError("pretrained bias presence does not match the block")
    preds = {name: KernelWeights.zeros(getattr(blk, name).c_out, getattr(blk, name).c_in,
                                       getattr(blk, name).kernel_size, dtype=getattr(blk, name).weight.dtype)
             for name in blk.predictor_names}
    return type(blk)(main=pretrained.copy(), cfg=blk.cfg, **preds, **blk.options())


@dataclass
class DeformBlock:
    """DCNv1 (``variant="dcn1"``) or DCNv2 (``"dcn2"``) with predicted offsets."""

    main: KernelWeights
    f_o: KernelWeights
    f_m: KernelWeights
    cfg: ConvConfig = field(default_factory=ConvConfig)
    variant: str = "dcn2"
    modulation: str = "compensated"

    predictor_names = ("f_o", "f_m")

    def __post_init__(self):
        if self.variant not in ("dcn1", "dcn2"):
            raise ValueError(f"variant must be 'dcn1' or 'dcn2', got {self.variant!r}")
        if self.f_o.c_out != 3 * self.main.num_points:
            raise ValueError(f"f_o must produce {3 * self.main.num_points} channels, got {self.f_o.c_out}")
        if self.f_m.c_out != self.main.num_points:
            raise ValueError(f"f_m must produce {self.main.num_points} channels, got {self.f_m.c_out}")

    def options(self):
        return {"variant": self.variant, "modulation": self.modulation}

    @classmethod
    def create(cls, c_in, c_out, cfg: Optional[ConvConfig] = None, *, rng=None, variant="dcn2",
               modulation="compensated", dtype=np.float64) -> "DeformBlock":
        cfg = ConvConfig() if cfg is None else cfg
        K = cfg.num_points
        main = KernelWeights.he_normal(c_out, c_in, cfg.kernel, rng=rng, dtype=dtype)
        return cls(main, KernelWeights.zeros(3 * K, c_in, dtype=dtype), KernelWeights.zeros(K, c_in, dtype=dtype),
                   cfg, variant, modulation)

    @property
    def modulated(self) -> bool:
        return self.variant == "dcn2" and self.modulation != "disabled"

    def params(self) -> dict:
        return {
            "main.weight": self.main.weight, "main.bias": self.main.bias,
            "f_o.weight": self.f_o.weight, "f_o.bias": self.f_o.bias,
            "f_m.weight": self.f_m.weight, "f_m.bias": self.f_m.bias,
        }


def deform_block_maps(x, blk: DeformBlock):
    _check_grid(x.shape[2:], blk.cfg)
    pcfg = predictor_config(blk.cfg)
    offsets = conv_ops.conv3d_forward(x, blk.f_o, pcfg)
    if not blk.modulated:
        return offsets, None, None
    raw_m = conv_ops.conv3d_forward(x, blk.f_m, pcfg)
    return offsets, raw_m, modulation_activation(raw_m, blk.modulation)


def deform_block_forward(x, blk: DeformBlock, stats: Optional[SamplingStats] = None):
    offsets, _, M = deform_block_maps(x, blk)
    if stats is not None:
        stats.merge(conv_ops.oob_stats_for(blk.variant, x.shape, blk.cfg, offsets=offsets))
    if M is None:
        return conv_ops.dcn1_3d_forward(x, blk.main, offsets, blk.cfg)
    return conv_ops.dcn2_3d_forward(x, blk.main, offsets, M, blk.cfg)


def deform_block_backward(x, blk: DeformBlock, upstream) -> BlockGrads:
    offsets, raw_m, M = deform_block_maps(x, blk)
    if M is None:
        g = conv_ops.dcn_3d_backward("v1", x, blk.main, offsets, blk.cfg, upstream)
    else:
        g = conv_ops.dcn_3d_backward("v2", x, blk.main, offsets, blk.cfg, upstream, mod=M)
    pcfg = predictor_config(blk.cfg)
    go = conv_ops.conv3d_backward(x, blk.f_o, pcfg, g.offsets)
    gx = g.x + go.x
    if M is None:
        gm = KernelWeights(np.zeros_like(blk.f_m.weight), None if blk.f_m.bias is None else np.zeros_like(blk.f_m.bias))
    else:
        gmc = conv_ops.conv3d_backward(x, blk.f_m, pcfg, g.modulation * modulation_activation_grad(raw_m, blk.modulation))
        gx = gx + gmc.x
        gm = KernelWeights(gmc.weight, gmc.bias)
    return BlockGrads(gx, KernelWeights(g.weight, g.bias), KernelWeights(go.weight, go.bias), gm)


def block_forward(x, blk, stats=None):
    if isinstance(blk, D2Block):
        return d2block_forward(x, blk, stats)
    return deform_block_forward(x, blk, stats)


def block_backward(x, blk, upstream) -> BlockGrads:
    if isinstance(blk, D2Block):
        return d2block_backward(x, blk, upstream)
    return deform_block_backward(x, blk, upstream)


# ---------------------------------------------------------------- serialisation

MANIFEST = "manifest.json"


def save_arrays(directory, arrays: dict, meta: dict) -> None:
    """Write each array as ``<name>.npy`` plus a JSON manifest naming them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in arrays.items():
        if arr is None:
            continue
        fname = f"{name}.npy"
        npy_write(np.asarray(arr), directory / fname)
        files[name] = {"file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)}
    with open(directory / MANIFEST, "w") as fh:
        json.dump({"format": "d2conv3d-params", "version": 1, "arrays": files, "meta": meta}, fh, indent=2)


def load_arrays(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {os.fspath(directory)}")
    with open(path) as fh:
        manifest = json.load(fh)
    arrays = {name: npy_read(directory / info["file"], pad_to_5d=False)
              for name, info in manifest["arrays"].items()}
    return arrays, manifest.get("meta", {})


def _cfg_meta(cfg: ConvConfig) -> dict:
    return {"kernel": list(cfg.kernel), "stride": list(cfg.stride),
            "padding": list(cfg.padding), "fixed_dilation": list(cfg.fixed_dilation)}


def _kw(arrays, prefix):
    return KernelWeights(arrays[f"{prefix}.weight"], arrays.get(f"{prefix}.bias"))


def block_meta(blk) -> dict:
    meta = {"cfg": _cfg_meta(blk.cfg), "modulation": blk.modulation}
    if isinstance(blk, D2Block):
        meta.update(kind="d2block", activation=blk.activation)
    else:
        meta.update(kind="deform", variant=blk.variant)
    return meta


def block_from_arrays(arrays: dict, meta: dict, prefix: str = ""):
    cfg = ConvConfig(**meta["cfg"])
    if meta["kind"] == "d2block":
        return D2Block(_kw(arrays, prefix + "main"), _kw(arrays, prefix + "f_d"), _kw(arrays, prefix + "f_m"),
                       cfg, meta["activation"], meta["modulation"])
    return DeformBlock(_kw(arrays, prefix + "main"), _kw(arrays, prefix + "f_o"), _kw(arrays, prefix + "f_m"),
                       cfg, meta["variant"], meta["modulation"])


def save_block(blk, directory) -> None:
    save_arrays(directory, blk.params(), block_meta(blk))


def load_block(directory):
    arrays, meta = load_arrays(directory)
    return block_from_arrays(arrays, meta)

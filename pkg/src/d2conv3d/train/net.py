"""A tiny encoder-decoder with hand-written backward passes.

Layers cache their forward inputs and expose ``backward(grad) -> grad_input``;
parameter gradients land in ``layer.grads`` keyed like ``layer.params()``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import blocks, conv_ops
from ..conv_ops import ConvConfig
from ..sampler import SamplingStats
from ..tensor import KernelWeights

VARIANTS = ("conv3d", "dcn1", "dcn2", "d2conv3d")


class Conv3d:
    def __init__(self, name, kw: KernelWeights, cfg: ConvConfig):
        self.name, self.kw, self.cfg = name, kw, cfg
        self.grads = {}

    def params(self):
        return {f"{self.name}.weight": self.kw.weight, f"{self.name}.bias": self.kw.bias}

    def forward(self, x, stats=None):
        self._x = x
        if stats is not None:
            stats.setdefault(self.name, SamplingStats(self.name)).merge(
                conv_ops.oob_stats_for("conv3d", x.shape, self.cfg))
        return conv_ops.conv3d_forward(x, self.kw, self.cfg)

    def backward(self, g):
        r = conv_ops.conv3d_backward(self._x, self.kw, self.cfg, g)
        self.grads = {f"{self.name}.weight": r.weight, f"{self.name}.bias": r.bias}
        return r.x


class GroupNorm:
    def __init__(self, name, channels, groups, eps=1e-5):
        self.name, self.groups, self.eps = name, groups, eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.grads = {}

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def forward(self, x, stats=None):
        self._x = x
        return blocks.groupnorm(x, self.groups, self.gamma, self.beta, self.eps)

    def backward(self, g):
        gx, gg, gb = blocks.groupnorm_backward(self._x, self.groups, self.gamma, self.beta, self.eps, g)
        self.grads = {f"{self.name}.gamma": gg, f"{self.name}.beta": gb}
        return gx


class ReLU:
    grads = {}

    def params(self):
        return {}

    def forward(self, x, stats=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


def _bilinear_matrix(n: int) -> np.ndarray:
    """``(2n, n)`` half-pixel-centred linear interpolation matrix with edge clamping."""
    A = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        f = src - lo
        A[i, lo] += 1.0 - f
        A[i, hi] += f
    return A


class Upsample2x:
    """Spatial x2 upsampling, ``nearest`` or ``bilinear`` (time axis untouched)."""

    grads = {}

    def __init__(self, mode="nearest"):
        if mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsampling mode {mode!r}")
        self.mode = mode

    def params(self):
        return {}

    def forward(self, x, stats=None):
        self._shape = x.shape
        if self.mode == "nearest":
            return x.repeat(2, axis=3).repeat(2, axis=4)
        self._A = _bilinear_matrix(x.shape[3]), _bilinear_matrix(x.shape[4])
        return np.einsum("ih,ncthw,jw->nctij", self._A[0], x, self._A[1], optimize=True)

    def backward(self, g):
        if self.mode == "nearest":
            N, C, T, H, W = self._shape
            return g.reshape(N, C, T, H, 2, W, 2).sum(axis=(4, 6))
        return np.einsum("ih,nctij,jw->ncthw", self._A[0], g, self._A[1], optimize=True)


class DynamicConv:
    """A 3x3x3 same-padded layer realised by one of the operator families."""

    def __init__(self, name, c_in, c_out, variant, rng, activation="one_plus_elu", modulation="compensated"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.name, self.variant = name, variant
        cfg = ConvConfig.same()
        if variant == "conv3d":
            self.op = Conv3d(name, KernelWeights.he_normal(c_out, c_in, rng=rng), cfg)
        elif variant == "d2conv3d":
            self.op = blocks.D2Block.create(c_in, c_out, cfg, rng=rng, activation=activation, modulation=modulation)
        else:
            self.op = blocks.DeformBlock.create(c_in, c_out, cfg, rng=rng, variant=variant, modulation=modulation)
        self.grads = {}
        self.maps = None

    def params(self):
        if isinstance(self.op, Conv3d):
            return self.op.params()
        return {f"{self.name}.{k}": v for k, v in self.op.params().items()}

    def forward(self, x, stats=None, capture=False):
        self._x = x
        if isinstance(self.op, Conv3d):
            return self.op.forward(x, stats)
        s = None
        if stats is not None:
            s = stats.setdefault(self.name, SamplingStats(self.name))
        if capture:
            self.maps = (blocks.d2block_maps(x, self.op) if isinstance(self.op, blocks.D2Block)
                         else blocks.deform_block_maps(x, self.op))
        return blocks.block_forward(x, self.op, s)

    def backward(self, g):
        if isinstance(self.op, Conv3d):
            gx = self.op.backward(g)
            self.grads = self.op.grads
            return gx
        r = blocks.block_backward(self._x, self.op, g)
        pred = self.op.predictor_names
        self.grads = {}
        for part, kw in (("main", r.main), (pred[0], r.f_d), (pred[1], r.f_m)):
            self.grads[f"{self.name}.{part}.weight"] = kw.weight
            self.grads[f"{self.name}.{part}.bias"] = kw.bias
        return r.x


@dataclass
class NetConfig:
    in_channels: int = 1
    widths: tuple = (8, 8, 16)
    variant: str = "d2conv3d"
    activation: str = "one_plus_elu"
    modulation: str = "compensated"
    gn_groups: int = 8
    upsample: str = "nearest"
    seed: int = 0
    decoder_blocks: int = 2

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class ToyNet:
    """Stem, two stride-(1,2,2) encoder stages, two upsample+block decoder stages, 1x1x1 head.

    Decoder stages add the encoder feature of matching resolution. With
    ``decoder_blocks=1`` only the second decoder stage uses the dynamic operator.
    """

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w0, w1, w2 = cfg.widths
        g = cfg.gn_groups
        same = ConvConfig.same()
        down = ConvConfig(stride=(1, 2, 2))

        def conv(name, ci, co, c, k=(3, 3, 3)):
            return Conv3d(name, KernelWeights.he_normal(co, ci, k, rng=rng), c)

        def dyn(name, ci, co, use_dynamic):
            variant = cfg.variant if use_dynamic else "conv3d"
            return DynamicConv(name, ci, co, variant, rng, cfg.activation, cfg.modulation)

        self.stem = [conv("stem", cfg.in_channels, w0, same), GroupNorm("stem_gn", w0, g), ReLU()]
        self.down1 = [conv("down1", w0, w1, down), GroupNorm("down1_gn", w1, g), ReLU()]
        self.down2 = [conv("down2", w1, w2, down), GroupNorm("down2_gn", w2, g), ReLU()]
        self.up1 = [Upsample2x(cfg.upsample), dyn("up1_block", w2, w1, cfg.decoder_blocks >= 2),
                    GroupNorm("up1_gn", w1, g), ReLU()]
        self.up2 = [Upsample2x(cfg.upsample), dyn("up2_block", w1, w0, cfg.decoder_blocks >= 1),
                    GroupNorm("up2_gn", w0, g), ReLU()]
        self.head = [conv("head", w0, 1, ConvConfig(kernel=(1, 1, 1), padding=(0, 0, 0)), (1, 1, 1))]
        self.stages = [self.stem, self.down1, self.down2, self.up1, self.up2, self.head]

    def layers(self):
        return [layer for stage in self.stages for layer in stage]

    def dynamic_layers(self):
        return [l for l in self.layers() if isinstance(l, DynamicConv)]

    def params(self) -> dict:
        out = {}
        for layer in self.layers():
            out.update({k: v for k, v in layer.params().items() if v is not None})
        return out

    @staticmethod
    def _run(stage, x, stats, capture):
        for layer in stage:
            if isinstance(layer, DynamicConv):
                x = layer.forward(x, stats, capture)
            else:
                x = layer.forward(x, stats)
        return x

    def forward(self, x, stats=None, capture=False):
        """Logits ``(N, 1, T, H, W)``; ``stats`` collects per-layer OOB counts if given."""
        if x.shape[3] % 4 or x.shape[4] % 4:
            raise ValueError(f"height and width must be multiples of 4, got {x.shape[3:]}")
        e0 = self._run(self.stem, x, stats, capture)
        e1 = self._run(self.down1, e0, stats, capture)
        e2 = self._run(self.down2, e1, stats, capture)
        d1 = self._run(self.up1, e2, stats, capture) + e1
        d2 = self._run(self.up2, d1, stats, capture) + e0
        return self._run(self.head, d2, stats, capture)

    @staticmethod
    def _back(stage, g):
        for layer in reversed(stage):
            g = layer.backward(g)
        return g

    def backward(self, g_logits) -> dict:
        """Back-propagate the logit gradient; returns gradients keyed like :meth:`params`."""
        g_d2 = self._back(self.head, g_logits)
        g_d1 = self._back(self.up2, g_d2)
        g_e2 = self._back(self.up1, g_d1)
        g_e1 = self._back(self.down2, g_e2) + g_d1
        g_e0 = self._back(self.down1, g_e1) + g_d2
        self._back(self.stem, g_e0)
        grads = {}
        for layer in self.layers():
            grads.update({k: v for k, v in layer.grads.items() if v is not None})
        return grads

    def save(self, directory, extra_meta=None) -> None:
        meta = {"kind": "toynet", "net": self.cfg.to_dict()}
        meta.update(extra_meta or {})
        blocks.save_arrays(directory, self.params(), meta)

    @classmethod
    def load(cls, directory) -> "ToyNet":
        arrays, meta = blocks.load_arrays(directory)
        if meta.get("kind") != "toynet":
            raise ValueError(f"{directory} is not a ToyNet checkpoint")
        net_meta = dict(meta["net"])
        net_meta["widths"] = tuple(net_meta["widths"])
        net = cls(NetConfig(**net_meta))
        params = net.params()
        if set(params) != set(arrays):
            raise ValueError("checkpoint arrays do not match the network layout")
        for name, arr in arrays.items():
            if params[name].shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {params[name].shape}")
            params[name][...] = arr
        return net

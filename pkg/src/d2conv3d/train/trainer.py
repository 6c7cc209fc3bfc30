"""Toy training loop, evaluation and sliding-clip inference."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import SyntheticClipSpec, make_dataset
from .inference import mean_frame_iou, split_into_clips, stitch_overlapping
from .losses import loss_and_grad
from .net import VARIANTS, NetConfig, ToyNet
from .optim import OptimState, adam_step, clip_gradients

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A configuration document is missing fields or has invalid values."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    variant: str = "d2conv3d"
    activation: str = "one_plus_elu"
    modulation: str = "compensated"
    widths: list = field(default_factory=lambda: [8, 8, 16])
    gn_groups: int = 8
    upsample: str = "nearest"
    decoder_blocks: int = 2
    frames: int = 8
    height: int = 32
    width: int = 32
    object_kind: str = "square"
    object_size: int = 6
    max_speed: float = 1.5
    noise: float = 0.1
    n_train: int = 256
    n_val: int = 16
    batch_size: int = 2
    epochs: int = 3
    max_steps: int = 500
    lr: float = 3e-3
    lr_decay: float = 0.1
    lr_decay_epoch: int = 2
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    max_grad_norm: float = 10.0
    loss: str = "lovasz"
    threshold: float = 0.5

    def net_config(self) -> NetConfig:
        return NetConfig(1, tuple(self.widths), self.variant, self.activation, self.modulation,
                         self.gn_groups, self.upsample, self.seed, self.decoder_blocks)

    def clip_spec(self) -> SyntheticClipSpec:
        return SyntheticClipSpec(self.frames, self.height, self.width, self.object_kind,
                                 self.object_size, noise=self.noise)

    def to_dict(self) -> dict:
        return asdict(self)


_CHOICES = {
    "variant": VARIANTS,
    "activation": ("none", "relu", "one_plus_relu", "one_plus_elu"),
    "modulation": ("compensated", "sigmoid", "disabled"),
    "upsample": ("nearest", "bilinear"),
    "object_kind": ("square", "disc"),
    "loss": ("lovasz", "bce", "lovasz+bce"),
}


def config_from_dict(doc: dict, cls=TrainConfig, required=()):
    """Build a config dataclass from a JSON object with field-level errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    missing = [name for name in required if name not in doc]
    if missing:
        raise ConfigError(f"missing required config field(s): {', '.join(missing)}")
    defaults = cls()
    values = {}
    for name, value in doc.items():
        expected = type(getattr(defaults, name))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if expected is type(None):
            values[name] = value
            continue
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"field '{name}' must be {expected.__name__}, got {type(value).__name__}")
        if name in _CHOICES and value not in _CHOICES[name]:
            raise ConfigError(f"field '{name}' must be one of {list(_CHOICES[name])}, got {value!r}")
        values[name] = value
    cfg = cls(**values)
    _validate_ranges(cfg)
    return cfg


def _validate_ranges(cfg) -> None:
    positive = ("batch_size", "frames", "height", "width", "object_size", "n_val", "max_grad_norm", "lr")
    for name in positive:
        if hasattr(cfg, name) and getattr(cfg, name) <= 0:
            raise ConfigError(f"field '{name}' must be positive")
    for name in ("epochs", "max_steps", "n_train"):
        if hasattr(cfg, name) and getattr(cfg, name) < 0:
            raise ConfigError(f"field '{name}' must be non-negative")
    if hasattr(cfg, "decoder_blocks") and not 0 <= cfg.decoder_blocks <= 2:
        raise ConfigError("field 'decoder_blocks' must be 0, 1 or 2")
    if hasattr(cfg, "widths") and (len(cfg.widths) != 3 or any(w % cfg.gn_groups for w in cfg.widths)):
        raise ConfigError(f"field 'widths' must be 3 channel counts divisible by gn_groups={cfg.gn_groups}")


def load_config(path, cls=TrainConfig, required=()):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(doc, cls, required)


@dataclass
class TrainResult:
    net: ToyNet
    steps: list
    epochs: list

    @property
    def final_iou(self) -> float:
        return self.epochs[-1]["mean_iou"] if self.epochs else float("nan")


def predict_probs(net: ToyNet, clips) -> np.ndarray:
    return expit(net.forward(clips))


def evaluate(net: ToyNet, X, Y, threshold=0.5, batch_size=4) -> float:
    preds = []
    for i in range(0, len(X), batch_size):
        preds.append(predict_probs(net, X[i : i + batch_size]) > threshold)
    return mean_frame_iou(np.concatenate(preds), Y)


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


STEP_COLUMNS = ["step", "epoch", "loss", "lr", "grad_norm"]
EPOCH_COLUMNS = ["epoch", "mean_iou"]
COMPARISON_COLUMNS = ["variant", "steps", "final_loss", "final_iou", "seconds"]


def train_toy(cfg: TrainConfig, out_dir: Optional[Path] = None) -> TrainResult:
    """Train a :class:`ToyNet` on synthetic clips with Adam, clipping and step decay.

    Writes ``train_log.csv``, ``epoch_log.csv`` and ``checkpoint/`` under
    ``out_dir`` when given. Runs are deterministic for a fixed config.
    """
    net = ToyNet(cfg.net_config())
    base = cfg.clip_spec()
    X, Y = make_dataset(cfg.n_train, cfg.seed + 1, base, cfg.max_speed)
    Xv, Yv = make_dataset(cfg.n_val, cfg.seed + 2, base, cfg.max_speed)
    params = net.params()
    state = OptimState(lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps)
    rng = np.random.default_rng(cfg.seed + 3)
    steps, epochs = [], []
    step = 0
    for epoch in range(cfg.epochs):
        if step >= cfg.max_steps or cfg.n_train == 0:
            break
        state.lr = cfg.lr * (cfg.lr_decay if epoch >= cfg.lr_decay_epoch else 1.0)
        order = rng.permutation(cfg.n_train)
        for i in range(0, cfg.n_train, cfg.batch_size):
            if step >= cfg.max_steps:
                break
            idx = order[i : i + cfg.batch_size]
            logits = net.forward(X[idx])
            loss, g = loss_and_grad(cfg.loss, logits, Y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at step {step} (epoch {epoch}, lr {state.lr:g})")
            grads, norm = clip_gradients(net.backward(g), cfg.max_grad_norm)
            adam_step(params, grads, state)
            steps.append({"step": step, "epoch": epoch, "loss": loss, "lr": state.lr, "grad_norm": norm})
            step += 1
        iou = evaluate(net, Xv, Yv, cfg.threshold)
        epochs.append({"epoch": epoch, "mean_iou": iou})
        log.info("epoch %d: %d steps, last loss %.4f, val IoU %.4f", epoch, step, steps[-1]["loss"], iou)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "train_log.csv", steps, STEP_COLUMNS)
        _write_csv(out_dir / "epoch_log.csv", epochs, EPOCH_COLUMNS)
        net.save(out_dir / "checkpoint", {"train": cfg.to_dict()})
    return TrainResult(net, steps, epochs)


def compare_variants(cfg: TrainConfig, variants, out_dir: Path) -> list[dict]:
    """Train one run per decoder variant under ``out_dir/<variant>`` and write ``comparison.csv``."""
    out_dir = Path(out_dir)
    rows = []
    for v in variants:
        run_cfg = TrainConfig(**{**cfg.to_dict(), "variant": v})
        t0 = time.perf_counter()
        res = train_toy(run_cfg, out_dir / v)
        rows.append({"variant": v, "steps": len(res.steps), "final_loss": res.steps[-1]["loss"] if res.steps else "",
                     "final_iou": res.final_iou, "seconds": time.perf_counter() - t0})
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "comparison.csv", rows, COMPARISON_COLUMNS)
    return rows


def infer_video(net: ToyNet, video: np.ndarray, clip_len: int = 8, overlap: int = 3, threshold: float = 0.5):
    """Sliding-clip inference over ``(1, C, L, H, W)``; returns ``(probs, mask, starts)``."""
    L = video.shape[2]
    starts = split_into_clips(L, clip_len, overlap)
    probs = [predict_probs(net, video[:, :, s : s + clip_len]) for s in starts]
    stitched = stitch_overlapping(probs, starts, L)
    return stitched, (stitched > threshold).astype(np.float64), starts

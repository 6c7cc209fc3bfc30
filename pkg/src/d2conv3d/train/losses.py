"""Segmentation losses on per-pixel logits.

Both losses treat the trailing two axes as a frame; everything in front is
flattened into a list of frames.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def _check(logits, labels):
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} differ in shape")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0 or 1)")


def _frames(a):
    return a.reshape(-1, a.shape[-2] * a.shape[-1]).astype(np.float64)


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Discrete derivative of the Jaccard loss along a sorted label vector."""
    p = gt_sorted.sum()
    intersection = p - np.cumsum(gt_sorted)
    union = p + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _lovasz_frames(logits, labels):
    z, y = _frames(logits), _frames(labels)
    losses = np.empty(len(z))
    grads = np.empty_like(z)
    for i, (zi, yi) in enumerate(zip(z, y)):
        signs = 2.0 * yi - 1.0
        errors = 1.0 - zi * signs
        order = np.argsort(-errors, kind="stable")
        g = lovasz_grad(yi[order])
        hinge = np.maximum(errors[order], 0.0)
        losses[i] = hinge @ g
        d = np.zeros_like(zi)
        d[order] = g * (errors[order] > 0)
        grads[i] = -signs * d
    return losses, grads


def lovasz_hinge_loss(logits, labels) -> float:
    """Mean over frames of the Lovász extension of the hinge-error Jaccard loss."""
    _check(logits, labels)
    losses, _ = _lovasz_frames(logits, labels)
    return float(losses.mean())


def lovasz_hinge_backward(logits, labels) -> np.ndarray:
    _check(logits, labels)
    losses, grads = _lovasz_frames(logits, labels)
    return (grads / len(losses)).reshape(logits.shape)


def bce_loss(logits, labels) -> float:
    """Mean sigmoid cross-entropy in the overflow-free ``max(z,0) - z*y + log1p(exp(-|z|))`` form."""
    _check(logits, labels)
    z = logits.astype(np.float64)
    return float(np.mean(np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))))


def bce_backward(logits, labels) -> np.ndarray:
    _check(logits, labels)
    return (expit(logits.astype(np.float64)) - labels) / logits.size


LOSSES = {
    "lovasz": (lovasz_hinge_loss, lovasz_hinge_backward),
    "bce": (bce_loss, bce_backward),
}


def loss_and_grad(name: str, logits, labels):
    """Loss value and gradient; ``"lovasz+bce"`` sums the two."""
    total, grad = 0.0, np.zeros(logits.shape)
    for part in name.split("+"):
        if part not in LOSSES:
            raise ValueError(f"unknown loss {part!r}")
        f, b = LOSSES[part]
        total += f(logits, labels)
        grad += b(logits, labels)
    return total, grad

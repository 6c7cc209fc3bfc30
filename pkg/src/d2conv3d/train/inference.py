"""Overlapping-clip inference and the region-similarity (IoU) metric."""

from __future__ import annotations

import numpy as np


def split_into_clips(video_len: int, clip_len: int, overlap: int) -> list[int]:
    """Clip start frames with step ``clip_len - overlap``; the last clip ends at the video end."""
    if clip_len < 1 or clip_len > video_len:
        raise ValueError(f"clip_len must be in [1, {video_len}], got {clip_len}")
    if not 0 <= overlap < clip_len:
        raise ValueError(f"overlap must be in [0, {clip_len}), got {overlap}")
    step = clip_len - overlap
    last = video_len - clip_len
    starts = list(range(0, last + 1, step))
    if starts[-1] != last:
        starts.append(last)
    return starts


def stitch_overlapping(clip_probs, starts, video_len: int) -> np.ndarray:
    """Per-frame mean over all clips covering that frame.

    ``clip_probs`` is a sequence of ``(N, C, clip_len, H, W)`` arrays.
    """
    if len(clip_probs) != len(starts) or not clip_probs:
        raise ValueError("need one probability map per clip start")
    first = clip_probs[0]
    N, C, L, H, W = first.shape
    acc = np.zeros((N, C, video_len, H, W))
    count = np.zeros(video_len)
    for probs, s in zip(clip_probs, starts):
        if probs.shape != first.shape:
            raise ValueError("clip outputs differ in shape")
        acc[:, :, s : s + L] += probs
        count[s : s + L] += 1
    assert np.all(count > 0), "uncovered frame"
    return acc / count[None, None, :, None, None]


def iou_metric(pred_mask, gt_mask) -> float:
    """|pred ∩ gt| / |pred ∪ gt|, defined as 1 when both masks are empty."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def mean_frame_iou(pred_masks, gt_masks) -> float:
    """IoU per (clip, frame) averaged; arrays are ``(N, 1, T, H, W)``."""
    p = np.asarray(pred_masks).reshape(-1, *pred_masks.shape[-2:])
    g = np.asarray(gt_masks).reshape(-1, *gt_masks.shape[-2:])
    return float(np.mean([iou_metric(a, b) for a, b in zip(p, g)]))

"""Thresholding and IoU from confusion counts."""

from __future__ import annotations

import numpy as np


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Strictly-greater-than threshold."""
    return np.asarray(prob) > threshold


def confusion_counts(pred, gt) -> np.ndarray:
    """``[tp, fp, fn, tn]`` for two boolean masks of equal shape."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    return np.array([tp, fp, fn, pred.size - tp - fp - fn], dtype=np.int64)


def iou_from_counts(counts) -> float:
    tp, fp, fn = int(counts[0]), int(counts[1]), int(counts[2])
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def iou(pred, gt) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    return iou_from_counts(confusion_counts(pred, gt))

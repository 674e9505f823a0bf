"""Hard-label evaluation metrics over per-class confusion counts.

Conventions: classes with an empty union (nothing to segment, nothing
predicted) score IoU 1; the same convention applies to per-class recall.
Balanced accuracy is the mean per-class recall, identical to mPA.
"""

from __future__ import annotations

import numpy as np


class ConfusionCounts:
    """Per-class TP/FP/FN/TN pixel counts; merge with ``+`` for sharded
    accumulation (associative)."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.tn = np.zeros(num_classes, dtype=np.int64)

    @property
    def total(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def __add__(self, other):
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion counts with different class counts")
        out = ConfusionCounts(self.num_classes)
        for f in ("tp", "fp", "fn", "tn"):
            setattr(out, f, getattr(self, f) + getattr(other, f))
        return out


def confusion(pred_labels, target_labels, num_classes) -> ConfusionCounts:
    pred = np.asarray(pred_labels)
    target = np.asarray(target_labels)
    if pred.shape != target.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {target.shape}")
    for name, arr in (("pred", pred), ("target", target)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels out of range [0, {num_classes})")
    joint = np.bincount(
        (target.astype(np.int64) * num_classes + pred.astype(np.int64)).ravel(),
        minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    cc = ConfusionCounts(num_classes)
    total = int(joint.sum())
    diag = np.diag(joint)
    cc.tp = diag.astype(np.int64)
    cc.fp = joint.sum(axis=0) - diag
    cc.fn = joint.sum(axis=1) - diag
    cc.tn = total - cc.tp - cc.fp - cc.fn
    return cc


def _safe_div(num, den):
    return np.where(den > 0, num / np.maximum(den, 1), 1.0)


def iou(cc: ConfusionCounts, cls: int) -> float:
    den = cc.tp[cls] + cc.fp[cls] + cc.fn[cls]
    return float(cc.tp[cls] / den) if den > 0 else 1.0


def miou(cc: ConfusionCounts) -> float:
    return float(_safe_div(cc.tp, cc.tp + cc.fp + cc.fn).mean())


def pixel_accuracy(cc: ConfusionCounts) -> float:
    return float(cc.tp.sum() / cc.total)


def mean_pixel_accuracy(cc: ConfusionCounts) -> float:
    return float(_safe_div(cc.tp, cc.tp + cc.fn).mean())


def balanced_accuracy(cc: ConfusionCounts) -> float:
    return mean_pixel_accuracy(cc)

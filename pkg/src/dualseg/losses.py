"""Training objective: focal + asymmetric-overlap (Tversky) loss per head,
heads summed.

Losses consume soft probabilities and stay differentiable end to end;
hard-label evaluation lives in ``dualseg.metrics``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossParams:
    gamma: float = 2.0
    alpha_t: float = 0.25
    tversky_alpha: float = 0.7
    tversky_beta: float = 0.3
    smooth: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.smooth <= 0:
            raise ValueError("smooth epsilon must be > 0")


#: Published training settings: false-negative-heavy overlap weighting for
#: the drivable head, stronger still for the thin-structure lane head.
DRIVABLE_LOSS = LossParams(tversky_alpha=0.7, tversky_beta=0.3)
LANE_LOSS = LossParams(tversky_alpha=0.9, tversky_beta=0.1)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> Tensor:
    """(N, H, W) integer labels -> (N, C, H, W) one-hot constant tensor."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes}): found {labels.max()}")
    n, h, w = labels.shape
    oh = np.zeros((n, num_classes, h, w), dtype=dtype)
    np.put_along_axis(oh, labels[:, None].astype(np.int64), 1.0, axis=1)
    return Tensor(oh)


def _check_onehot(target: Tensor, like: Tensor, op: str):
    if target.shape != like.shape:
        raise ShapeError(f"{op}: target shape {target.shape} != prediction shape {like.shape}")
    t = target.data
    if not (((t == 0.0) | (t == 1.0)).all() and np.array_equal(
            t.sum(axis=1), np.ones_like(t.sum(axis=1)))):
        raise ValueError(f"{op}: target is not one-hot")


def focal_loss(logits: Tensor, target_onehot: Tensor, params: LossParams) -> Tensor:
    """Mean over pixels of -p(c) * (1 - p_hat(c))^gamma * log(p_hat(c)),
    summed over classes and scaled by alpha_t; p_hat via channel softmax."""
    _check_onehot(target_onehot, logits, "focal_loss")
    n_pix = logits.shape[0] * logits.shape[2] * logits.shape[3]
    p_hat = T.clip(T.softmax_channel(logits), PROB_EPS, 1.0 - PROB_EPS)
    focus = T.pow_scalar(T.add_scalar(T.scale(p_hat, -1.0), 1.0), params.gamma)
    per_elem = T.mul(target_onehot, T.mul(focus, T.log(p_hat)))
    return T.scale(T.sum_all(per_elem), -params.alpha_t / n_pix)


def tversky_loss(probs: Tensor, target_onehot: Tensor, params: LossParams) -> Tensor:
    """Sum over classes of 1 - (TP + eps) / (TP + alpha*FN + beta*FP + eps)
    with soft counts TP = sum(p_hat*p), FN = sum((1-p_hat)*p), FP = sum(p_hat*(1-p))."""
    if probs.data.min() < 0.0 or probs.data.max() > 1.0:
        raise ValueError(
            f"tversky_loss: probabilities outside [0, 1]: range "
            f"[{probs.data.min():.4g}, {probs.data.max():.4g}]")
    _check_onehot(target_onehot, probs, "tversky_loss")
    c = probs.shape[1]
    flat = T.reshape(T.permute(probs, (1, 0, 2, 3)), (c, -1))
    tflat = T.reshape(T.permute(target_onehot, (1, 0, 2, 3)), (c, -1))
    tp = T.sum_axis(T.mul(flat, tflat), 1)
    fn = T.sum_axis(T.mul(T.add_scalar(T.scale(flat, -1.0), 1.0), tflat), 1)
    fp = T.sum_axis(T.mul(flat, T.add_scalar(T.scale(tflat, -1.0), 1.0)), 1)
    num = T.add_scalar(tp, params.smooth)
    den = T.add_scalar(T.add(tp, T.add(T.scale(fn, params.tversky_alpha),
                                       T.scale(fp, params.tversky_beta))), params.smooth)
    per_class = T.add_scalar(T.scale(T.div(num, den), -1.0), 1.0)
    return T.sum_all(per_class)


def head_loss(logits: Tensor, target_onehot: Tensor, params: LossParams) -> Tensor:
    focal = focal_loss(logits, target_onehot, params)
    tversky = tversky_loss(T.softmax_channel(logits), target_onehot, params)
    return T.add(focal, tversky)


def total_loss(outputs, targets, params_per_head) -> Tensor:
    """Summed per-head (focal + tversky); one (logits, target, params) per head."""
    if not (len(outputs) == len(targets) == len(params_per_head)):
        raise ValueError(
            f"head count mismatch: {len(outputs)} outputs, {len(targets)} targets, "
            f"{len(params_per_head)} param sets")
    total = None
    for logits, target, params in zip(outputs, targets, params_per_head):
        part = head_loss(logits, target, params)
        total = part if total is None else T.add(total, part)
    return total

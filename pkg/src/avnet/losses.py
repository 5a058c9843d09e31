"""Dice, focal, and compound losses over per-pixel class probabilities.

All three take an NxLxHxW probability map and a one-hot target of the same
shape and return a differentiable rank-0 tensor:

* dice loss:  mean over classes of ``1 - (2*sum(p*g) + s) / (sum(p^2) + sum(g^2) + s)``
  with sums running over every pixel of the batch.
* focal loss: ``-sum(alpha * (1-p)^gamma * g * ln(p) + (1-alpha) * p^gamma * (1-g) * ln(1-p))``,
  a raw sum over all pixels and classes (no normalization), with ``p``
  clamped away from 0 and 1 before the logs.
* compound loss: their sum.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import (
    ShapeError,
    Tensor,
    clamp,
    log,
    mul,
    pow_scalar,
    slice_channels,
    sum_all,
)


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    dice_smooth: float = 1e-6
    prob_clamp: float = 1e-7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.dice_smooth <= 0.0:
            raise ValueError(f"dice_smooth must be positive, got {self.dice_smooth}")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ValueError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")


def _check_pair(pred: Tensor, target: Tensor, op: str, one_hot: bool) -> None:
    if pred.data.ndim != 4 or target.data.ndim != 4:
        raise ShapeError(f"{op} expects NxLxHxW tensors")
    if pred.shape != target.shape:
        raise ShapeError(f"{op}: pred shape {list(pred.shape)} != target shape {list(target.shape)}")
    # a single channel is a binary mask, where per-pixel sums of 0 are valid
    if one_hot and target.shape[1] > 1:
        sums = target.data.sum(axis=1)
        if abs(float(sums.max()) - 1.0) > 1e-6 or abs(float(sums.min()) - 1.0) > 1e-6:
            raise ValueError(f"{op}: target is not one-hot (per-pixel class sums not 1)")


def dice_loss(pred: Tensor, target: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Smoothed dice loss averaged over the class channels."""
    cfg = cfg or LossConfig()
    _check_pair(pred, target, "dice_loss", one_hot=True)
    s = cfg.dice_smooth
    n_classes = pred.shape[1]
    total = None
    for l in range(n_classes):
        p = slice_channels(pred, l, l + 1)
        g = slice_channels(target, l, l + 1)
        num = sum_all(mul(p, g)) * 2.0 + s
        den = sum_all(mul(p, p)) + sum_all(mul(g, g)) + s
        term = 1.0 - mul(num, pow_scalar(den, -1.0))
        total = term if total is None else total + term
    return total * (1.0 / n_classes)


def focal_loss(pred: Tensor, target: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Focal loss as a raw sum over every pixel and class of the batch."""
    cfg = cfg or LossConfig()
    _check_pair(pred, target, "focal_loss", one_hot=False)
    alpha, gamma, c = cfg.alpha, cfg.gamma, cfg.prob_clamp
    p = clamp(pred, c, 1.0 - c)
    one_minus_p = 1.0 - p
    inv_target = Tensor(1.0 - target.data, dtype=target.dtype)
    pos = mul(mul(pow_scalar(one_minus_p, gamma), target), log(p)) * alpha
    neg = mul(mul(pow_scalar(p, gamma), inv_target), log(one_minus_p)) * (1.0 - alpha)
    return sum_all(pos + neg) * -1.0


def compound_loss(pred: Tensor, target: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Sum of dice and focal losses; its gradient is the sum of theirs."""
    cfg = cfg or LossConfig()
    return dice_loss(pred, target, cfg) + focal_loss(pred, target, cfg)

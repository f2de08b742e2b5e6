"""Cooperative supervision loss: binary cross-entropy plus soft IoU.

Predictions are probability maps in [0, 1] against strictly binary
targets.  BCE is mean-reduced (divided by the pixel count) so its scale is
resolution-independent; the soft IoU term is 1 - intersection/union with a
floored denominator.  The combined loss sums both terms over every
supervised head with equal weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, clamp, log, mul, sigmoid, tsum

CLAMP_EPS = 1e-7
_UNION_FLOOR = 1e-12


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} != target shape {target.shape}"
        )
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("target mask must be strictly binary (0/1)")


@dataclass
class SaliencyPair:
    """A prediction map in [0, 1] and a binary ground-truth mask, same shape."""

    pred: Tensor
    target: Tensor

    def __post_init__(self):
        _check_pair(self.pred, self.target)


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to [eps, 1-eps]."""
    _check_pair(pred, target)
    p = clamp(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    g = target
    loss_map = -(mul(g, log(p)) + mul(1.0 - g, log(1.0 - p)))
    return tsum(loss_map) * (1.0 / pred.size)


def iou_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Soft IoU loss 1 - sum(PG)/sum(P + G - PG), in [0, 1].

    The union is floored at 1e-12, which only engages when both maps are
    (numerically) empty; elsewhere the ratio is exact, so identical binary
    maps score exactly 0.
    """
    _check_pair(pred, target)
    inter = tsum(mul(pred, target))
    union = tsum(pred + target - mul(pred, target))
    return 1.0 - inter / clamp(union, lo=_UNION_FLOOR)


def cpr_loss(heads, target: Tensor) -> Tensor:
    """Sum of (BCE + IoU) over supervised heads, equal weights.

    ``heads`` is a prediction set (anything with ``side_logits``) or a
    list of raw head logit maps at the target's resolution; the sigmoid
    lives here so callers hand over logits.
    """
    head_logits = getattr(heads, "side_logits", heads)
    if not head_logits:
        raise ValueError("cpr_loss needs at least one supervised head")
    total = None
    for logits in head_logits:
        p = sigmoid(logits)
        term = bce_loss(p, target) + iou_loss(p, target)
        total = term if total is None else total + term
    return total

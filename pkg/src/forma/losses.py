"""DICE + focal training loss on probability maps."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .config import LossConfig
from .tensor import Tensor

DICE_SMOOTH = 1.0
PROB_EPS = 1e-7


def _gt(gt, like: Tensor) -> Tensor:
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    return Tensor(g.astype(like.dtype), dtype=like.dtype)


def dice_loss(prob: Tensor, gt, smooth: float = DICE_SMOOTH) -> Tensor:
    """``1 - (2*sum(p*g) + s) / (sum(p) + sum(g) + s)`` per image, averaged over the batch.

    ``prob`` is ``[H, W]`` or ``[B, H, W]``.
    """
    g = _gt(gt, prob)
    axes = (-2, -1)
    inter = F.sum(F.mul(prob, g), axis=axes)
    denom = F.add(F.sum(prob, axis=axes), g.data.sum(axis=axes) + smooth)
    ratio = F.div(F.add(F.mul(inter, 2.0), smooth), denom)
    return F.mean(F.sub(1.0, ratio))


def focal_loss(prob: Tensor, gt, gamma: float = 2.0, alpha: float = 0.5) -> Tensor:
    """Mean over pixels of ``-alpha_t * (1 - p_t)^gamma * log(p_t)``.

    ``p_t`` is ``prob`` on positives and ``1 - prob`` on negatives; ``alpha_t``
    is ``alpha`` on positives and ``1 - alpha`` on negatives.
    """
    g = _gt(gt, prob).data
    p = F.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    p_t = F.add(F.mul(p, 2.0 * g - 1.0), 1.0 - g)
    alpha_t = alpha * g + (1.0 - alpha) * (1.0 - g)
    term = F.mul(F.log(p_t), -alpha_t)
    if gamma:
        term = F.mul(term, F.exp(F.mul(F.log(F.sub(1.0, p_t)), gamma)))
    return F.mean(term)


def combined_loss(prob: Tensor, gt, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    parts = []
    if cfg.w_dice:
        parts.append(F.mul(dice_loss(prob, gt), cfg.w_dice))
    if cfg.w_focal:
        parts.append(F.mul(focal_loss(prob, gt, cfg.gamma, cfg.alpha), cfg.w_focal))
    if not parts:
        return F.mul(F.sum(prob), 0.0)
    total = parts[0]
    for p in parts[1:]:
        total = F.add(total, p)
    return total

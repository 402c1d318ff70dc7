"""Shuffle-based decoder: per-scale expansion, pixel shuffle, fusion with the
noise feature, a 2-class head, and the full-resolution probability map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import ModelConfig
from .errors import DimensionError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class LogitMap:
    logits: Tensor  # [B, H/4, W/4, 2]
    prob: Tensor    # [B, H, W], probability of the tampered class


def expand_scale(f: Tensor, layer: Linear) -> Tensor:
    """Positionwise ``Linear(C_i, C * r_i^2)`` applied to one encoder level."""
    return layer(f)


def predict_mask(prob, tau: float = 0.5) -> np.ndarray:
    """Binary mask ``prob >= tau`` (a tie counts as tampered)."""
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    return p >= tau


class ShuffleDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.embed_dim
        self.shuffle = cfg.variant != "no_shuffle"
        widths = [c * r * r if self.shuffle else c for r in cfg.ratios]
        self.expand = [Linear(ci, wi, rng) for ci, wi in zip(cfg.stage_channels, widths)]
        self.noise_channels = cfg.decoder_noise_channels
        self.fuse = Linear(4 * c + self.noise_channels, c, rng)
        self.head = Linear(c, 2, rng)

    def forward(self, levels: list[Tensor], f_mod: Tensor | None = None) -> LogitMap:
        target = None
        upsampled = []
        for f, layer, r in zip(levels, self.expand, self.cfg.ratios):
            x = expand_scale(f, layer)
            if self.shuffle:
                x = F.pixel_shuffle(x, r)
            elif r != 1:
                b, h, w, ch = x.shape
                x = F.transpose(F.bilinear_resize(F.transpose(x, (0, 3, 1, 2)), h * r, w * r), (0, 2, 3, 1))
            if target is None:
                target = x.shape[1:3]
            elif x.shape[1:3] != target:
                raise DimensionError(f"scale landed at {x.shape[1:3]}, expected {target}")
            upsampled.append(x)
        if self.noise_channels:
            if f_mod is None:
                raise DimensionError("decoder expects the fused noise feature F_mod")
            if f_mod.shape[1:3] != target:
                raise DimensionError(f"F_mod spatial size {f_mod.shape[1:3]} != decoder size {target}")
            upsampled.append(f_mod)
        fused = self.fuse(F.concat(upsampled, axis=-1))
        logits = self.head(fused)
        h4, w4 = target
        up = F.bilinear_resize(F.transpose(logits, (3, 0, 1, 2)), 4 * h4, 4 * w4)  # [2, B, H, W]
        prob = F.index(F.softmax(up, axis=0), 1)
        return LogitMap(logits, prob)

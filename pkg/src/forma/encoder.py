"""Hierarchical VSS backbone producing four feature maps at 1/4 .. 1/32 resolution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .config import ModelConfig
from .errors import DimensionError
from .nn import Conv2d, DWConv, LayerNorm, Linear, Module
from .ss2d import SS2D
from .tensor import Tensor


@dataclass
class FeaturePyramid:
    levels: list[Tensor]  # channel-last [B, H/2^(i+2), W/2^(i+2), C_i]
    noise: Tensor | None = None

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def __len__(self) -> int:
        return len(self.levels)


def _to_nchw(x: Tensor) -> Tensor:
    return F.transpose(x, (0, 3, 1, 2))


def _to_nhwc(x: Tensor) -> Tensor:
    return F.transpose(x, (0, 2, 3, 1))


def batched(image: Tensor) -> Tensor:
    if image.ndim == 3:
        return F.reshape(image, (1,) + image.shape)
    if image.ndim != 4:
        raise DimensionError(f"expected [3,H,W] or [B,3,H,W] image, got {image.shape}")
    return image


def check_input_size(h: int, w: int, multiple: int = 32) -> None:
    if h % multiple or w % multiple:
        raise DimensionError(
            f"input size {h}x{w} is not divisible by {multiple}; resize the image first "
            f"(e.g. to {max(multiple, round(h / multiple) * multiple)}x{max(multiple, round(w / multiple) * multiple)})"
        )


class PatchEmbed(Module):
    """4x4 stride-4 convolution followed by layer norm; returns channel-last."""

    def __init__(self, in_ch: int, dim: int, patch: int, rng: np.random.Generator):
        self.proj = Conv2d(in_ch, dim, patch, rng, stride=patch)
        self.norm = LayerNorm(dim)
        self.patch = patch

    def forward(self, image: Tensor) -> Tensor:
        x = batched(image)
        check_input_size(*x.shape[-2:])
        return self.norm(_to_nhwc(self.proj(x)))


class VSSBlock(Module):
    """Pre-norm residual block: ``x + out(LN(ss2d(silu(dw(in(LN x))))) * silu(gate(LN x)))``."""

    def __init__(self, dim: int, d_inner: int, d_state: int, dt_rank: int, kernel: int,
                 rng: np.random.Generator, chunk: int = 32):
        self.norm = LayerNorm(dim)
        self.proj_in = Linear(dim, d_inner, rng)
        self.proj_gate = Linear(dim, d_inner, rng)
        self.dwconv = DWConv(d_inner, kernel, rng)
        self.ss2d = SS2D(d_inner, d_state, dt_rank, rng, chunk)
        self.out_norm = LayerNorm(d_inner)
        self.proj_out = Linear(d_inner, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        z = self.norm(x)
        a = self.proj_in(z)
        a = F.silu(_to_nhwc(self.dwconv(_to_nchw(a))))
        a = self.out_norm(self.ss2d(a))
        gate = F.silu(self.proj_gate(z))
        return F.add(x, self.proj_out(F.mul(a, gate)))


class Downsample(Module):
    """2x2 stride-2 convolution doubling the channels, then layer norm."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = Conv2d(dim, 2 * dim, 2, rng, stride=2)
        self.norm = LayerNorm(2 * dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(_to_nhwc(self.proj(_to_nchw(x))))


class VSSEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = cfg.stage_channels
        self.stem = PatchEmbed(3, cfg.embed_dim, cfg.patch, rng)
        self.noise_proj = (Linear(cfg.embed_dim + cfg.c_mod, cfg.embed_dim, rng)
                           if cfg.variant == "noise_into_encoder" else None)
        self.stages = [
            [VSSBlock(c, cfg.d_inner(i), cfg.d_state, cfg.dt_rank(i), cfg.dw_kernel, rng, cfg.scan_chunk)
             for _ in range(depth)]
            for i, (c, depth) in enumerate(zip(chans, cfg.depths))
        ]
        self.downsamples = [Downsample(c, rng) for c in chans[:-1]]

    @property
    def num_blocks(self) -> int:
        return sum(len(s) for s in self.stages)

    def forward(self, image: Tensor, f_mod: Tensor | None = None) -> FeaturePyramid:
        x = self.stem(image)
        if self.noise_proj is not None:
            if f_mod is None:
                raise DimensionError("noise_into_encoder variant needs the fused noise map")
            x = self.noise_proj(F.concat([x, f_mod], axis=-1))
        levels = []
        for i, stage in enumerate(self.stages):
            for block in stage:
                x = block(x)
            levels.append(x)
            if i < len(self.downsamples):
                x = self.downsamples[i](x)
        return FeaturePyramid(levels)


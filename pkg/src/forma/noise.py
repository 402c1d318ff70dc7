"""Forensic noise stream: fixed SRM filters, constrained Bayar convolution,
a learned residual stream (or an injected noise map), fused to quarter resolution."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import functional as F
from .config import ModelConfig
from .errors import DataError, DimensionError
from .nn import Conv2d, LayerNorm, Module, Parameter, trunc_normal
from .tensor import Tensor, get_dtype

# 3x3 KB, 5x5 KV (SQUARE) and a horizontal second difference, each zero-sum
SRM_KERNELS = np.array([
    [[0, 0, 0, 0, 0],
     [0, -1, 2, -1, 0],
     [0, 2, -4, 2, 0],
     [0, -1, 2, -1, 0],
     [0, 0, 0, 0, 0]],
    [[-1, 2, -2, 2, -1],
     [2, -6, 8, -6, 2],
     [-2, 8, -12, 8, -2],
     [2, -6, 8, -6, 2],
     [-1, 2, -2, 2, -1]],
    [[0, 0, 0, 0, 0],
     [0, 0, 0, 0, 0],
     [0, 1, -2, 1, 0],
     [0, 0, 0, 0, 0],
     [0, 0, 0, 0, 0]],
], dtype=np.float64)
SRM_NORMALIZERS = np.array([1 / 4, 1 / 12, 1 / 2])

NMAP_MAGIC = b"NMAP"


def srm_weight(dtype=None) -> np.ndarray:
    """Kernels ``[9, 3, 5, 5]``: output ``3*c + k`` is kernel ``k`` on RGB channel ``c``."""
    w = np.zeros((9, 3, 5, 5), dtype=dtype or get_dtype())
    for c in range(3):
        for k in range(3):
            w[3 * c + k, c] = SRM_KERNELS[k] * SRM_NORMALIZERS[k]
    return w


class SrmBank(Module):
    """Frozen high-pass bank; holds no :class:`Parameter`, so the optimizer never sees it."""

    def __init__(self):
        self.weight = Tensor(srm_weight(), requires_grad=False)

    def forward(self, image: Tensor) -> Tensor:
        return F.conv2d(image, self.weight, None, stride=1, padding=2)


def srm_apply(image: Tensor) -> Tensor:
    return SrmBank()(image)


def bayar_project(weights: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Project ``[..., k, k]`` kernels onto {centre = -1, off-centre sum = 1}.

    A kernel whose off-centre entries sum to zero is re-drawn uniformly before
    normalizing, since it has no direction to rescale.
    """
    w = np.array(weights, dtype=np.asarray(weights).dtype, copy=True)
    kh, kw = w.shape[-2:]
    ch, cw = kh // 2, kw // 2
    mask = np.ones((kh, kw), dtype=bool)
    mask[ch, cw] = False
    w[..., ch, cw] = 0.0
    total = w.sum(axis=(-2, -1), keepdims=True)
    degenerate = np.abs(total[..., 0, 0]) < 1e-12
    if degenerate.any():
        rng = rng or np.random.default_rng(0)
        fresh = rng.uniform(0.0, 1.0, size=w[degenerate].shape) * mask
        w[degenerate] = fresh
        total = w.sum(axis=(-2, -1), keepdims=True)
    # kernels already summing to one are left bit-identical (projection is idempotent)
    w = np.where(np.abs(total - 1.0) <= 1e-12, w, w / total)
    w[..., ch, cw] = -1.0
    return w


class BayarConv(Module):
    def __init__(self, in_ch: int, n_kernels: int, rng: np.random.Generator, size: int = 5):
        self.weight = Parameter(bayar_project(trunc_normal(rng, (n_kernels, in_ch, size, size)), rng))
        self.bias = None
        self._rng = rng

    def project(self) -> None:
        self.weight.data = bayar_project(self.weight.data, self._rng).astype(self.weight.dtype)

    def forward(self, image: Tensor) -> Tensor:
        pad = self.weight.shape[-1] // 2
        return F.conv2d(image, self.weight, None, stride=1, padding=pad)


class ResidualStream(Module):
    """Three 3x3 convolutions (3 -> C_r -> C_r -> C_r) with SiLU in between."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(3, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv3 = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, image: Tensor) -> Tensor:
        x = F.silu(self.conv1(image))
        x = F.silu(self.conv2(x))
        return self.conv3(x)


class NoiseFusion(Module):
    """Concat -> two stride-2 3x3 convs with SiLU -> layer norm; output channel-last at H/4."""

    def __init__(self, in_ch: int, c_mod: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, c_mod, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(c_mod, c_mod, 3, rng, stride=2, padding=1)
        self.norm = LayerNorm(c_mod)

    def forward(self, srm: Tensor, bayar: Tensor, resid: Tensor) -> Tensor:
        shapes = [t.shape[-2:] for t in (srm, bayar, resid)]
        if len(set(shapes)) != 1:
            raise DimensionError(f"noise_fuse: spatial sizes differ {shapes}")
        x = F.concat([srm, bayar, resid], axis=-3)
        x = F.silu(self.conv1(x))
        x = F.silu(self.conv2(x))
        if x.ndim == 3:
            x = F.transpose(x, (1, 2, 0))
        else:
            x = F.transpose(x, (0, 2, 3, 1))
        return self.norm(x)


class NoiseExtractor(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.srm = SrmBank()
        self.bayar = BayarConv(3, cfg.bayar_kernels, rng)
        self.residual = ResidualStream(cfg.resid_channels, rng)
        self.fusion = NoiseFusion(9 + cfg.bayar_kernels + cfg.resid_channels, cfg.c_mod, rng)
        self.resid_channels = cfg.resid_channels

    def forward(self, image: Tensor, noise_map: Tensor | np.ndarray | None = None) -> Tensor:
        """``F_mod`` of shape ``[B, H/4, W/4, C_mod]``.

        ``noise_map`` (``[C_r, H, W]`` or ``[B, C_r, H, W]``) replaces the learned
        residual stream when given.
        """
        srm = self.srm(image)
        bayar = self.bayar(image)
        if noise_map is None:
            resid = self.residual(image)
        else:
            resid = noise_map if isinstance(noise_map, Tensor) else Tensor(noise_map)
            want = (self.resid_channels,) + tuple(image.shape[-2:])
            if tuple(resid.shape[-3:]) != want:
                raise DimensionError(f"noise map shape {resid.shape} does not match expected {want}")
            if resid.ndim == 3 and image.ndim == 4:
                resid = Tensor(np.broadcast_to(resid.data, (image.shape[0],) + resid.shape).copy())
        return self.fusion(srm, bayar, resid)


# -- noise-map injection files ----------------------------------------------------

def save_noise_map(path: str | Path, arr: np.ndarray) -> None:
    """``NMAP`` magic, little-endian u32 C, H, W, then float32 values row-major."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise DimensionError(f"noise map must be [C,H,W], got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(NMAP_MAGIC + struct.pack("<3I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_noise_map(path: str | Path, expect: tuple[int, int, int] | None = None) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read noise map {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != NMAP_MAGIC:
        raise DataError(f"{path}: not a noise map (bad magic)")
    c, h, w = struct.unpack("<3I", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * c * h * w:
        raise DataError(f"{path}: header says {c}x{h}x{w} but payload has {len(body)} bytes")
    arr = np.frombuffer(body, dtype="<f4").reshape(c, h, w).copy()
    if expect is not None and tuple(expect) != (c, h, w):
        raise DimensionError(f"{path}: noise map shape {(c, h, w)} does not match expected {tuple(expect)}")
    return arr

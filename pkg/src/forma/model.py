"""The assembled network."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .decoder import LogitMap, ShuffleDecoder
from .encoder import FeaturePyramid, VSSEncoder, batched
from .nn import Module
from .noise import NoiseExtractor
from .tensor import Tensor


class ForMa(Module):
    """VSS encoder + noise extractor + shuffle decoder.

    Depending on ``cfg.variant`` the noise feature goes to the decoder (``full``,
    ``no_shuffle``), to the encoder stem (``noise_into_encoder``) or nowhere
    (``no_noise``).
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = VSSEncoder(cfg, rng)
        self.noise = NoiseExtractor(cfg, rng) if cfg.uses_noise else None
        self.decoder = ShuffleDecoder(cfg, rng)

    @property
    def dtype(self):
        return self.encoder.stem.proj.weight.data.dtype

    def features(self, image: Tensor, noise_map=None) -> FeaturePyramid:
        image = batched(image)
        f_mod = self.noise(image, noise_map) if self.noise is not None else None
        if self.cfg.variant == "noise_into_encoder":
            pyr = self.encoder(image, f_mod)
        else:
            pyr = self.encoder(image)
        pyr.noise = f_mod
        return pyr

    def forward(self, image: Tensor, noise_map=None) -> LogitMap:
        pyr = self.features(image, noise_map)
        f_mod = pyr.noise if self.cfg.decoder_noise_channels else None
        return self.decoder(pyr.levels, f_mod)

    def project_constraints(self) -> None:
        """Re-impose the Bayar constraint; call after every optimizer step."""
        if self.noise is not None:
            self.noise.bayar.project()

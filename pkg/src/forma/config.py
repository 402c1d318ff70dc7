"""Architecture and run configuration at paper scale and toy scale."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

MODEL_VARIANTS = ("full", "no_noise", "no_shuffle", "noise_into_encoder")
LOSS_VARIANTS = ("no_dice", "no_focal")
VARIANTS = MODEL_VARIANTS + LOSS_VARIANTS


@dataclass
class ModelConfig:
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 9, 2)
    d_state: int = 16
    expand: int = 2
    dt_divisor: int = 4
    dw_kernel: int = 3
    patch: int = 4
    ratios: tuple[int, ...] = (1, 2, 4, 8)
    bayar_kernels: int = 3
    resid_channels: int = 16
    c_mod: int = 96
    variant: str = "full"
    image_size: int = 512
    scan_chunk: int = 32

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.ratios = tuple(self.ratios)
        if self.variant not in MODEL_VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {MODEL_VARIANTS}")
        if len(self.depths) != 4 or len(self.ratios) != 4:
            raise ValueError("exactly four stages are required")
        for i, r in enumerate(self.ratios):
            if r != 2 ** i:
                raise ValueError(f"ratio r_{i + 1}={r} does not bring stage {i + 1} to quarter resolution")

    @classmethod
    def paper(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(embed_dim=16, depths=(1, 1, 2, 1), d_state=4, resid_channels=8, c_mod=16,
                    image_size=64)
        base.update(overrides)
        return cls(**base)

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.embed_dim * 2 ** i for i in range(4))

    def d_inner(self, stage: int) -> int:
        return self.expand * self.stage_channels[stage]

    def dt_rank(self, stage: int) -> int:
        return max(1, math.ceil(self.stage_channels[stage] / self.dt_divisor))

    @property
    def uses_noise(self) -> bool:
        return self.variant != "no_noise"

    @property
    def decoder_noise_channels(self) -> int:
        return self.c_mod if self.variant in ("full", "no_shuffle") else 0

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LossConfig:
    gamma: float = 2.0
    alpha: float = 0.5
    w_dice: float = 1.0
    w_focal: float = 1.0

    def __post_init__(self):
        if self.w_dice < 0 or self.w_focal < 0 or self.gamma < 0:
            raise ValueError("loss weights and focal gamma must be non-negative")

    @classmethod
    def for_variant(cls, variant: str) -> "LossConfig":
        if variant == "no_dice":
            return cls(w_dice=0.0)
        if variant == "no_focal":
            return cls(w_focal=0.0)
        return cls()


@dataclass
class RunConfig:
    """Everything a CLI command needs; JSON files mirror these fields."""

    scale: str = "toy"
    variant: str = "full"
    seed: int = 0
    batch_size: int | None = None
    epochs: int = 50
    steps_per_epoch: int = 10
    lr: float | None = None
    weight_decay: float = 0.01
    patience: int = 3
    lr_factor: float = 0.1
    threads: int = 1
    tau: float = 0.5
    train_samples: int = 16
    augment: bool = False
    out: str = "runs/out"
    checkpoint: str | None = None
    precision: str = "fast"
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale not in ("paper", "toy"):
            raise ValueError(f"scale must be 'paper' or 'toy', got {self.scale!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def model_variant(self) -> str:
        return self.variant if self.variant in MODEL_VARIANTS else "full"

    def model_config(self) -> ModelConfig:
        ctor = ModelConfig.paper if self.scale == "paper" else ModelConfig.toy
        return ctor(variant=self.model_variant, **self.model_overrides)

    def loss_config(self) -> LossConfig:
        return LossConfig.for_variant(self.variant)

    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        # paper schedule starts at 1e-4; toy runs from scratch need a larger step
        return 1e-4 if self.scale == "paper" else 5e-3

    def effective_batch_size(self, n_samples: int | None = None) -> int:
        """Paper runs use 8; toy runs default to full-batch over the sample set."""
        if self.batch_size is not None:
            return self.batch_size
        return 8 if self.scale == "paper" else (n_samples or self.train_samples)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

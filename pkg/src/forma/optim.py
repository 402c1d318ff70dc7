"""AdamW with decoupled weight decay and a reduce-on-plateau learning-rate rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nn import Parameter

LR_FLOOR = 1e-8


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
               state: OptimizerState) -> None:
    """One AdamW update, in place on ``params`` and ``state``.

    ``p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``, where the decay term
    uses the pre-update ``p`` and never enters the moment estimates.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= state.lr * (update + state.weight_decay * p)


class AdamW:
    """Thin wrapper binding :func:`adamw_step` to a parameter list."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                    weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class LrSchedule:
    lr: float = 1e-4
    initial_lr: float = 1e-4
    floor: float = LR_FLOOR
    patience: int = 3
    factor: float = 0.1
    mode: str = "max"
    best: float | None = None
    bad_calls: int = 0

    def __post_init__(self):
        if self.mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {self.mode!r}")


def plateau_step(schedule: LrSchedule, val_metric: float) -> LrSchedule:
    """Update ``schedule`` in place after one validation measurement and return it.

    The rate decays by ``factor`` once the metric has failed to improve on
    ``patience`` consecutive calls (so on call ``patience + 1`` of a plateau),
    and never drops below ``floor``.
    """
    better = (schedule.best is None
              or (val_metric > schedule.best if schedule.mode == "max" else val_metric < schedule.best))
    if better:
        schedule.best = val_metric
        schedule.bad_calls = 0
        return schedule
    schedule.bad_calls += 1
    if schedule.bad_calls >= schedule.patience:
        schedule.lr = max(schedule.lr * schedule.factor, schedule.floor)
        schedule.bad_calls = 0
    return schedule

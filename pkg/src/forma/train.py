"""Toy-scale training loop: deterministic batches, AdamW, plateau schedule, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import LossConfig, ModelConfig
from .data import Sample, augment, synth_tamper
from .errors import NumericError
from .losses import combined_loss
from .metrics import f1_iou
from .model import ForMa
from .optim import AdamW, LrSchedule, plateau_step
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

TRAIN_KINDS = ("splice", "copy-move")


def toy_dataset(n: int, size: int = 64, seed: int = 0, kinds: Sequence[str] = TRAIN_KINDS) -> list[Sample]:
    """``n`` synthetic tampered samples; sample ``i`` uses seed ``seed * 100_003 + i``."""
    return [synth_tamper(seed * 100_003 + i, size, size, kinds[i % len(kinds)]) for i in range(n)]


def stack(samples: Sequence[Sample], dtype) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(dtype)
    return images, masks


def predict(model: ForMa, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Probability maps ``[N, H, W]`` with gradients disabled."""
    dtype = model.dtype
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(Tensor(images[i:i + batch_size].astype(dtype), dtype=dtype)).prob.data)
    return np.concatenate(out)


def evaluate(model: ForMa, samples: Sequence[Sample], tau: float = 0.5) -> tuple[float, float]:
    """Mean per-image F1 and IoU at threshold ``tau``."""
    images, _ = stack(samples, np.float64)
    probs = predict(model, images)
    scores = [f1_iou(p >= tau, s.mask) for p, s in zip(probs, samples)]
    return float(np.mean([f for f, _ in scores])), float(np.mean([i for _, i in scores]))


@dataclass
class EpochLog:
    epoch: int
    step: int
    loss: float
    lr: float
    f1: float
    iou: float


@dataclass
class TrainSettings:
    lr: float = 2e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    seed: int = 0
    patience: int = 3
    lr_factor: float = 0.1
    augment: bool = False
    tau: float = 0.5


class Trainer:
    """Owns model, optimizer and schedule; every step is a pure function of (seed, step).

    When ``batch_size`` covers the whole dataset each step sees every sample in
    a fixed order, which makes the loss trajectory monotone-checkable.
    """

    def __init__(self, model: ForMa, dataset: Sequence[Sample], loss_cfg: LossConfig | None = None,
                 settings: TrainSettings | None = None, dump_dir: str | Path | None = None):
        self.model = model
        self.dataset = list(dataset)
        self.loss_cfg = loss_cfg or LossConfig()
        self.settings = settings or TrainSettings()
        s = self.settings
        self.optimizer = AdamW(model.parameters(), lr=s.lr, weight_decay=s.weight_decay)
        self.schedule = LrSchedule(lr=s.lr, initial_lr=s.lr, patience=s.patience, factor=s.lr_factor)
        self.step = 0
        self.epoch = 0
        self.history: list[EpochLog] = []
        self.step_losses: list[float] = []
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self._dtype = model.dtype

    def batch_indices(self, step: int) -> np.ndarray:
        n, bs = len(self.dataset), self.settings.batch_size
        if bs >= n:
            return np.arange(n)
        return np.random.default_rng([self.settings.seed, step]).choice(n, bs, replace=False)

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        samples = [self.dataset[i] for i in self.batch_indices(step)]
        if self.settings.augment:
            samples = [augment(x, seed=self.settings.seed * 1_000_003 + step * 131 + k)
                       for k, x in enumerate(samples)]
        return stack(samples, self._dtype)

    def loss_at(self, step: int) -> Tensor:
        images, masks = self.batch(step)
        out = self.model(Tensor(images, dtype=self._dtype))
        return combined_loss(out.prob, masks, self.loss_cfg)

    def train_step(self) -> float:
        self.model.zero_grad()
        loss = self.loss_at(self.step)
        value = float(loss.data)
        if not np.isfinite(value):
            self._dump_bad_batch(value)
            raise NumericError(f"non-finite loss {value} at step {self.step} "
                               f"(batch seed [{self.settings.seed}, {self.step}])")
        backward(loss)
        self.optimizer.lr = self.schedule.lr
        self.optimizer.step()
        self.model.project_constraints()
        self.step += 1
        self.step_losses.append(value)
        return value

    def _dump_bad_batch(self, value: float) -> None:
        if self.dump_dir is None:
            return
        self.dump_dir.mkdir(parents=True, exist_ok=True)
        idx = self.batch_indices(self.step)
        record = {"step": self.step, "loss": repr(value), "batch_seed": [self.settings.seed, self.step],
                  "sample_indices": idx.tolist(), "sample_seeds": [self.dataset[i].seed for i in idx]}
        (self.dump_dir / "nan_batch.json").write_text(json.dumps(record, indent=2))

    def end_epoch(self, eval_samples: Sequence[Sample] | None = None) -> EpochLog:
        f1, iou = evaluate(self.model, eval_samples or self.dataset, self.settings.tau)
        plateau_step(self.schedule, f1)
        self.epoch += 1
        recent = self.step_losses[-1] if self.step_losses else float("nan")
        entry = EpochLog(self.epoch, self.step, recent, self.schedule.lr, f1, iou)
        self.history.append(entry)
        log.info("epoch %d step %d loss %.5f lr %.2e F1 %.4f IoU %.4f", *asdict(entry).values())
        return entry

    def fit(self, steps: int, steps_per_epoch: int = 10, target_f1: float | None = None) -> list[EpochLog]:
        """Run up to ``steps`` further steps; stops early once epoch F1 reaches ``target_f1``."""
        end = self.step + steps
        while self.step < end:
            self.train_step()
            if self.step % steps_per_epoch == 0 or self.step == end:
                entry = self.end_epoch()
                if target_f1 is not None and entry.f1 >= target_f1:
                    break
        return self.history

    # -- persistence -------------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        tensors = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        names = [k for k, _ in self.model.named_parameters()]
        st = self.optimizer.state
        for name, m, v in zip(names, st.m, st.v):
            tensors[f"adam_m/{name}"] = m
            tensors[f"adam_v/{name}"] = v
        meta = {
            "model_config": self.model.cfg.to_dict(),
            "loss_config": asdict(self.loss_cfg),
            "settings": asdict(self.settings),
            "optimizer": {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                          "weight_decay": st.weight_decay, "step": st.step},
            "schedule": asdict(self.schedule),
            "step": self.step,
            "epoch": self.epoch,
            "history": [asdict(h) for h in self.history],
            "dtype": np.dtype(self._dtype).name,
            **(extra or {}),
        }
        save_checkpoint(path, tensors, meta)

    @classmethod
    def resume(cls, path: str | Path, dataset: Sequence[Sample], dump_dir=None) -> "Trainer":
        tensors, meta = load_checkpoint(path)
        model = load_model(tensors, meta)
        trainer = cls(model, dataset, LossConfig(**meta["loss_config"]),
                      TrainSettings(**meta["settings"]), dump_dir)
        st = trainer.optimizer.state
        opt = meta["optimizer"]
        st.lr, st.beta1, st.beta2, st.eps = opt["lr"], opt["beta1"], opt["beta2"], opt["eps"]
        st.weight_decay, st.step = opt["weight_decay"], opt["step"]
        names = [k for k, _ in model.named_parameters()]
        if st.step:
            st.m = [tensors[f"adam_m/{n}"].copy() for n in names]
            st.v = [tensors[f"adam_v/{n}"].copy() for n in names]
        trainer.schedule = LrSchedule(**meta["schedule"])
        trainer.step, trainer.epoch = meta["step"], meta["epoch"]
        trainer.history = [EpochLog(**h) for h in meta["history"]]
        return trainer


def load_model(tensors: dict[str, np.ndarray], meta: dict) -> ForMa:
    """Rebuild a model from checkpoint contents, keeping the stored precision."""
    from .tensor import precision

    mode = "test" if meta.get("dtype", "float64") == "float64" else "fast"
    with precision(mode):
        model = ForMa(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")})
    return model


def write_loss_curve(path: str | Path, trainer: Trainer) -> None:
    """CSV with one row per step (loss) and epoch rows carrying lr and F1."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_step = {h.step: h for h in trainer.history}
    rows = ["step,loss,lr,f1,iou"]
    for i, loss in enumerate(trainer.step_losses, start=trainer.step - len(trainer.step_losses) + 1):
        h = by_step.get(i)
        rows.append(f"{i},{loss:.8g}," + (f"{h.lr:.3g},{h.f1:.6f},{h.iou:.6f}" if h else ",,"))
    path.write_text("\n".join(rows) + "\n")

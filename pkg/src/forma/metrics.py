"""Pixel-level F1 / IoU, per-dataset aggregation and report serialization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


@dataclass
class ImageScore:
    path: str
    f1: float
    iou: float
    tp: int
    fp: int
    fn: int
    dataset: str = "default"


def confusion(mask, gt) -> tuple[int, int, int]:
    m = np.asarray(mask).astype(bool)
    g = np.asarray(gt).astype(bool)
    if m.shape != g.shape:
        raise ValueError(f"mask shape {m.shape} != ground-truth shape {g.shape}")
    tp = int(np.count_nonzero(m & g))
    fp = int(np.count_nonzero(m & ~g))
    fn = int(np.count_nonzero(~m & g))
    return tp, fp, fn


def f1_iou(mask, gt) -> tuple[float, float]:
    """``(2TP / (2TP+FP+FN), TP / (TP+FP+FN))``; two empty masks score ``(1, 1)``."""
    tp, fp, fn = confusion(mask, gt)
    return _scores(tp, fp, fn)


def _scores(tp: int, fp: int, fn: int) -> tuple[float, float]:
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return 2 * tp / (2 * tp + fp + fn), tp / (tp + fp + fn)


def score_image(mask, gt, path: str = "", dataset: str = "default") -> ImageScore:
    tp, fp, fn = confusion(mask, gt)
    f1, iou = _scores(tp, fp, fn)
    return ImageScore(path, f1, iou, tp, fp, fn, dataset)


def dataset_average(reports: Iterable[tuple[float, float, int]]) -> tuple[float, float]:
    """Image-count-weighted mean of per-dataset ``(mean F1, mean IoU, n_images)``."""
    reports = list(reports)
    total = sum(n for _, _, n in reports)
    if total <= 0:
        raise ValueError("dataset_average needs at least one image")
    f1 = sum(f * n for f, _, n in reports) / total
    iou = sum(i * n for _, i, n in reports) / total
    return f1, iou


@dataclass
class EvalReport:
    images: list[ImageScore] = field(default_factory=list)
    skipped: int = 0

    def add(self, score: ImageScore) -> None:
        self.images.append(score)

    def per_dataset(self) -> dict[str, tuple[float, float, int]]:
        groups: dict[str, list[ImageScore]] = {}
        for s in self.images:
            groups.setdefault(s.dataset, []).append(s)
        return {
            name: (float(np.mean([s.f1 for s in items])), float(np.mean([s.iou for s in items])), len(items))
            for name, items in sorted(groups.items())
        }

    def average(self) -> tuple[float, float]:
        return dataset_average(self.per_dataset().values())

    def to_text(self) -> str:
        lines = [f"{'dataset':<24}{'images':>8}{'F1':>10}{'IoU':>10}"]
        for name, (f1, iou, n) in self.per_dataset().items():
            lines.append(f"{name:<24}{n:>8d}{f1:>10.4f}{iou:>10.4f}")
        if self.images:
            f1, iou = self.average()
            lines.append(f"{'weighted average':<24}{len(self.images):>8d}{f1:>10.4f}{iou:>10.4f}")
        if self.skipped:
            lines.append(f"skipped entries: {self.skipped}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text = out_dir / f"{stem}.txt"
        jsonl = out_dir / f"{stem}.jsonl"
        text.write_text(self.to_text())
        with jsonl.open("w") as fh:
            for s in self.images:
                rec = asdict(s)
                rec.pop("dataset")
                fh.write(json.dumps({"dataset": s.dataset, **rec}) + "\n")
        return text, jsonl

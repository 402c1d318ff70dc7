"""``forma train|infer|eval|complexity|robustness``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint
from .complexity import flops_estimate
from .config import VARIANTS, RunConfig
from .data import (PERTURB_RANGES, Perturbation, load_image, load_mask, perturb, read_manifest,
                   save_mask, save_prob_map, load_prob_map)
from .errors import DataError, FormaError, UsageError
from .functional import bilinear_matrix
from .metrics import EvalReport, score_image
from .model import ForMa
from .noise import load_noise_map
from .tensor import Tensor, no_grad, set_precision
from .train import Trainer, TrainSettings, load_model, toy_dataset, write_loss_curve

log = logging.getLogger("forma")

CHECKPOINT_NAME = "checkpoint.fmck"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (see `{self.prog} --help`)")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file mirroring RunConfig fields")
    p.add_argument("--scale", choices=("paper", "toy"))
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--tau", type=float, help="binarization threshold (default 0.5)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forma", description="Image tampering localization with a selective-scan encoder.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train toy-scale ForMa on synthetic tampered images")
    _common(p)
    p.add_argument("--steps", type=int, help="total optimizer steps (default epochs * steps_per_epoch)")
    p.add_argument("--samples", type=int, help="number of synthetic training samples")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.add_argument("--precision", choices=("test", "fast"))

    p = sub.add_parser("infer", help="write probability maps and masks for images")
    _common(p)
    p.add_argument("images", nargs="+", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--size", type=int, help="network input size (default from the model config)")
    p.add_argument("--noise-maps", type=Path, help="directory of <stem>.nmap files to inject")

    p = sub.add_parser("eval", help="score predictions against a JSON-lines manifest")
    _common(p)
    p.add_argument("manifest", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--predictions", type=Path,
                   help="directory of <stem>_prob.pgm maps from `forma infer` (skips the model)")
    p.add_argument("--size", type=int)

    p = sub.add_parser("complexity", help="analytic parameter and FLOP counts")
    _common(p)
    p.add_argument("--sizes", type=int, nargs="+", help="square input sizes (default S and 2S)")
    p.add_argument("--flops-per-mac", type=int, choices=(1, 2), default=1)

    p = sub.add_parser("robustness", help="F1/IoU under post-processing perturbations")
    _common(p)
    p.add_argument("manifest", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--grid", action="append", default=[], metavar="KIND:S1,S2,...",
                   help=f"perturbation sweep; kinds: {', '.join(PERTURB_RANGES)}")
    p.add_argument("--size", type=int)
    return parser


def _run_config(args) -> RunConfig:
    overrides = {k: getattr(args, k, None) for k in ("scale", "variant", "tau", "seed", "threads", "out")}
    try:
        if args.config:
            if not args.config.exists():
                raise DataError(f"{args.config}: no such config file")
            return RunConfig.from_file(args.config, **overrides)
        return RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FormaError):
            raise
        raise UsageError(str(exc)) from exc


# -- model loading and inference ----------------------------------------------------

def _load_or_init(cfg: RunConfig, checkpoint: Path | None) -> ForMa:
    if checkpoint is None and cfg.checkpoint:
        checkpoint = Path(cfg.checkpoint)
    if checkpoint is not None:
        tensors, meta = load_checkpoint(checkpoint)
        model = load_model(tensors, meta)
        log.info("loaded %s (variant %s)", checkpoint, model.cfg.variant)
        return model
    log.warning("no --checkpoint given; using a randomly initialized model (seed %d)", cfg.seed)
    set_precision(cfg.precision)
    return ForMa(cfg.model_config(), seed=cfg.seed)


def _resize(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize over the last two axes."""
    if arr.shape[-2:] == (h, w):
        return arr.copy()
    return bilinear_matrix(arr.shape[-2], h) @ arr @ bilinear_matrix(arr.shape[-1], w).T


def _nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = np.minimum(((np.arange(h) + 0.5) * arr.shape[0] / h).astype(int), arr.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * arr.shape[1] / w).astype(int), arr.shape[1] - 1)
    return arr[rows][:, cols]


def predict_native(model: ForMa, image: np.ndarray, size: int, noise_map=None) -> np.ndarray:
    """Probability map at the image's native size.

    The image is resized to ``size x size``; if that is not a multiple of 32 it is
    reflect-padded up to one and the prediction is cropped back.
    """
    h, w = image.shape[-2:]
    x = _resize(image, size, size)
    padded = -(-size // 32) * 32
    if padded != size:
        log.warning("input size %d is not divisible by 32; padding to %d and cropping", size, padded)
        pad = padded - size
        x = np.pad(x, ((0, 0), (0, pad), (0, pad)), mode="reflect" if pad < size else "edge")
    with no_grad():
        prob = model(Tensor(x[None].astype(model.dtype), dtype=model.dtype), noise_map).prob.data[0]
    return _nearest(prob[:size, :size].astype(np.float64), h, w)


def _size(args, model: ForMa) -> int:
    size = args.size or model.cfg.image_size
    if size <= 0:
        raise UsageError(f"--size must be positive, got {size}")
    return size


# -- commands ------------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    if args.precision:
        cfg.precision = args.precision
    set_precision(cfg.precision)
    n = args.samples or cfg.train_samples
    size = cfg.model_config().image_size
    dataset = toy_dataset(n, size, seed=cfg.seed)
    if args.resume:
        trainer = Trainer.resume(args.resume, dataset, dump_dir=out)
        log.info("resumed at step %d", trainer.step)
    else:
        settings = TrainSettings(lr=args.lr or cfg.learning_rate(), weight_decay=cfg.weight_decay,
                                 batch_size=args.batch_size or cfg.effective_batch_size(n), seed=cfg.seed,
                                 patience=cfg.patience, lr_factor=cfg.lr_factor, augment=cfg.augment,
                                 tau=cfg.tau)
        trainer = Trainer(ForMa(cfg.model_config(), seed=cfg.seed), dataset, cfg.loss_config(),
                          settings, dump_dir=out)
    steps = args.steps if args.steps is not None else cfg.epochs * cfg.steps_per_epoch
    if steps < 0:
        raise UsageError("--steps must be non-negative")
    try:
        trainer.fit(steps, cfg.steps_per_epoch)
    finally:
        write_loss_curve(out / "loss_curve.csv", trainer)
    trainer.save(out / CHECKPOINT_NAME, extra={"run_config": cfg.to_dict()})
    final = trainer.history[-1] if trainer.history else None
    if final:
        print(f"step {final.step}  loss {final.loss:.5f}  lr {final.lr:.2e}  train F1 {final.f1:.4f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    model = _load_or_init(cfg, args.checkpoint)
    size = _size(args, model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = load_image(path)
        nmap = None
        if args.noise_maps is not None:
            c = model.cfg.resid_channels
            nmap = load_noise_map(args.noise_maps / f"{path.stem}.nmap", expect=(c, size, size))[None]
        prob = predict_native(model, image, size, nmap)
        save_prob_map(out / f"{path.stem}_prob.pgm", prob)
        save_mask(out / f"{path.stem}_mask.png", prob >= cfg.tau)
        print(f"{path} -> {out / (path.stem + '_mask.png')}")
    return 0


def _evaluate(entries, predict_fn, tau: float) -> EvalReport:
    report = EvalReport()
    for e in entries:
        if e.mask_path is None or not e.mask_path.exists():
            log.warning("skipping %s: ground-truth mask missing (%s)", e.image_path, e.mask_path)
            report.skipped += 1
            continue
        gt = load_mask(e.mask_path)
        prob = predict_fn(e)
        if prob.shape != gt.shape:
            raise DataError(f"{e.image_path}: prediction {prob.shape} vs mask {gt.shape}")
        report.add(score_image(prob >= tau, gt, str(e.image_path), e.dataset_name))
    return report


def cmd_eval(args, cfg: RunConfig) -> int:
    entries = read_manifest(args.manifest)
    if args.predictions is not None:
        def predict_fn(e):
            return load_prob_map(args.predictions / f"{e.image_path.stem}_prob.pgm")
    else:
        model = _load_or_init(cfg, args.checkpoint)
        size = _size(args, model)

        def predict_fn(e):
            return predict_native(model, load_image(e.image_path), size)
    report = _evaluate(entries, predict_fn, cfg.tau)
    if report.skipped:
        log.warning("%d manifest entries skipped (missing masks)", report.skipped)
    text, jsonl = report.write(cfg.out)
    print(report.to_text(), end="")
    print(f"wrote {text} and {jsonl}")
    return 0


def cmd_complexity(args, cfg: RunConfig) -> int:
    mcfg = cfg.model_config()
    sizes = args.sizes or [mcfg.image_size, 2 * mcfg.image_size]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for s in sizes:
        try:
            rep = flops_estimate(mcfg, s, s, flops_per_mac=args.flops_per_mac)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        reports.append(rep)
        print(rep.to_text())
    if len(reports) > 1:
        ratio = reports[-1].flops / reports[0].flops
        print(f"FLOPs({sizes[-1]}^2) / FLOPs({sizes[0]}^2) = {ratio:.3f}")
    payload = {"scale": cfg.scale, "variant": mcfg.variant, "reports": [r.to_dict() for r in reports]}
    (out / "complexity.json").write_text(json.dumps(payload, indent=2))
    return 0


def parse_grid(specs: Sequence[str]) -> list[Perturbation]:
    grid = []
    for spec in specs:
        kind, sep, values = spec.partition(":")
        if not sep or not values:
            raise UsageError(f"bad --grid {spec!r}; expected KIND:S1,S2,...")
        try:
            strengths = [float(v) for v in values.split(",") if v]
        except ValueError as exc:
            raise UsageError(f"bad --grid {spec!r}: {exc}") from exc
        grid.extend(Perturbation(kind.strip(), s) for s in strengths)
    return grid


def cmd_robustness(args, cfg: RunConfig) -> int:
    grid = parse_grid(args.grid)
    entries = read_manifest(args.manifest)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if grid:
        model = _load_or_init(cfg, args.checkpoint)
        size = _size(args, model)
        for k, p in enumerate(grid):
            def predict_fn(e, p=p, k=k):
                image = load_image(e.image_path)
                if not p.is_identity:
                    image = perturb(image, p, seed=cfg.seed * 7919 + k)
                return predict_native(model, image, size)
            report = _evaluate(entries, predict_fn, cfg.tau)
            if not report.images:
                raise DataError(f"{args.manifest}: no entries with ground-truth masks")
            f1, iou = report.average()
            rows.append((p.kind, p.strength, f1, iou))
            print(f"{p.kind:<16}{p.strength:>8g}  F1 {f1:.4f}  IoU {iou:.4f}")
    for kind in dict.fromkeys(r[0] for r in rows):
        series = sorted((r for r in rows if r[0] == kind), key=lambda r: _severity(kind, r[1]))
        f1s = [r[2] for r in series]
        monotone = all(a >= b for a, b in zip(f1s, f1s[1:]))
        log.info("%s: F1 %s with severity (expected non-increasing; not enforced)",
                 kind, "non-increasing" if monotone else "NOT monotone")
    path = out / "robustness.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "strength", "f1", "iou"])
        writer.writerows(rows)
    print(f"wrote {path}")
    return 0


def _severity(kind: str, strength: float) -> float:
    if kind == "jpeg_quality":
        return -strength
    if kind == "resize":
        return abs(np.log(strength))
    return strength


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "complexity": cmd_complexity, "robustness": cmd_robustness}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _run_config(args)
        if cfg.threads < 1:
            raise UsageError(f"--threads must be at least 1, got {cfg.threads}")
        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except FormaError as exc:
        print(f"forma: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"forma: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic tampered images, training augmentations, post-processing
perturbations, and image / mask / manifest I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import fft, ndimage

from .errors import DataError, DomainError
from .functional import bilinear_matrix

KINDS = ("splice", "copy-move", "authentic")
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}

MIN_REGION_PX = 16
AREA_RANGE = (0.01, 0.30)


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    mask: np.ndarray   # [H, W] bool
    kind: str
    seed: int


# -- procedural content --------------------------------------------------------

def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Colour gradient + band-limited texture + per-image sensor-like noise."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    theta = rng.uniform(0, 2 * math.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * ramp[None]
    sigma = rng.uniform(1.0, 4.0)
    tex = ndimage.gaussian_filter(rng.normal(size=(3, h, w)), sigma=(0, sigma, sigma))
    tex /= tex.std() + 1e-12
    img += rng.uniform(0.03, 0.12) * tex
    img += rng.uniform(0.005, 0.04) * rng.normal(size=(3, h, w))
    return np.clip(img, 0.0, 1.0)


def _polygon_mask(rng: np.random.Generator, h: int, w: int, area_frac: float) -> np.ndarray:
    k = int(rng.integers(4, 9))
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
    radii = rng.uniform(0.6, 1.0, size=k)
    # star polygon with mean radius set from the requested area
    scale = math.sqrt(area_frac * h * w / (0.5 * np.sum(radii * np.roll(radii, -1)
                                                        * np.abs(np.sin(np.diff(np.append(angles, angles[0] + 2 * math.pi)))))))
    rad = radii * scale
    cy = rng.uniform(rad.max(), h - rad.max()) if 2 * rad.max() < h else h / 2
    cx = rng.uniform(rad.max(), w - rad.max()) if 2 * rad.max() < w else w / 2
    pts = [(float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for r, a in zip(rad, angles)]
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=255)
    return np.asarray(canvas) > 0


def synth_tamper(seed: int, h: int = 64, w: int = 64, kind: str = "splice") -> Sample:
    """Deterministic synthetic sample; the mask marks exactly the pixels that were pasted.

    ``splice`` pastes a polygon from an independently generated image;
    ``copy-move`` rotates a region of the same image by an arbitrary angle and
    pastes it elsewhere; ``authentic`` leaves the image untouched.
    """
    if kind not in KINDS:
        raise DomainError(f"unknown tamper kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng([seed, 7])
    image = _background(rng, h, w)
    if kind == "authentic":
        return Sample(image, np.zeros((h, w), dtype=bool), kind, seed)

    for _ in range(100):
        mask = _polygon_mask(rng, h, w, rng.uniform(0.03, 0.25))
        area = mask.sum()
        if area >= MIN_REGION_PX and AREA_RANGE[0] <= area / (h * w) <= AREA_RANGE[1]:
            break
    else:  # pragma: no cover - the area draw above always lands inside the range quickly
        raise DataError(f"seed {seed}: could not draw a valid tamper region")

    if kind == "splice":
        donor = _background(np.random.default_rng([seed, 11]), h, w)
        out = np.where(mask[None], donor, image)
    else:
        angle = rng.uniform(15, 345)
        rotated = ndimage.rotate(image, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
        dy, dx = (int(v) for v in rng.integers(-h // 4, h // 4 + 1, size=2))
        shifted = np.roll(rotated, (dy, dx), axis=(1, 2))
        mask = np.roll(mask, (dy, dx), axis=(0, 1))
        out = np.where(mask[None], shifted, image)
    return Sample(np.clip(out, 0.0, 1.0), mask, kind, seed)


# -- perturbations ---------------------------------------------------------------

PERTURB_RANGES = {
    "jpeg_quality": (30.0, 100.0),
    "gaussian_blur": (0.0, 5.0),
    "gaussian_noise": (0.0, 0.1),
    "resize": (0.25, 2.0),
}

_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class Perturbation:
    kind: str
    strength: float

    def __post_init__(self):
        if self.kind not in PERTURB_RANGES:
            raise DomainError(f"unknown perturbation {self.kind!r}; expected one of {sorted(PERTURB_RANGES)}")
        lo, hi = PERTURB_RANGES[self.kind]
        if not lo <= self.strength <= hi:
            raise DomainError(f"{self.kind} strength {self.strength} outside [{lo}, {hi}]")

    @property
    def is_identity(self) -> bool:
        if self.kind in ("gaussian_blur", "gaussian_noise"):
            return self.strength == 0
        return self.kind == "resize" and self.strength == 1.0


def jpeg_table(quality: float) -> np.ndarray:
    """IJG-scaled luminance quantization table (entries >= 1)."""
    q = min(max(quality, 1.0), 100.0)
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.maximum(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1.0)


def jpeg_compress(image: np.ndarray, quality: float) -> np.ndarray:
    """Block-DCT quantization of the luma channel (chroma kept); not a full codec."""
    img = np.asarray(image, dtype=np.float64)
    r, g, b = img * 255.0
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b
    h, w = y.shape
    ph, pw = (-h) % 8, (-w) % 8
    yp = np.pad(y - 128.0, ((0, ph), (0, pw)), mode="edge")
    blocks = yp.reshape(yp.shape[0] // 8, 8, yp.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    table = jpeg_table(quality)
    coef = fft.dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / table) * table
    rec = fft.idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    y = rec.transpose(0, 2, 1, 3).reshape(yp.shape)[:h, :w] + 128.0
    out = np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb])
    return np.clip(out / 255.0, 0.0, 1.0)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.array(image, copy=True)
    return np.clip(ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="reflect"), 0.0, 1.0)


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return np.array(image, copy=True)
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def resize_roundtrip(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize by ``factor`` and back to the original size."""
    _, h, w = image.shape
    sh, sw = max(1, round(h * factor)), max(1, round(w * factor))
    if (sh, sw) == (h, w):
        return np.array(image, copy=True)
    small = bilinear_matrix(h, sh) @ image @ bilinear_matrix(w, sw).T
    back = bilinear_matrix(sh, h) @ small @ bilinear_matrix(sw, w).T
    return np.clip(back, 0.0, 1.0)


def perturb(image: np.ndarray, p: Perturbation, seed: int = 0) -> np.ndarray:
    """Apply one post-processing operation; shape and [0, 1] range are preserved."""
    if p.kind == "jpeg_quality":
        return jpeg_compress(image, p.strength)
    if p.kind == "gaussian_blur":
        return gaussian_blur(image, p.strength)
    if p.kind == "gaussian_noise":
        return gaussian_noise(image, p.strength, np.random.default_rng(seed))
    return resize_roundtrip(image, p.strength)


# -- training augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_blur: float = 0.3
    p_compress: float = 0.3
    p_noise: float = 0.3
    blur_sigma: tuple[float, float] = (0.3, 1.5)
    jpeg_quality: tuple[float, float] = (60.0, 95.0)
    noise_sigma: tuple[float, float] = (0.003, 0.03)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def augment(sample: Sample, seed: int, cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Flips move image and mask together; photometric steps touch only the image."""
    rng = np.random.default_rng([seed, 13])
    img, mask = sample.image, sample.mask
    draws = rng.uniform(size=5)
    if draws[0] < cfg.p_flip:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
    if draws[1] < cfg.p_flip:
        img, mask = img[:, ::-1, :], mask[::-1, :]
    if draws[2] < cfg.p_blur:
        img = gaussian_blur(img, rng.uniform(*cfg.blur_sigma))
    if draws[3] < cfg.p_compress:
        img = jpeg_compress(img, rng.uniform(*cfg.jpeg_quality))
    if draws[4] < cfg.p_noise:
        img = gaussian_noise(img, rng.uniform(*cfg.noise_sigma), rng)
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), sample.kind, sample.seed)


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.kind, sample.seed)


# -- I/O -------------------------------------------------------------------------------

def _open(path: str | Path) -> Image.Image:
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise DataError(f"{path}: unsupported image format {path.suffix!r}; use PNG or PPM/PGM")
    if not path.exists():
        raise DataError(f"{path}: no such file")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    return img


def _check_writable(path: Path) -> None:
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise DataError(f"{path}: unsupported image format {path.suffix!r}; use PNG or PPM/PGM")
    path.parent.mkdir(parents=True, exist_ok=True)


def load_image(path: str | Path) -> np.ndarray:
    """RGB image as float64 ``[3, H, W]`` in [0, 1]; no resizing."""
    img = _open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        scale = 255.0
    else:
        scale = 65535.0 if arr.max() > 255 else 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    arr = arr[:, :, :3].astype(np.float64) / scale
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def save_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    _check_writable(path)
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Bilevel mask (0 / 255) as a bool ``[H, W]`` array."""
    img = _open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        if not (arr[:, :, :3] == arr[:, :, :1]).all():
            raise DataError(f"{path}: mask must be single-channel")
        arr = arr[:, :, 0]
    if arr.dtype == bool:
        return arr.copy()
    bad = arr[(arr != 0) & (arr != 255)]
    if bad.size:
        raise DataError(f"{path}: mask must be bilevel 0/255, found value {int(bad.flat[0])}")
    return arr == 255


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    path = Path(path)
    _check_writable(path)
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def save_prob_map(path: str | Path, prob: np.ndarray) -> None:
    """16-bit grayscale (PGM or PNG), value = round(p * 65535)."""
    path = Path(path)
    _check_writable(path)
    arr = np.clip(np.round(np.asarray(prob, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_prob_map(path: str | Path) -> np.ndarray:
    return np.asarray(_open(path)).astype(np.float64) / 65535.0


# -- manifests ----------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image_path: Path
    mask_path: Path | None
    dataset_name: str


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """JSON-lines ``{image_path, mask_path, dataset_name}``; relative paths resolve
    against the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such manifest")
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image = base / rec["image_path"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        mask = rec.get("mask_path")
        entries.append(ManifestEntry(image, base / mask if mask else None, rec.get("dataset_name", "default")))
    return entries


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w") as fh:
        for e in entries:
            def rel(p):
                p = Path(p).resolve()
                try:
                    return str(p.relative_to(base))
                except ValueError:
                    return str(p)
            fh.write(json.dumps({"image_path": rel(e.image_path),
                                 "mask_path": rel(e.mask_path) if e.mask_path else None,
                                 "dataset_name": e.dataset_name}) + "\n")

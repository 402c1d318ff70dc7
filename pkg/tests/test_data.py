import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forma.data import (AugmentConfig, ManifestEntry, Perturbation, augment, gaussian_blur, hflip, jpeg_compress,
                        jpeg_table, load_image, load_mask, load_prob_map, perturb, read_manifest, save_image,
                        save_mask, save_prob_map, synth_tamper, write_manifest)
from forma.errors import DataError, DomainError


# -- generator -------------------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["splice", "copy-move", "authentic"])
def test_synth_deterministic(kind):
    a, b = synth_tamper(17, kind=kind), synth_tamper(17, kind=kind)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert a.image.shape == (3, 64, 64) and a.mask.dtype == bool
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert a.mask.any() == (kind != "authentic")


def test_authentic_mask_empty():
    assert not synth_tamper(3, kind="authentic").mask.any()


def test_synth_seeds_differ():
    assert not np.array_equal(synth_tamper(1).image, synth_tamper(2).image)


def test_splice_area_range_1000_seeds():
    fracs = np.array([synth_tamper(s, kind="splice").mask.mean() for s in range(1000)])
    assert fracs.min() >= 0.01 and fracs.max() <= 0.30
    assert (np.array([synth_tamper(s).mask.sum() for s in range(50)]) >= 16).all()


def test_mask_marks_changed_pixels():
    for kind in ("splice", "copy-move"):
        s = synth_tamper(5, kind=kind)
        clean = synth_tamper(5, kind="authentic").image
        changed = np.abs(s.image - clean).max(axis=0) > 0
        assert not changed[~s.mask].any()  # nothing outside the mask was touched
        assert changed[s.mask].mean() > 0.9


def test_unknown_kind():
    with pytest.raises(DomainError):
        synth_tamper(0, kind="deepfake")


def test_non_square_sizes():
    s = synth_tamper(4, 48, 80, "copy-move")
    assert s.image.shape == (3, 48, 80) and s.mask.shape == (48, 80)


# -- augmentation -----------------------------------------------------------------------------

def test_augment_off_is_identity():
    s = synth_tamper(9)
    out = augment(s, seed=3, cfg=AugmentConfig.off())
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


def test_hflip_involution():
    s = synth_tamper(9)
    back = hflip(hflip(s))
    np.testing.assert_array_equal(back.image, s.image)
    np.testing.assert_array_equal(back.mask, s.mask)


def test_flip_keeps_correspondence():
    s = synth_tamper(11)
    cfg = AugmentConfig(p_flip=1.0, p_blur=0.0, p_compress=0.0, p_noise=0.0)
    out = augment(s, seed=0, cfg=cfg)
    np.testing.assert_array_equal(out.image, s.image[:, ::-1, ::-1])
    np.testing.assert_array_equal(out.mask, s.mask[::-1, ::-1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_photometric_never_touches_mask(seed):
    s = synth_tamper(seed % 50)
    out = augment(s, seed, AugmentConfig(p_flip=0.0, p_blur=1.0, p_compress=1.0, p_noise=1.0))
    np.testing.assert_array_equal(out.mask, s.mask)
    assert out.image.shape == s.image.shape and 0 <= out.image.min() and out.image.max() <= 1


def test_augment_deterministic():
    s = synth_tamper(2)
    a, b = augment(s, 42), augment(s, 42)
    np.testing.assert_array_equal(a.image, b.image)


# -- perturbations -----------------------------------------------------------------------------

def test_perturbation_ranges():
    for kind, bad in [("jpeg_quality", 20), ("gaussian_blur", 6), ("gaussian_noise", -0.1), ("resize", 3.0)]:
        with pytest.raises(DomainError):
            Perturbation(kind, bad)
    with pytest.raises(DomainError):
        Perturbation("sharpen", 1.0)


def test_perturb_identities():
    img = synth_tamper(1).image
    np.testing.assert_array_equal(perturb(img, Perturbation("gaussian_blur", 0.0)), img)
    np.testing.assert_array_equal(perturb(img, Perturbation("resize", 1.0)), img)
    np.testing.assert_array_equal(perturb(img, Perturbation("gaussian_noise", 0.0)), img)
    assert np.abs(perturb(img, Perturbation("jpeg_quality", 100)) - img).max() < 2 / 255


def test_jpeg_table():
    assert (jpeg_table(100) == 1).all()
    assert jpeg_table(50)[0, 0] == 16
    assert (jpeg_table(30) >= jpeg_table(90)).all()


def test_jpeg_degrades_with_quality():
    img = synth_tamper(3).image
    errs = [np.abs(jpeg_compress(img, q) - img).mean() for q in (95, 70, 30)]
    assert errs[0] < errs[1] < errs[2]


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(["jpeg_quality", "gaussian_blur", "gaussian_noise", "resize"]),
       u=st.floats(0, 1), h=st.integers(8, 40), w=st.integers(8, 40))
def test_perturb_preserves_shape_and_range(kind, u, h, w):
    lo, hi = {"jpeg_quality": (30, 100), "gaussian_blur": (0, 5), "gaussian_noise": (0, 0.1),
              "resize": (0.25, 2.0)}[kind]
    img = np.random.default_rng(h * w).uniform(size=(3, h, w))
    out = perturb(img, Perturbation(kind, lo + u * (hi - lo)))
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1


def test_blur_smooths():
    img = synth_tamper(8).image
    assert np.abs(np.diff(gaussian_blur(img, 2.0), axis=-1)).mean() < np.abs(np.diff(img, axis=-1)).mean()


# -- I/O ---------------------------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 9, 13)) / 255.0
    save_image(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(load_image(tmp_path / "x.ppm"), img)
    save_image(tmp_path / "x.png", img)
    np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)


def test_mask_roundtrip_and_bilevel_check(tmp_path, rng):
    m = rng.uniform(size=(7, 5)) > 0.5
    for name in ("m.png", "m.pgm"):
        save_mask(tmp_path / name, m)
        np.testing.assert_array_equal(load_mask(tmp_path / name), m)
    from PIL import Image
    arr = np.where(m, 255, 0).astype(np.uint8)
    arr[2, 3] = 128
    Image.fromarray(arr).save(tmp_path / "gray.png")
    with pytest.raises(DataError, match="128"):
        load_mask(tmp_path / "gray.png")


def test_prob_map_16bit(tmp_path, rng):
    p = rng.uniform(size=(6, 4))
    save_prob_map(tmp_path / "p.pgm", p)
    raw = (tmp_path / "p.pgm").read_bytes()
    assert raw.startswith(b"P5") and b"65535" in raw[:20]
    assert np.abs(load_prob_map(tmp_path / "p.pgm") - p).max() <= 0.5 / 65535 + 1e-12


def test_io_errors(tmp_path):
    with pytest.raises(DataError, match="nope.png"):
        load_image(tmp_path / "nope.png")
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(DataError, match="bad.png"):
        load_image(tmp_path / "bad.png")
    (tmp_path / "x.jpg").write_bytes(b"")
    with pytest.raises(DataError, match="unsupported"):
        load_image(tmp_path / "x.jpg")
    with pytest.raises(DataError):
        save_image(tmp_path / "x.gif", np.zeros((3, 2, 2)))


def test_manifest_roundtrip(tmp_path):
    (tmp_path / "imgs").mkdir()
    entries = [ManifestEntry(tmp_path / "imgs/a.png", tmp_path / "imgs/a_gt.png", "casia"),
               ManifestEntry(tmp_path / "imgs/b.png", None, "columbia")]
    write_manifest(tmp_path / "m.jsonl", entries)
    first = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert first == {"image_path": "imgs/a.png", "mask_path": "imgs/a_gt.png", "dataset_name": "casia"}
    back = read_manifest(tmp_path / "m.jsonl")
    assert [e.dataset_name for e in back] == ["casia", "columbia"]
    assert back[0].image_path.resolve() == entries[0].image_path.resolve() and back[1].mask_path is None


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path / "none.jsonl")
    (tmp_path / "bad.jsonl").write_text('{"mask_path": "x"}\n')
    with pytest.raises(DataError, match=":1"):
        read_manifest(tmp_path / "bad.jsonl")

import numpy as np
import pytest

from forma import functional as F
from forma.config import ModelConfig
from forma.decoder import ShuffleDecoder, predict_mask
from forma.encoder import Downsample, PatchEmbed, VSSBlock, VSSEncoder
from forma.errors import DataError, DimensionError
from forma.model import ForMa
from forma.noise import (SRM_KERNELS, BayarConv, NoiseExtractor, NoiseFusion, ResidualStream, SrmBank,
                         bayar_project, load_noise_map, save_noise_map, srm_apply, srm_weight)
from forma.nn import Parameter
from forma.tensor import Tensor, backward

from conftest import gradcheck, weighted_sum

TINY = ModelConfig.toy(embed_dim=4, depths=(1, 1, 1, 1), d_state=2, resid_channels=3, c_mod=4, image_size=32)


def tiny(variant="full", **kw):
    return TINY.replace(variant=variant, **kw)


# -- encoder ----------------------------------------------------------------------------------

def test_patch_embed_shape_and_zero_image(rng):
    stem = PatchEmbed(3, 16, 4, rng)
    assert stem(Tensor(rng.uniform(size=(3, 64, 64)))).shape == (1, 16, 16, 16)
    stem.proj.bias.data = rng.normal(size=16)
    out = stem(Tensor(np.zeros((3, 64, 64)))).data[0]
    expect = F.layer_norm(Tensor(stem.proj.bias.data), stem.norm.gamma, stem.norm.beta).data
    np.testing.assert_allclose(out, np.broadcast_to(expect, out.shape), atol=1e-12)


def test_patch_embed_rejects_indivisible_size(rng):
    with pytest.raises(DimensionError, match="resize"):
        PatchEmbed(3, 8, 4, rng)(Tensor(np.zeros((3, 48, 64))))


def test_vss_block_residual_identity(rng):
    block = VSSBlock(8, 16, 2, 2, 3, rng)
    for name, p in block.named_parameters():
        if not name.startswith(("norm", "out_norm")):
            p.data[:] = 0
    x = rng.normal(size=(1, 4, 4, 8))
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_vss_block_shape_and_gradient(rng):
    block = VSSBlock(8, 16, 2, 2, 3, rng, chunk=5)
    for p in block.parameters():  # beyond init scale so every path is exercised
        if p.ndim > 1:
            p.data = rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(1, 4, 4, 8))
    assert block(Tensor(x)).shape == x.shape
    proj = weighted_sum(rng, x.shape)
    assert gradcheck(lambda t: proj(block(t)), [x]) < 1e-3


def test_downsample(rng):
    ds = Downsample(5, rng)
    assert ds(Tensor(rng.normal(size=(1, 8, 8, 5)))).shape == (1, 4, 4, 10)
    assert ds.num_parameters() == 2 * 2 * 5 * 10 + 10 + 2 * 10
    ds.proj.weight.data[:] = 0.25 / 5
    ds.norm.gamma.data[:] = 1.0
    out = ds(Tensor(np.full((1, 8, 8, 5), 3.0))).data
    assert np.ptp(out) < 1e-12  # constant in, constant out


def test_encoder_pyramid_toy(rng):
    enc = VSSEncoder(ModelConfig.toy(), rng)
    pyr = enc(Tensor(rng.uniform(size=(3, 64, 64))))
    assert [l.shape[1:] for l in pyr.levels] == [(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 128)]
    assert len(pyr) == 4


def test_paper_encoder_layout():
    cfg = ModelConfig.paper()
    assert cfg.stage_channels == (96, 192, 384, 768)
    assert sum(cfg.depths) == 15
    size = cfg.image_size
    assert [(size // 2 ** (i + 2), c) for i, c in enumerate(cfg.stage_channels)] == \
        [(128, 96), (64, 192), (32, 384), (16, 768)]


def test_encoder_block_count(rng):
    assert VSSEncoder(tiny(depths=(2, 2, 9, 2)), rng).num_blocks == 15


def test_encoder_residual_bypass(rng):
    enc = VSSEncoder(TINY, rng)
    for stage in enc.stages:
        for block in stage:
            block.proj_out.weight.data[:] = 0
            block.proj_out.bias.data[:] = 0
    img = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    x = enc.stem(img)
    want = [x.data]
    for ds in enc.downsamples:
        x = ds(x)
        want.append(x.data)
    for got, w in zip(enc(img).levels, want):
        np.testing.assert_array_equal(got.data, w)


def test_encoder_random_inputs_stay_finite(rng):
    model = ForMa(TINY, seed=3)
    for k in range(20):
        img = Tensor(rng.uniform(size=(2, 3, 32, 32)) * rng.uniform(0, 4), requires_grad=True)
        out = model(img)
        backward(out.prob.sum())
        assert np.isfinite(out.prob.data).all() and np.isfinite(img.grad).all()
        model.zero_grad()


# -- SRM ---------------------------------------------------------------------------------------

def test_srm_kernels_zero_sum():
    np.testing.assert_allclose(SRM_KERNELS.sum(axis=(1, 2)), 0.0)
    assert srm_weight().shape == (9, 3, 5, 5)


def test_srm_constant_and_offset(rng):
    assert np.abs(srm_apply(Tensor(np.full((3, 12, 12), 0.37))).data[:, 2:-2, 2:-2]).max() < 1e-9
    img = rng.uniform(size=(3, 12, 12))
    a = srm_apply(Tensor(img)).data[:, 2:-2, 2:-2]
    b = srm_apply(Tensor(img + 0.25)).data[:, 2:-2, 2:-2]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_srm_impulse_response():
    img = np.zeros((3, 11, 11))
    img[1, 5, 5] = 1.0
    out = srm_apply(Tensor(img)).data
    w = srm_weight()
    for k in range(3):
        np.testing.assert_allclose(out[3 + k, 3:8, 3:8], w[3 + k, 1, ::-1, ::-1], atol=1e-15)
    assert not out[:3].any() and not out[6:].any()


def test_srm_is_frozen(rng):
    bank = SrmBank()
    assert bank.num_parameters() == 0 and not isinstance(bank.weight, Parameter)
    model = ForMa(TINY)
    backward(model(Tensor(rng.uniform(size=(3, 32, 32)))).prob.sum())
    assert model.noise.srm.weight.grad is None
    assert not any(n.startswith("noise.srm") for n, _ in model.named_parameters())


# -- Bayar -----------------------------------------------------------------------------------------

def _bayar_ok(w):
    c = w.shape[-1] // 2
    off = w.sum(axis=(-2, -1)) - w[..., c, c]
    return np.all(w[..., c, c] == -1.0) and np.abs(off - 1).max() < 1e-6


def test_bayar_projection(rng):
    w = bayar_project(rng.normal(size=(3, 3, 5, 5)))
    assert _bayar_ok(w)
    np.testing.assert_array_equal(bayar_project(w), w)
    eq = bayar_project(np.ones((5, 5)))
    assert eq[2, 2] == -1.0
    np.testing.assert_allclose(np.delete(eq.ravel(), 12), 1 / 24)


def test_bayar_degenerate_escape(rng):
    w = np.zeros((2, 5, 5))
    w[0, 0, 0], w[0, 0, 1] = 1.0, -1.0
    out = bayar_project(w, rng)
    assert _bayar_ok(out) and np.isfinite(out).all()


def test_bayar_conv_constrained_at_init(rng):
    conv = BayarConv(3, 3, rng)
    assert _bayar_ok(conv.weight.data)
    conv.weight.data += rng.normal(size=conv.weight.shape) * 0.01
    conv.project()
    assert _bayar_ok(conv.weight.data)


# -- residual stream, fusion, noise maps ------------------------------------------------------------

def test_residual_stream(rng):
    rs = ResidualStream(5, rng)
    assert rs(Tensor(rng.normal(size=(3, 8, 8)))).shape == (5, 8, 8)
    for p in rs.parameters():
        p.data[:] = 0
    assert not rs(Tensor(rng.normal(size=(3, 8, 8)))).data.any()


def test_residual_stream_gradient(rng):
    rs = ResidualStream(2, rng)
    x = rng.normal(size=(3, 6, 6))
    proj = weighted_sum(rng, (2, 6, 6))
    assert gradcheck(lambda t: proj(rs(t)), [x]) < 1e-3
    w = rs.conv2.weight.data.copy()

    def build(t):
        rs.conv2.weight = t
        return proj(rs(Tensor(x)))

    assert gradcheck(build, [w]) < 1e-3


def test_noise_fusion(rng):
    fusion = NoiseFusion(9 + 3 + 16, 16, rng)
    assert fusion.conv1.weight.shape[1] == 28
    out = fusion(Tensor(np.zeros((9, 64, 64))), Tensor(np.zeros((3, 64, 64))), Tensor(np.zeros((16, 64, 64))))
    assert out.shape == (16, 16, 16)
    assert np.ptp(out.data, axis=(0, 1)).max() < 1e-12
    with pytest.raises(DimensionError):
        fusion(Tensor(np.zeros((9, 64, 64))), Tensor(np.zeros((3, 32, 32))), Tensor(np.zeros((16, 64, 64))))


def test_noise_map_roundtrip_and_errors(tmp_path, rng):
    arr = rng.normal(size=(3, 32, 32)).astype(np.float32)
    path = tmp_path / "a.nmap"
    save_noise_map(path, arr)
    np.testing.assert_array_equal(load_noise_map(path), arr)
    with pytest.raises(DimensionError, match=r"\(3, 32, 32\).*\(3, 16, 16\)"):
        load_noise_map(path, expect=(3, 16, 16))
    with pytest.raises(DataError, match="missing.nmap"):
        load_noise_map(tmp_path / "missing.nmap")
    (tmp_path / "bad.nmap").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(DataError):
        load_noise_map(tmp_path / "bad.nmap")


def test_noise_map_injection(rng):
    ext = NoiseExtractor(TINY, rng)
    img = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    learned = ext(img).data
    nmap = rng.normal(size=(3, 32, 32))
    injected = ext(img, nmap).data
    assert injected.shape == learned.shape == (1, 8, 8, 4)
    assert not np.allclose(injected, learned)
    with pytest.raises(DimensionError):
        ext(img, rng.normal(size=(3, 16, 16)))


# -- decoder and pixel shuffle ---------------------------------------------------------------

def test_pixel_shuffle_examples(rng):
    x = rng.normal(size=(3, 4, 5))
    np.testing.assert_array_equal(F.pixel_shuffle(Tensor(x), 1).data, x)
    p, q, s, t = 1.0, 2.0, 3.0, 4.0
    np.testing.assert_array_equal(F.pixel_shuffle(Tensor([[[p, q, s, t]]]), 2).data[..., 0], [[p, q], [s, t]])
    with pytest.raises(DimensionError):
        F.pixel_shuffle(Tensor(np.zeros((2, 2, 6))), 2)


def test_pixel_shuffle_index_law(rng):
    r, c = 3, 2
    x = rng.normal(size=(2, 4, 5, c * r * r))
    y = F.pixel_shuffle(Tensor(x), r).data
    for h in range(4):
        for w in range(5):
            for a in range(r):
                for b in range(r):
                    for k in range(c):
                        assert y[1, h * r + a, w * r + b, k] == x[1, h, w, k * r * r + a * r + b]


def test_pixel_shuffle_inverse_and_gradient(rng):
    x = rng.normal(size=(3, 2, 16))
    y = F.pixel_shuffle(Tensor(x), 2)
    np.testing.assert_array_equal(F.pixel_unshuffle(y, 2).data, x)
    np.testing.assert_array_equal(np.sort(y.data.ravel()), np.sort(x.ravel()))
    g = rng.normal(size=y.shape)
    t = Tensor(x, requires_grad=True)
    backward((F.pixel_shuffle(t, 2) * Tensor(g)).sum())
    np.testing.assert_array_equal(t.grad, F.pixel_unshuffle(Tensor(g), 2).data)


def test_expand_widths_paper():
    dec = ShuffleDecoder(ModelConfig.paper(), np.random.default_rng(0))
    assert [l.weight.shape[1] for l in dec.expand] == [96, 384, 1536, 6144]
    assert dec.fuse.weight.shape[0] == 4 * 96 + 96


def _levels(rng, cfg, b=1, size=None):
    size = size or cfg.image_size
    return [Tensor(rng.normal(size=(b, size // 2 ** (i + 2), size // 2 ** (i + 2), c)))
            for i, c in enumerate(cfg.stage_channels)]


def test_decoder_outputs_and_zero_head(rng):
    cfg = tiny()
    dec = ShuffleDecoder(cfg, rng)
    f_mod = Tensor(rng.normal(size=(1, 8, 8, cfg.c_mod)))
    out = dec(_levels(rng, cfg), f_mod)
    assert out.logits.shape == (1, 8, 8, 2) and out.prob.shape == (1, 32, 32)
    assert (out.prob.data >= 0).all() and (out.prob.data <= 1).all()
    dec.head.weight.data[:] = 0
    dec.head.bias.data[:] = 0
    np.testing.assert_array_equal(dec(_levels(rng, cfg), f_mod).prob.data, 0.5)


def test_expand_zero_weights_gives_bias(rng):
    dec = ShuffleDecoder(tiny(), rng)
    layer = dec.expand[2]
    layer.weight.data[:] = 0
    layer.bias.data = rng.normal(size=layer.bias.shape)
    out = layer(_levels(rng, tiny())[2]).data
    np.testing.assert_array_equal(out, np.broadcast_to(layer.bias.data, out.shape))


@pytest.mark.parametrize("variant", ["full", "no_noise", "no_shuffle", "noise_into_encoder"])
def test_variants_keep_shapes(variant, rng):
    model = ForMa(tiny(variant), seed=1)
    out = model(Tensor(rng.uniform(size=(2, 3, 32, 32))))
    assert out.prob.shape == (2, 32, 32) and out.logits.shape == (2, 8, 8, 2)
    width = model.decoder.fuse.weight.shape[0]
    assert width == 4 * 4 + (4 if variant in ("full", "no_shuffle") else 0)
    assert (model.noise is None) == (variant == "no_noise")
    assert (model.encoder.noise_proj is not None) == (variant == "noise_into_encoder")


def test_no_shuffle_differs_only_in_values(rng):
    img = Tensor(rng.uniform(size=(3, 32, 32)))
    a = ForMa(tiny("full"), seed=2)(img).prob.data
    b = ForMa(tiny("no_shuffle"), seed=2)(img).prob.data
    assert a.shape == b.shape and not np.allclose(a, b)


def test_decoder_params_independent_of_resolution(rng):
    assert ShuffleDecoder(tiny(), rng).num_parameters() == \
        ShuffleDecoder(tiny(image_size=256), rng).num_parameters()


def test_predict_mask():
    assert not predict_mask(np.full((4, 4), 0.4)).any()
    assert predict_mask(np.full((4, 4), 0.6)).all()
    assert predict_mask(np.full((4, 4), 0.5)).all()
    assert not predict_mask(np.full((4, 4), 0.6), tau=0.7).any()


# -- end-to-end gradient -----------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["full", "noise_into_encoder", "no_shuffle"])
def test_end_to_end_gradient(variant, rng):
    from forma.losses import combined_loss

    model = ForMa(tiny(variant), seed=5)
    for p in model.parameters():  # init-scale weights leave some paths with ~1e-17 gradients
        if p.ndim > 1:
            p.data = p.data * 10.0
    img = rng.uniform(size=(1, 3, 32, 32))
    gt = (rng.uniform(size=(1, 32, 32)) > 0.7).astype(float)
    params = dict(model.named_parameters())
    picks = ["encoder.stem.proj.weight", "encoder.stages.1.0.ss2d.directions.2.W_B",
             "encoder.stages.3.0.proj_in.weight", "decoder.fuse.weight", "decoder.head.bias"]
    picks.append("noise.bayar.weight" if variant != "no_noise" else "decoder.expand.2.weight")
    names = [n for n in picks if n in params]
    arrays = [params[n].data.copy() for n in names]

    def build(*ts):
        for n, t in zip(names, ts):
            _assign(model, n, t)
        return combined_loss(model(Tensor(img)).prob, gt)

    assert gradcheck(build, arrays, max_entries=6, rng=rng) < 1e-3


def _assign(module, dotted, value):
    *path, leaf = dotted.split(".")
    obj = module
    for p in path:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    setattr(obj, leaf, value)

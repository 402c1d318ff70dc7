"""Closed-form parameter and FLOP counts, layer by layer.

Counted work: multiply-adds of every convolution, linear layer, the selective
scan (discretization, state update, read-out, skip) and bilinear resampling.
Normalization, activations, residual adds and the softmax are not counted.
By default one multiply-add counts as one FLOP, the convention of the common
vision profilers; pass ``flops_per_mac=2`` to count multiplies and adds separately.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .config import ModelConfig


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    height: int
    width: int
    flops_per_mac: int
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def flops(self) -> int:
        return self.flops_per_mac * self.macs

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9

    def group(self, prefix: str) -> LayerCost:
        hit = [l for l in self.layers if l.name == prefix or l.name.startswith(prefix + ".")]
        return LayerCost(prefix, sum(l.params for l in hit), sum(l.macs for l in hit))

    def to_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width, "flops_per_mac": self.flops_per_mac,
            "params": self.params, "params_m": self.params_m, "flops": self.flops, "gflops": self.gflops,
            "layers": [asdict(l) | {"flops": l.macs * self.flops_per_mac} for l in self.layers],
        }

    def to_text(self) -> str:
        rows = [f"{'layer':<34}{'params':>14}{'GFLOPs':>12}"]
        for l in self.layers:
            rows.append(f"{l.name:<34}{l.params:>14,d}{l.macs * self.flops_per_mac / 1e9:>12.4f}")
        rows.append(f"{'total':<34}{self.params:>14,d}{self.gflops:>12.4f}")
        rows.append(f"params {self.params_m:.2f} M, FLOPs {self.gflops:.2f} G at {self.height}x{self.width}")
        return "\n".join(rows) + "\n"


def _conv(c_in: int, c_out: int, k: int, out_px: int, bias: bool = True) -> tuple[int, int]:
    return c_in * c_out * k * k + (c_out if bias else 0), c_in * c_out * k * k * out_px


def _linear(c_in: int, c_out: int, tokens: int) -> tuple[int, int]:
    return c_in * c_out + c_out, c_in * c_out * tokens


def _ln(c: int) -> int:
    return 2 * c


def ssm_direction(d: int, n: int, r: int, tokens: int) -> tuple[int, int]:
    """One scan direction: projections to (delta, B, C) plus the scan itself.

    Scan work per token and channel: delta*A, delta*u*B, state update, C read-out
    (``4*N`` multiply-adds) plus the skip term.
    """
    params = d * r + r * d + d + 2 * d * n + d * n + d
    macs = tokens * (2 * d * r + 2 * d * n + 4 * d * n + d)
    return params, macs


def vss_block(c: int, d: int, n: int, r: int, k: int, tokens: int) -> tuple[int, int]:
    params = _ln(c) + _ln(d)
    macs = 0
    for c_in, c_out in ((c, d), (c, d), (d, c)):
        p, m = _linear(c_in, c_out, tokens)
        params += p
        macs += m
    params += k * k * d + d
    macs += k * k * d * tokens
    p, m = ssm_direction(d, n, r, tokens)
    return params + 4 * p, macs + 4 * m


def _report(cfg: ModelConfig, h: int, w: int, flops_per_mac: int) -> ComplexityReport:
    rep = ComplexityReport(h, w, flops_per_mac)
    add = rep.layers.append
    c = cfg.embed_dim
    chans = cfg.stage_channels
    q = (h // 4) * (w // 4)

    p, m = _conv(3, c, cfg.patch, q)
    add(LayerCost("encoder.stem", p + _ln(c), m))
    if cfg.variant == "noise_into_encoder":
        add(LayerCost("encoder.noise_proj", *_linear(c + cfg.c_mod, c, q)))
    for i, (ci, depth) in enumerate(zip(chans, cfg.depths)):
        tokens = (h // 2 ** (i + 2)) * (w // 2 ** (i + 2))
        for j in range(depth):
            add(LayerCost(f"encoder.stages.{i}.{j}",
                          *vss_block(ci, cfg.d_inner(i), cfg.d_state, cfg.dt_rank(i), cfg.dw_kernel, tokens)))
        if i < 3:
            p, m = _conv(ci, 2 * ci, 2, tokens // 4)
            add(LayerCost(f"encoder.downsamples.{i}", p + _ln(2 * ci), m))

    if cfg.uses_noise:
        px = h * w
        add(LayerCost("noise.srm", 0, 9 * 25 * px))
        add(LayerCost("noise.bayar", *_conv(3, cfg.bayar_kernels, 5, px, bias=False)))
        cr = cfg.resid_channels
        p1, m1 = _conv(3, cr, 3, px)
        p2, m2 = _conv(cr, cr, 3, px)
        add(LayerCost("noise.residual", p1 + 2 * p2, m1 + 2 * m2))
        p1, m1 = _conv(9 + cfg.bayar_kernels + cr, cfg.c_mod, 3, (h // 2) * (w // 2))
        p2, m2 = _conv(cfg.c_mod, cfg.c_mod, 3, q)
        add(LayerCost("noise.fusion", p1 + p2 + _ln(cfg.c_mod), m1 + m2))

    shuffle = cfg.variant != "no_shuffle"
    for i, (ci, r) in enumerate(zip(chans, cfg.ratios)):
        tokens = (h // 2 ** (i + 2)) * (w // 2 ** (i + 2))
        p, m = _linear(ci, c * r * r if shuffle else c, tokens)
        if not shuffle and r != 1:
            m += 4 * c * q  # bilinear: two taps per axis
        add(LayerCost(f"decoder.expand.{i}", p, m))
    add(LayerCost("decoder.fuse", *_linear(4 * c + cfg.decoder_noise_channels, c, q)))
    add(LayerCost("decoder.head", *_linear(c, 2, q)))
    add(LayerCost("decoder.upsample", 0, 4 * 2 * h * w))
    return rep


def param_count(cfg: ModelConfig) -> ComplexityReport:
    """Learnable scalars per layer (the frozen SRM bank contributes zero)."""
    return _report(cfg, cfg.image_size, cfg.image_size, 1)


def flops_estimate(cfg: ModelConfig, h: int | None = None, w: int | None = None,
                   flops_per_mac: int = 1) -> ComplexityReport:
    h = h or cfg.image_size
    w = w or h
    if h % 32 or w % 32:
        raise ValueError(f"input size {h}x{w} must be divisible by 32")
    return _report(cfg, h, w, flops_per_mac)

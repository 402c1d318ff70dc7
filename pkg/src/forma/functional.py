"""Differentiable primitives.

Image ops take channel-first ``[C, H, W]`` or batched ``[B, C, H, W]`` input.
Positionwise ops (linear, layer_norm, softmax) act on the last axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, as_tensor, make_result

LN_EPS = 1e-6


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient flows only where the input was inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return make_result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    """``x * sigmoid(x)``."""
    xd = x.data
    s = _sigmoid(xd)
    return make_result(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),), "silu")


def softplus(x: Tensor) -> Tensor:
    """``ln(1 + e^x)``; returns ``x`` itself above 20 where the difference is below 2e-9."""
    xd = x.data
    big = xd > 20.0
    out = np.where(big, xd, np.log1p(np.exp(np.minimum(xd, 20.0))))
    return make_result(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


# -- reductions and shape plumbing --------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),), "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    return make_result(np.flip(x.data, axis).copy(), (x,),
                       lambda g: (np.flip(g, axis).copy(),), "flip")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    n = len(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_result(np.stack([t.data for t in xs], axis=axis), xs, bw, "stack")


# -- dense layers ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y[..., j] = sum_i x[..., i] * W[i, j] + b[j]`` with ``W`` of shape ``[Cin, Cout]``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.shape} has last extent {x.shape[-1]}, "
            f"weight shape {weight.shape} expects {weight.shape[0]}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} vs weight shape {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(*lead, wd.shape[1])
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, bw, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gd
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), bw, "softmax")


# -- convolutions --------------------------------------------------------------

def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [B,C,H,W] input, got shape {x.shape}")
    return x, False


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation with kernels ``[K, C, kh, kw]``."""
    xb, squeeze = _as_batched(x)
    k_out, c_in, kh, kw = weight.shape
    b, c, h, w = xb.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input shape {x.shape} has {c} channels, kernels {weight.shape} expect {c_in}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {weight.shape[2:]} larger than padded input {(h + 2 * padding, w + 2 * padding)}"
        )
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb.data
    wd = weight.data
    xt = xp.transpose(0, 2, 3, 1)  # channel-last
    # im2col: [B, Ho, Wo, C, kh, kw] view, one GEMM against the flattened kernels
    win = np.lib.stride_tricks.sliding_window_view(xt, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win[:, :ho, :wo]).reshape(-1, c * kh * kw)
    wmat = wd.reshape(k_out, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, k_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (xb, weight) if bias is None else (xb, weight, bias)
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k_out)
        gw = (g2.T @ cols).reshape(wd.shape)
        gcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
        gxt = np.zeros_like(xt)
        for i in range(kh):
            for j in range(kw):
                gxt[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[..., i, j]
        gx = gxt.transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    res = make_result(out, parents, bw, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def dwconv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Depthwise 'same' convolution: channel ``c`` sees only kernel ``weight[c]``."""
    xb, squeeze = _as_batched(x)
    b, c, h, w = xb.shape
    if weight.ndim != 3 or weight.shape[0] != c:
        raise DimensionError(f"dwconv: input shape {x.shape} vs kernels {weight.shape}")
    kh, kw = weight.shape[1:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"dwconv: 'same' padding needs odd kernels, got {weight.shape[1:]}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xb.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wd = weight.data
    out = np.zeros_like(xb.data)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + h, j:j + w] * wd[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (xb, weight) if bias is None else (xb, weight, bias)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(kh):
            for j in range(kw):
                gw[:, i, j] = (g * xp[:, :, i:i + h, j:j + w]).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + h, j:j + w] += g * wd[None, :, i, j, None, None]
        gx = np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w])
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    res = make_result(out, parents, bw, "dwconv")
    return reshape(res, res.shape[1:]) if squeeze else res


# -- resampling ----------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights ``R`` with ``out = R @ in`` along one axis.

    Half-pixel centres (align_corners=False): output index ``i`` samples the
    input at ``(i + 0.5) * n_in / n_out - 0.5``, clamped to ``[0, n_in - 1]``,
    and splits its weight linearly between the two neighbouring samples.
    """
    r = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        r[i, lo] += 1.0 - frac
        r[i, hi] += frac
    return r


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes (``[..., H, W]``) with bilinear interpolation."""
    h, w = x.shape[-2:]
    rh = bilinear_matrix(h, out_h, x.dtype)
    rw = bilinear_matrix(w, out_w, x.dtype)
    out = rh @ x.data @ rw.T
    return make_result(out, (x,), lambda g: (rh.T @ g @ rw,), "bilinear_resize")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Channel-last sub-pixel rearrangement ``[..., h, w, c*r*r] -> [..., h*r, w*r, c]``.

    ``out[h*r + a, w*r + b, c] = in[h, w, c*r*r + a*r + b]``. No parameters.
    """
    *lead, h, w, ch = x.shape
    if ch % (r * r):
        raise DimensionError(f"pixel_shuffle: {ch} channels not divisible by r^2 = {r * r}")
    c = ch // (r * r)
    n = len(lead)
    y = reshape(x, (*lead, h, w, c, r, r))
    y = transpose(y, (*range(n), n, n + 3, n + 1, n + 4, n + 2))
    return reshape(y, (*lead, h * r, w * r, c))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    *lead, hr, wr, c = x.shape
    if hr % r or wr % r:
        raise DimensionError(f"pixel_unshuffle: spatial size {(hr, wr)} not divisible by {r}")
    h, w = hr // r, wr // r
    n = len(lead)
    y = reshape(x, (*lead, h, r, w, r, c))
    y = transpose(y, (*range(n), n, n + 2, n + 4, n + 1, n + 3))
    return reshape(y, (*lead, h, w, c * r * r))


# -- indexing ----------------------------------------------------------------

def permute_axis(x: Tensor, perm: np.ndarray, axis: int) -> Tensor:
    """``x`` reordered along ``axis`` by the permutation ``perm`` (out[i] = in[perm[i]])."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return make_result(np.take(x.data, perm, axis=axis), (x,),
                       lambda g: (np.take(g, inv, axis=axis),), "permute_axis")


def index(x: Tensor, i: int) -> Tensor:
    """``x[i]`` along the leading axis."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[i] = g
        return (out,)

    return make_result(x.data[i].copy(), (x,), bw, "index")

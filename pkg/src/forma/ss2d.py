"""Selective scan (S6) and its four-direction 2-D wrapper (SS2D).

Recurrence, per channel ``d`` and state index ``n``::

    h[t] = exp(delta[t, d] * A[d, n]) * h[t-1] + delta[t, d] * B[t, n] * u[t, d]
    y[t, d] = sum_n C[t, n] * h[t, d, n] + D_skip[d] * u[t, d]

``A = -exp(A_log)`` keeps every transition factor inside (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import DimensionError, DomainError
from .nn import Module, Parameter, trunc_normal
from .tensor import Tensor, make_result

DIRECTIONS = ("row_forward", "row_backward", "col_forward", "col_backward")

# |cumulative log-decay| allowed inside one closed-form block before it is split
_SPAN_LIMIT = {np.dtype(np.float64): 300.0, np.dtype(np.float32): 30.0}


# -- recurrence kernels --------------------------------------------------------

def _block_recurrence(log_a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Closed form of ``h[t] = a[t] h[t-1] + b[t]`` over one block (time axis -3).

    ``h[t] = P[t] * (h0 + sum_{s<=t} b[s] / P[s])`` with ``P = exp(cumsum(log_a))``.
    Every ``b[s]`` is rescaled by ``P[t] / P[s] <= 1``, so the sum stays well
    conditioned; the block is halved whenever ``exp(-cumsum)`` could overflow.
    """
    steps = log_a.shape[-3]
    if steps == 1:
        return (np.exp(log_a) * h0[..., None, :, :] + b)
    cum = np.cumsum(log_a, axis=-3)
    if np.abs(cum).max() > _SPAN_LIMIT.get(cum.dtype, 30.0):
        half = steps // 2
        first = _block_recurrence(log_a[..., :half, :, :], b[..., :half, :, :], h0)
        second = _block_recurrence(log_a[..., half:, :, :], b[..., half:, :, :], first[..., -1, :, :])
        return np.concatenate([first, second], axis=-3)
    acc = np.cumsum(b * np.exp(-cum), axis=-3)
    acc += h0[..., None, :, :]
    return np.exp(cum) * acc


def linear_recurrence(log_a: np.ndarray, b: np.ndarray, chunk: int = 64,
                      h0: np.ndarray | None = None) -> np.ndarray:
    """All hidden states of ``h[t] = exp(log_a[t]) * h[t-1] + b[t]``.

    Arrays are ``[..., L, D, N]``. The sequence is processed in blocks of
    ``chunk`` steps; each block is evaluated in closed form and hands its last
    state to the next, so cost is linear in ``L`` for a fixed block size.
    """
    if chunk < 1:
        raise DomainError(f"chunk must be a positive integer, got {chunk}")
    length = log_a.shape[-3]
    if h0 is None:
        h0 = np.zeros(b.shape[:-3] + b.shape[-2:], dtype=b.dtype)
    out = np.empty(np.broadcast_shapes(log_a.shape, b.shape), dtype=b.dtype)
    h = h0
    for start in range(0, length, chunk):
        stop = min(start + chunk, length)
        blk = _block_recurrence(log_a[..., start:stop, :, :], b[..., start:stop, :, :], h)
        out[..., start:stop, :, :] = blk
        h = blk[..., -1, :, :]
    return out


# -- parameters ----------------------------------------------------------------

def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SSMParams(Module):
    """Learnable parameters of one scan direction.

    ``delta = softplus(x @ W_dt_in @ W_dt_out + b_dt)``; the step projection is
    factored through ``dt_rank`` channels. ``B = x @ W_B``, ``C = x @ W_C``.
    """

    def __init__(self, d_inner: int, d_state: int, dt_rank: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d_inner = d_inner
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.A_log = Parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))))
        self.D_skip = Parameter(np.ones(d_inner))
        self.W_dt_in = Parameter(trunc_normal(rng, (d_inner, dt_rank)))
        self.W_dt_out = Parameter(trunc_normal(rng, (dt_rank, d_inner)))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
        self.b_dt = Parameter(_inverse_softplus(dt))
        self.W_B = Parameter(trunc_normal(rng, (d_inner, d_state)))
        self.W_C = Parameter(trunc_normal(rng, (d_inner, d_state)))

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log.data)


def ssm_param_count(d_inner: int, d_state: int, dt_rank: int) -> int:
    return 2 * d_inner * dt_rank + d_inner + 3 * d_inner * d_state + d_inner


def input_projections(x: Tensor, params: SSMParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``(delta [L,D], B [L,N], C [L,N])`` for one direction."""
    dt = F.softplus(F.add(F.matmul(F.matmul(x, params.W_dt_in), params.W_dt_out), params.b_dt))
    return dt, F.matmul(x, params.W_B), F.matmul(x, params.W_C)


# -- discretization and reference scans ----------------------------------------

def discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for the transition, Euler for the input matrix.

    Returns ``A_bar[l,d,n] = exp(delta[l,d] * A[d,n])`` and
    ``B_bar[l,d,n] = delta[l,d] * B[l,n]``.
    """
    delta, A, B = np.asarray(delta), np.asarray(A), np.asarray(B)
    if np.any(delta <= 0):
        raise DomainError(f"discretize: step sizes must be positive, min is {delta.min()!r}")
    a_bar = np.exp(delta[..., :, :, None] * A[..., None, :, :])
    b_bar = delta[..., :, :, None] * B[..., :, None, :]
    return a_bar, b_bar


def _check_scan_shapes(u, delta, A, B, C, D_skip):
    L, D = u.shape[-2:]
    N = A.shape[-1]
    if delta.shape[-2:] != (L, D) or A.shape[-2:] != (D, N) or B.shape[-2:] != (L, N) \
            or C.shape[-2:] != (L, N) or D_skip.shape[-1] != D:
        raise DimensionError(
            f"scan shapes disagree: u {u.shape}, delta {delta.shape}, A {A.shape}, "
            f"B {B.shape}, C {C.shape}, D_skip {D_skip.shape}"
        )
    if L < 1:
        raise DimensionError("scan needs at least one step")


def _unpack(params_or_A, D_skip=None):
    if isinstance(params_or_A, SSMParams):
        return params_or_A.A, params_or_A.D_skip.data
    return np.asarray(params_or_A), np.asarray(D_skip)


def s6_scan_naive(u, params, delta, B, C, D_skip=None) -> np.ndarray:
    """Step-by-step evaluation of the recurrence, starting from a zero state.

    ``params`` is an :class:`SSMParams` or a raw ``A`` array (then ``D_skip``
    must be given).
    """
    A, D_skip = _unpack(params, D_skip)
    u, delta, B, C = map(np.asarray, (u, delta, B, C))
    _check_scan_shapes(u, delta, A, B, C, D_skip)
    a_bar, b_bar = discretize(delta, A, B)
    bx = b_bar * u[..., None]
    L = u.shape[-2]
    h = np.zeros(bx.shape[:-3] + bx.shape[-2:], dtype=bx.dtype)
    y = np.empty_like(u, dtype=bx.dtype)
    for t in range(L):
        h = a_bar[..., t, :, :] * h + bx[..., t, :, :]
        y[..., t, :] = (h * C[..., t, None, :]).sum(axis=-1)
    return y + D_skip[..., None, :] * u


def s6_scan_chunked(u, params, delta, B, C, D_skip=None, chunk: int = 64) -> np.ndarray:
    """Blocked scan, numerically equal to :func:`s6_scan_naive`.

    With ``chunk >= L`` this simply runs the naive loop.
    """
    if chunk < 1:
        raise DomainError(f"chunk must be a positive integer, got {chunk}")
    A, D_skip = _unpack(params, D_skip)
    u, delta, B, C = map(np.asarray, (u, delta, B, C))
    _check_scan_shapes(u, delta, A, B, C, D_skip)
    if chunk >= u.shape[-2]:
        return s6_scan_naive(u, A, delta, B, C, D_skip)
    if np.any(delta <= 0):
        raise DomainError(f"scan: step sizes must be positive, min is {delta.min()!r}")
    log_a = delta[..., :, :, None] * A[..., None, :, :]
    bx = (delta * u)[..., None] * B[..., :, None, :]
    h = linear_recurrence(log_a, bx, chunk)
    return np.einsum("...ldn,...ln->...ld", h, C) + D_skip[..., None, :] * u


# -- differentiable fused scan ---------------------------------------------------

def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D_skip: Tensor,
                   chunk: int = 32) -> Tensor:
    """Differentiable S6 scan. Shapes ``u, delta: [..., L, D]``, ``A: [..., D, N]``,
    ``B, C: [..., L, N]``, ``D_skip: [..., D]``; leading axes broadcast.

    The backward pass runs the adjoint recurrence
    ``g[t] = dL/dh[t] + a[t+1] * g[t+1]`` with the same blocked kernel.
    """
    ud, dd, Ad, Bd, Cd, Sd = u.data, delta.data, A.data, B.data, C.data, D_skip.data
    _check_scan_shapes(ud, dd, Ad, Bd, Cd, Sd)
    log_a = dd[..., :, :, None] * Ad[..., None, :, :]
    du = dd * ud
    bx = du[..., None] * Bd[..., :, None, :]
    h = linear_recurrence(log_a, bx, chunk)
    y = np.einsum("...ldn,...ln->...ld", h, Cd) + Sd[..., None, :] * ud

    def bw(gy):
        gh = gy[..., :, :, None] * Cd[..., :, None, :]
        # adjoint: reverse time, transition factor of step t+1 applies at step t
        la_next = np.zeros_like(log_a)
        la_next[..., :-1, :, :] = log_a[..., 1:, :, :]
        g = np.flip(linear_recurrence(np.flip(la_next, -3), np.flip(gh, -3), chunk), -3)
        h_prev = np.zeros_like(h)
        h_prev[..., 1:, :, :] = h[..., :-1, :, :]
        g_log_a = g * np.exp(log_a) * h_prev
        gB_part = (g * Bd[..., :, None, :]).sum(axis=-1)  # [..., L, D]
        g_delta = (g_log_a * Ad[..., None, :, :]).sum(axis=-1) + ud * gB_part
        g_u = dd * gB_part + gy * Sd[..., None, :]
        g_A = (g_log_a * dd[..., :, :, None]).sum(axis=-3)
        g_B = (g * du[..., None]).sum(axis=-2)
        g_C = (gy[..., :, :, None] * h).sum(axis=-2)
        g_S = (gy * ud).sum(axis=-2)
        return (F._unbroadcast(g_u, ud.shape), F._unbroadcast(g_delta, dd.shape),
                F._unbroadcast(g_A, Ad.shape), F._unbroadcast(g_B, Bd.shape),
                F._unbroadcast(g_C, Cd.shape), F._unbroadcast(g_S, Sd.shape))

    return make_result(y, (u, delta, A, B, C, D_skip), bw, "selective_scan")


# -- cross-scan / cross-merge ------------------------------------------------------

def scan_order(h: int, w: int, direction: str) -> np.ndarray:
    """Sequence position -> row-major cell index ``i * w + j`` for one direction."""
    row_major = np.arange(h * w)
    col_major = row_major.reshape(h, w).T.reshape(-1)
    orders = {
        "row_forward": row_major,
        "row_backward": row_major[::-1],
        "col_forward": col_major,
        "col_backward": col_major[::-1],
    }
    if direction not in orders:
        raise DomainError(f"unknown scan direction {direction!r}")
    return orders[direction].copy()


@dataclass
class ScanSequence:
    values: Tensor  # [..., L, D]
    direction: str
    origin: tuple[int, int]


def cross_scan(fmap: Tensor) -> list[ScanSequence]:
    """Unfold ``[..., H, W, D]`` into four ``[..., H*W, D]`` sequences."""
    *lead, h, w, d = fmap.shape
    if h * w == 0:
        raise DomainError(f"cross_scan: empty feature map of shape {fmap.shape}")
    flat = F.reshape(fmap, (*lead, h * w, d))
    axis = len(lead)
    return [ScanSequence(F.permute_axis(flat, scan_order(h, w, k), axis), k, (h, w)) for k in DIRECTIONS]


def cross_merge(seqs: list[ScanSequence]) -> Tensor:
    """Put every sequence back on the grid and sum the restored maps."""
    origins = {s.origin for s in seqs}
    if len(origins) != 1:
        raise DomainError(f"cross_merge: sequences come from different maps {sorted(origins)}")
    h, w = origins.pop()
    total = None
    for s in seqs:
        *lead, length, d = s.values.shape
        if length != h * w:
            raise DimensionError(f"cross_merge: sequence length {length} != {h}*{w}")
        back = F.permute_axis(s.values, np.argsort(scan_order(h, w, s.direction)), len(lead))
        total = back if total is None else F.add(total, back)
    return F.reshape(total, (*lead, h, w, d))


class SS2D(Module):
    """Four independent S6 systems over the four scan orders of a feature map."""

    def __init__(self, d_inner: int, d_state: int, dt_rank: int, rng: np.random.Generator,
                 chunk: int = 32):
        self.directions = [SSMParams(d_inner, d_state, dt_rank, rng) for _ in DIRECTIONS]
        self.chunk = chunk

    def forward(self, fmap: Tensor) -> Tensor:
        return ss2d_forward(fmap, self.directions, self.chunk)


def ss2d_forward(fmap: Tensor, params: list[SSMParams], chunk: int = 32) -> Tensor:
    """cross_scan -> per-direction projections and scan -> cross_merge.

    ``fmap`` is ``[..., H, W, D]``. The four directions are stacked on a new
    leading axis so one fused scan call covers all of them.
    """
    if len(params) != len(DIRECTIONS):
        raise DimensionError(f"ss2d needs {len(DIRECTIONS)} parameter sets, got {len(params)}")
    seqs = cross_scan(fmap)
    x = F.stack([s.values for s in seqs])  # [4, ..., L, D]
    extra = (1,) * (x.ndim - 3)

    def stacked(name):
        t = F.stack([getattr(p, name) for p in params])
        return F.reshape(t, (4,) + extra + t.shape[1:])

    w_in, w_out = stacked("W_dt_in"), stacked("W_dt_out")
    b_dt = stacked("b_dt")
    delta = F.softplus(F.add(F.matmul(F.matmul(x, w_in), w_out), F.reshape(b_dt, b_dt.shape[:-1] + (1, b_dt.shape[-1]))))
    Bm = F.matmul(x, stacked("W_B"))
    Cm = F.matmul(x, stacked("W_C"))
    A = F.mul(F.exp(stacked("A_log")), -1.0)
    y = selective_scan(x, delta, A, Bm, Cm, stacked("D_skip"), chunk)
    outs = [ScanSequence(F.index(y, k), s.direction, s.origin) for k, s in enumerate(seqs)]
    return cross_merge(outs)


def dt_rank_for(channels: int, divisor: int = 4) -> int:
    return max(1, math.ceil(channels / divisor))


__all__ = [
    "DIRECTIONS", "SSMParams", "SS2D", "ScanSequence", "cross_merge", "cross_scan", "discretize",
    "input_projections", "linear_recurrence", "s6_scan_chunked", "s6_scan_naive", "scan_order",
    "selective_scan", "ss2d_forward",
]

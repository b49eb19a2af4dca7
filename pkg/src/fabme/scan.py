"""2-D selective scanning: four-directional flattening of a feature map,
a selective state-space recurrence per direction, and an additive merge.

The recurrence over a token sequence x_t (d_model channels per token) is

    h_t = exp(dt_t * A) * h_{t-1} + (dt_t * B_t) x_t
    y_t = C_t . h_t + D * x_t

with input-dependent dt (softplus-positive), B and C, an input-independent
negative A (stored as log-magnitudes) and per-channel skip D.  Runtime and
memory are O(L * d_model * d_state); the scan itself is sequential in t and
is one tape node with a hand-derived backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fabme.tensor import (
    ShapeError, Tensor, _acc, _node, add, exp, linear, neg, softplus,
)

__all__ = [
    "DIRECTIONS", "DirectionalSequence", "ScanParams",
    "cross_scan", "flatten_direction", "unflatten_direction",
    "selective_scan_1d", "ss2d",
]

DIRECTIONS = ("lr", "rl", "tb", "bt")

_PERM_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def direction_perm(h: int, w: int, direction: str) -> np.ndarray:
    """Flat indices (into a row-major h*w map) visited by a scan direction."""
    key = (h, w, direction)
    perm = _PERM_CACHE.get(key)
    if perm is not None:
        return perm
    base = np.arange(h * w)
    if direction == "lr":
        perm = base
    elif direction == "rl":
        perm = base[::-1].copy()
    elif direction == "tb":
        perm = base.reshape(h, w).T.reshape(-1).copy()
    elif direction == "bt":
        perm = base.reshape(h, w).T.reshape(-1)[::-1].copy()
    else:
        raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")
    _PERM_CACHE[key] = perm
    return perm


@dataclass
class DirectionalSequence:
    """One direction's token sequence (n, L, d_model) plus the map dims
    needed to invert the flattening."""

    direction: str
    tokens: Tensor
    h: int
    w: int


def flatten_direction(x: Tensor, direction: str) -> Tensor:
    """(n, c, h, w) -> token sequence (n, h*w, c) in scan order."""
    n, c, h, w = x.data.shape
    perm = direction_perm(h, w, direction)
    out = np.ascontiguousarray(x.data.reshape(n, c, h * w)[:, :, perm].transpose(0, 2, 1))

    def backward(g):
        gt = g.transpose(0, 2, 1)
        gx = np.empty((n, c, h * w), dtype=g.dtype)
        gx[:, :, perm] = gt
        _acc(x, gx.reshape(n, c, h, w))

    return _node(out, (x,), backward, "flatten_direction")


def unflatten_direction(seq: Tensor, direction: str, h: int, w: int) -> Tensor:
    """Inverse of flatten_direction: (n, h*w, c) -> (n, c, h, w)."""
    n, L, c = seq.data.shape
    if L != h * w:
        raise ShapeError(f"unflatten_direction: sequence length {L} != h*w = {h * w}")
    perm = direction_perm(h, w, direction)
    xf = np.empty((n, c, L), dtype=seq.data.dtype)
    xf[:, :, perm] = seq.data.transpose(0, 2, 1)
    out = xf.reshape(n, c, h, w)

    def backward(g):
        _acc(seq, np.ascontiguousarray(g.reshape(n, c, L)[:, :, perm].transpose(0, 2, 1)))

    return _node(out, (seq,), backward, "unflatten_direction")


def cross_scan(x: Tensor) -> list[DirectionalSequence]:
    """Decompose a feature map into the four directional token sequences;
    each is a permutation of the same h*w tokens."""
    n, c, h, w = x.data.shape
    if h * w < 1:
        raise ShapeError("cross_scan: empty spatial extent")
    return [DirectionalSequence(d, flatten_direction(x, d), h, w) for d in DIRECTIONS]


@dataclass
class ScanParams:
    """Learnable state-space parameters shared by the four scan directions.

    A is stored as log-magnitudes (a_log) so A = -exp(a_log) stays negative;
    dt comes from a low-rank projection plus bias through softplus, so the
    discretized exp(dt*A) always lies in (0, 1).
    """

    d_model: int
    d_state: int
    dt_rank: int
    a_log: Tensor      # (d_model, d_state)
    d_skip: Tensor     # (d_model,)
    w_b: Tensor        # (d_state, d_model)
    w_c: Tensor        # (d_state, d_model)
    w_dt_down: Tensor  # (dt_rank, d_model)
    w_dt_up: Tensor    # (d_model, dt_rank)
    dt_bias: Tensor    # (d_model,)

    @staticmethod
    def create(d_model: int, d_state: int = 8, dt_rank: int | None = None,
               rng: np.random.Generator | None = None, dtype=np.float64) -> "ScanParams":
        if rng is None:
            rng = np.random.default_rng(0)
        if dt_rank is None:
            dt_rank = max(1, -(-d_model // 16))
        bound = 1.0 / np.sqrt(d_model)

        def u(shape, b):
            return Tensor(rng.uniform(-b, b, size=shape).astype(dtype), requires_grad=True)

        a = np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d_model))
        dt_bias = dt + np.log(-np.expm1(-dt))  # inverse softplus
        return ScanParams(
            d_model=d_model,
            d_state=d_state,
            dt_rank=dt_rank,
            a_log=Tensor(np.log(a).astype(dtype), requires_grad=True),
            d_skip=Tensor(np.ones(d_model, dtype=dtype), requires_grad=True),
            w_b=u((d_state, d_model), bound),
            w_c=u((d_state, d_model), bound),
            w_dt_down=u((dt_rank, d_model), bound),
            w_dt_up=u((d_model, dt_rank), 1.0 / np.sqrt(dt_rank)),
            dt_bias=Tensor(dt_bias.astype(dtype), requires_grad=True),
        )

    def named_parameters(self, prefix: str = ""):
        for name in ("a_log", "d_skip", "w_b", "w_c", "w_dt_down", "w_dt_up", "dt_bias"):
            yield (f"{prefix}{name}", getattr(self, name))


def selective_scan(x: Tensor, dt: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Core recurrence as a single tape node.

    x, dt: (n, L, d); A: (d, N) negative; B, C: (n, L, N); D: (d,).
    """
    n, L, d = x.data.shape
    N = A.data.shape[1]
    if np.any(dt.data <= 0):
        raise ValueError("selective_scan: non-positive step size dt; softplus constraint violated")
    dA = np.exp(dt.data[:, :, :, None] * A.data[None, None])          # (n, L, d, N)
    dBx = (dt.data * x.data)[:, :, :, None] * B.data[:, :, None, :]   # (n, L, d, N)
    hs = np.empty_like(dA)
    h = np.zeros((n, d, N), dtype=x.data.dtype)
    for t in range(L):
        h = dA[:, t] * h + dBx[:, t]
        hs[:, t] = h
    y = np.einsum("nldk,nlk->nld", hs, C.data) + D.data * x.data

    def backward(gy):
        gx = gy * D.data
        gdt = np.zeros_like(dt.data)
        gA = np.zeros_like(A.data)
        gB = np.zeros_like(B.data)
        gC = np.einsum("nld,nldk->nlk", gy, hs)
        gD = np.einsum("nld,nld->d", gy, x.data)
        carry = np.zeros((n, d, N), dtype=gy.dtype)
        for t in range(L - 1, -1, -1):
            ghb = gy[:, t, :, None] * C.data[:, t, None, :] + carry
            if t > 0:
                gexp = ghb * hs[:, t - 1] * dA[:, t]
                gdt[:, t] = np.einsum("ndk,dk->nd", gexp, A.data)
                gA += np.einsum("ndk,nd->dk", gexp, dt.data[:, t])
            gb_term = ghb * B.data[:, t, None, :]
            gdt[:, t] += gb_term.sum(axis=2) * x.data[:, t]
            gB[:, t] = np.einsum("ndk,nd->nk", ghb, dt.data[:, t] * x.data[:, t])
            gx[:, t] += gb_term.sum(axis=2) * dt.data[:, t]
            carry = dA[:, t] * ghb
        _acc(x, gx)
        _acc(dt, gdt)
        _acc(A, gA)
        _acc(B, gB)
        _acc(C, gC)
        _acc(D, gD)

    return _node(y, (x, dt, A, B, C, D), backward, "selective_scan")


def selective_scan_1d(seq: Tensor, p: ScanParams) -> Tensor:
    """Run the selective state-space recurrence over one token sequence
    (n, L, d_model) or (L, d_model); shape is preserved."""
    squeeze = seq.data.ndim == 2
    if squeeze:
        seq = seq.reshape((1,) + seq.data.shape)
    n, L, d = seq.data.shape
    if d != p.d_model:
        raise ShapeError(f"selective_scan_1d: token width {d} != d_model {p.d_model}")
    if L < 1:
        raise ShapeError("selective_scan_1d: empty sequence")
    dt = softplus(add(linear(linear(seq, p.w_dt_down), p.w_dt_up), p.dt_bias))
    A = neg(exp(p.a_log))
    B = linear(seq, p.w_b)
    C = linear(seq, p.w_c)
    y = selective_scan(seq, dt, A, B, C, p.d_skip)
    return y.reshape(y.data.shape[1:]) if squeeze else y


def ss2d(x: Tensor, p: ScanParams) -> Tensor:
    """Cross-scan, per-direction selective scan, inverse-flatten, and sum.

    Output shape equals input shape (n, d_model, h, w).
    """
    n, c, h, w = x.data.shape
    if c != p.d_model:
        raise ShapeError(f"ss2d: input channels {c} != d_model {p.d_model}")
    out = None
    for s in cross_scan(x):
        m = unflatten_direction(selective_scan_1d(s.tokens, p), s.direction, s.h, s.w)
        out = m if out is None else add(out, m)
    return out

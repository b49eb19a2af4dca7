"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Values are numpy arrays (float64 by default, float32 opt-in for speed);
each operation records a closure that pushes gradients back to its
inputs.  Graphs are static per forward pass and single-threaded; tensors
are never mutated once produced, so read-only sharing is safe.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ConvSpec", "ShapeError", "NonFiniteError",
    "no_grad", "finite_checks",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sigmoid", "silu",
    "softplus", "minimum", "maximum", "tsum", "tmean", "reshape",
    "concat", "split", "linear", "conv2d", "conv1d",
    "global_avg_pool", "global_max_pool", "maxpool2d", "upsample_nearest2x",
    "channel_norm", "bce_with_logits",
    "grad_check", "GradCheckReport",
    "write_snapshot", "read_snapshot",
]


class ShapeError(ValueError):
    """An operation rejected its operand shapes."""


class NonFiniteError(FloatingPointError):
    """Finite-checking found NaN/Inf in an op output."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


_grad_enabled = True
_finite_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable tape construction; forward values only."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks():
    """Raise NonFiniteError as soon as any op output contains NaN/Inf."""
    global _finite_checks
    prev, _finite_checks = _finite_checks, True
    try:
        yield
    finally:
        _finite_checks = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float64
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Reverse-mode sweep from this node (gradient seed defaults to ones)."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable | None, op: str) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    t.requires_grad = track
    t._parents = tuple(parents) if track else ()
    t._backward = backward if track else None
    return t


def _acc(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data / b.data

    def backward(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _acc(a, -g)

    return _node(-a.data, (a,), backward, "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        _acc(a, g * out)

    return _node(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)

    def backward(g):
        _acc(a, g / a.data)

    return _node(out, (a,), backward, "log")


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _expit(a.data)

    def backward(g):
        _acc(a, g * out * (1.0 - out))

    return _node(out, (a,), backward, "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _expit(a.data)
    out = a.data * s

    def backward(g):
        _acc(a, g * s * (1.0 + a.data * (1.0 - s)))

    return _node(out, (a,), backward, "silu")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        _acc(a, g * _expit(a.data))

    return _node(out, (a,), backward, "softplus")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first operand."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        _acc(a, _unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        _acc(b, _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _node(out, (a, b), backward, "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def backward(g):
        _acc(a, _unbroadcast(np.where(take_a, g, 0.0), a.data.shape))
        _acc(b, _unbroadcast(np.where(take_a, 0.0, g), b.data.shape))

    return _node(out, (a, b), backward, "maximum")


# ---------------------------------------------------------------------------
# reductions / movement


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        _acc(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True))

    return _node(out, (a,), backward, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.data.dtype)

    def backward(g):
        _acc(a, np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype, copy=True))

    return _node(out, (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(out, (a,), backward, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        other = t.data.shape
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis):
            raise ShapeError(
                f"concat: shape {other} incompatible with {ref} along axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)].copy())

    return _node(out, tuple(tensors), backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Partition along `axis`; concat(split(x)) reconstructs x bit-exactly."""
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(
            f"split: sizes {list(sizes)} do not sum to axis {axis} extent {a.data.shape[axis]}"
        )
    outs = []
    lo = 0
    for s in sizes:
        hi = lo + s
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(lo, hi)
        piece = a.data[tuple(idx)].copy()

        def backward(g, lo=lo, hi=hi):
            buf = np.zeros_like(a.data)
            idx2 = [slice(None)] * buf.ndim
            idx2[axis] = slice(lo, hi)
            buf[tuple(idx2)] = g
            _acc(a, buf)

        outs.append(_node(piece, (a,), backward, "split"))
        lo = hi
    return outs


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias over the last axis; weight is (out, in)."""
    if x.data.shape[-1] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: input features {x.data.shape[-1]} != weight in-features {weight.data.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gl = g.reshape(-1, weight.data.shape[0])
        xl = x.data.reshape(-1, weight.data.shape[1])
        _acc(x, (g @ weight.data).reshape(x.data.shape))
        _acc(weight, gl.T @ xl)
        if bias is not None:
            _acc(bias, gl.sum(axis=0))

    return _node(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups != 0:
            raise ShapeError(
                f"ConvSpec: in_channels {self.in_channels} not divisible by groups {self.groups}"
            )
        if self.out_channels % self.groups != 0:
            raise ShapeError(
                f"ConvSpec: out_channels {self.out_channels} not divisible by groups {self.groups}"
            )
        if self.padding < 0:
            raise ShapeError(f"ConvSpec: padding {self.padding} must be >= 0")
        if self.stride < 1:
            raise ShapeError(f"ConvSpec: stride {self.stride} must be >= 1")


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u:u + s * oh:s, v:v + s * ow:s]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, s: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[:2]
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    gr = gcols.reshape(n, c, kh, kw, oh, ow)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u:u + s * oh:s, v:v + s * ow:s] += gr[:, :, u, v]
    return gxp


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Grouped 2-D cross-correlation (groups == in_channels is depthwise)."""
    n, c, h, w = x.data.shape
    kh, kw = spec.kernel
    ic, oc, g, s, p = spec.in_channels, spec.out_channels, spec.groups, spec.stride, spec.padding
    if c != ic:
        raise ShapeError(f"conv2d: input channels {c} != spec.in_channels {ic}")
    wshape = (oc, ic // g, kh, kw)
    if weight.data.shape != wshape:
        raise ShapeError(f"conv2d: weight shape {weight.data.shape} != expected {wshape}")
    if spec.bias:
        if bias is None or bias.data.shape != (oc,):
            raise ShapeError(f"conv2d: bias shape must be ({oc},)")
    elif bias is not None:
        raise ShapeError("conv2d: bias passed but spec.bias is False")
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output spatial dims ({oh}, {ow}) must be >= 1")

    if g == 1 and kh == 1 and kw == 1 and s == 1 and p == 0:
        return _conv1x1(x, weight, bias, oc)
    if g == ic and oc == ic:
        return _conv_depthwise(x, weight, bias, kh, kw, s, p, oh, ow)
    if g == 1:
        return _conv_im2col(x, weight, bias, kh, kw, s, p, oh, ow)
    return _conv_grouped(x, weight, bias, spec, oh, ow)


def _conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None, oc: int) -> Tensor:
    n, c, h, w = x.data.shape
    x2 = x.data.reshape(n, c, h * w)
    w2 = weight.data.reshape(oc, c)
    out = np.matmul(w2, x2)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, oc, h, w)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(n, oc, h * w)
        _acc(x, np.matmul(w2.T, gf).reshape(x.data.shape))
        _acc(weight, np.matmul(gf, x2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape))
        if bias is not None:
            _acc(bias, gf.sum(axis=(0, 2)))

    return _node(out, parents, backward, "conv2d")


def _conv_im2col(x, weight, bias, kh, kw, s, p, oh, ow):
    n, c = x.data.shape[:2]
    oc = weight.data.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, s, oh, ow)
    w2 = weight.data.reshape(oc, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, oc, oh, ow)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(n, oc, oh * ow)
        _acc(weight, np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape))
        gcols = np.matmul(w2.T, gf)
        gxp = _col2im(gcols, xp.shape, kh, kw, s, oh, ow)
        _acc(x, gxp[:, :, p:p + x.data.shape[2], p:p + x.data.shape[3]] if p else gxp)
        if bias is not None:
            _acc(bias, gf.sum(axis=(0, 2)))

    return _node(out, parents, backward, "conv2d")


def _conv_depthwise(x, weight, bias, kh, kw, s, p, oh, ow):
    n, c, h, w = x.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    out = np.zeros((n, c, oh, ow), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            out += weight.data[None, :, 0, u, v, None, None] * xp[:, :, u:u + s * oh:s, v:v + s * ow:s]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for u in range(kh):
            for v in range(kw):
                sl = xp[:, :, u:u + s * oh:s, v:v + s * ow:s]
                gw[:, 0, u, v] = np.einsum("nchw,nchw->c", g, sl)
                gxp[:, :, u:u + s * oh:s, v:v + s * ow:s] += weight.data[None, :, 0, u, v, None, None] * g
        _acc(x, gxp[:, :, p:p + h, p:p + w] if p else gxp)
        _acc(weight, gw)
        if bias is not None:
            _acc(bias, g.sum(axis=(0, 2, 3)))

    return _node(out, parents, backward, "conv2d")


def _conv_grouped(x, weight, bias, spec: ConvSpec, oh, ow):
    # rare path: split into per-group im2col convolutions
    g_ = spec.groups
    xg = split(x, [spec.in_channels // g_] * g_, axis=1)
    wg = split(weight, [spec.out_channels // g_] * g_, axis=0)
    bg = split(bias, [spec.out_channels // g_] * g_, axis=0) if bias is not None else [None] * g_
    kh, kw = spec.kernel
    outs = [
        _conv_im2col(xi, wi, bi, kh, kw, spec.stride, spec.padding, oh, ow)
        for xi, wi, bi in zip(xg, wg, bg)
    ]
    return concat(outs, axis=1)


def conv1d(x: Tensor, weight: Tensor) -> Tensor:
    """Same-padded 1-D cross-correlation along the channel axis.

    x is a channel vector (C,) or a batch of them (n, C); the kernel must
    have odd length so output length equals C.
    """
    k = weight.data.shape[0]
    if weight.data.ndim != 1:
        raise ShapeError(f"conv1d: weight must be 1-D, got shape {weight.data.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel size {k} must be odd")
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2:
        raise ShapeError(f"conv1d: input must be (C,) or (n, C), got {x.data.shape}")
    n, c = xd.shape
    p = k // 2
    xp = np.pad(xd, ((0, 0), (p, p)))
    win = np.stack([xp[:, j:j + c] for j in range(k)], axis=-1)  # (n, C, k)
    out = win @ weight.data
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None, :] if squeeze else g
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + c] += gd * weight.data[j]
        gx = gxp[:, p:p + c]
        _acc(x, gx[0] if squeeze else gx)
        _acc(weight, np.einsum("nc,nck->k", gd, win))

    return _node(out, (x, weight), backward, "conv1d")


# ---------------------------------------------------------------------------
# pooling / resampling


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    if h * w < 1:
        raise ShapeError("global_avg_pool: empty spatial extent")
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        _acc(x, np.broadcast_to(g / (h * w), x.data.shape).astype(x.data.dtype, copy=True))

    return _node(out, (x,), backward, "global_avg_pool")


def global_max_pool(x: Tensor) -> Tensor:
    """Max over h*w per (n, c); backward routes to the first row-major argmax."""
    n, c, h, w = x.data.shape
    if h * w < 1:
        raise ShapeError("global_max_pool: empty spatial extent")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[:, :, None], axis=2).reshape(n, c, 1, 1)

    def backward(g):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[:, :, None], g.reshape(n, c, 1), axis=2)
        _acc(x, gx.reshape(x.data.shape))

    return _node(out, (x,), backward, "global_max_pool")


def maxpool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max pooling; ties go to the first window offset in row-major order."""
    n, c, h, w = x.data.shape
    k, s, p = kernel, stride, padding
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool2d: output spatial dims ({oh}, {ow}) must be >= 1")
    if p:
        xp = np.full((n, c, h + 2 * p, w + 2 * p), -np.inf, dtype=x.data.dtype)
        xp[:, :, p:p + h, p:p + w] = x.data
    else:
        xp = x.data
    best = None
    arg = np.zeros((n, c, oh, ow), dtype=np.int16)
    for i, (u, v) in enumerate((u, v) for u in range(k) for v in range(k)):
        sl = xp[:, :, u:u + s * oh:s, v:v + s * ow:s]
        if best is None:
            best = sl.copy()
        else:
            m = sl > best
            best[m] = sl[m]
            arg[m] = i
    out = best

    def backward(g):
        gxp = np.zeros_like(xp)
        for i, (u, v) in enumerate((u, v) for u in range(k) for v in range(k)):
            gxp[:, :, u:u + s * oh:s, v:v + s * ow:s] += np.where(arg == i, g, 0.0)
        _acc(x, gxp[:, :, p:p + h, p:p + w] if p else gxp)

    return _node(out, (x,), backward, "maxpool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        _acc(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _node(out, (x,), backward, "upsample_nearest2x")


# ---------------------------------------------------------------------------
# normalization / losses


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (n, c) plane over its spatial positions, then apply
    a learnable per-channel affine."""
    n, c, h, w = x.data.shape
    m = h * w
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data[None, :, None, None] * xhat + bias.data[None, :, None, None]

    def backward(g):
        gy = g * gain.data[None, :, None, None]
        gmean = gy.mean(axis=(2, 3), keepdims=True)
        gdot = (gy * xhat).mean(axis=(2, 3), keepdims=True)
        _acc(x, inv * (gy - gmean - xhat * gdot))
        _acc(gain, (g * xhat).sum(axis=(0, 2, 3)))
        _acc(bias, g.sum(axis=(0, 2, 3)))

    return _node(out, (x, gain, bias), backward, "channel_norm")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: targets shape {y.shape} != logits shape {z.shape}")
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        _acc(logits, g * (_expit(z) - y))

    return _node(out, (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    tol: float
    eps: float
    n_checked: int
    failed_op: str | None = None
    per_input: list[float] = field(default_factory=list)

    def __str__(self):
        if self.failed_op is not None:
            return f"FAIL non-finite intermediate in op '{self.failed_op}'"
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e} (tol={self.tol:.1e}, {self.n_checked} elements)"


def grad_check(f: Callable, wrt, eps: float = 1e-5, tol: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar-valued f against central
    finite differences over every element of the `wrt` tensors."""
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps {eps} outside [1e-6, 1e-4]")
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    try:
        with finite_checks():
            y = f(*tensors)
            if y.data.size != 1:
                raise ValueError("grad_check: f must be scalar-valued (sum-reduce first)")
            y.backward()
            analytic = [
                t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors
            ]
            max_err = 0.0
            per_input = []
            n_checked = 0
            for t, a in zip(tensors, analytic):
                flat = t.data.reshape(-1)
                worst = 0.0
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    with no_grad():
                        hi = f(*tensors).item()
                    flat[i] = orig - eps
                    with no_grad():
                        lo = f(*tensors).item()
                    flat[i] = orig
                    num = (hi - lo) / (2.0 * eps)
                    ana = a.reshape(-1)[i]
                    err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
                    worst = max(worst, err)
                    n_checked += 1
                per_input.append(worst)
                max_err = max(max_err, worst)
    except NonFiniteError as e:
        return GradCheckReport(False, float("inf"), tol, eps, 0, failed_op=e.op)
    return GradCheckReport(max_err <= tol, max_err, tol, eps, n_checked, per_input=per_input)


# ---------------------------------------------------------------------------
# tensor snapshot files (little-endian, "FABT" magic)


def write_snapshot(f, array: np.ndarray):
    """Write one array as: magic "FABT", u32 rank, u32 dims..., f64 payload."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    own = isinstance(f, (str, bytes)) or hasattr(f, "__fspath__")
    fh = open(f, "wb") if own else f
    try:
        fh.write(b"FABT")
        fh.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr.tobytes())
    finally:
        if own:
            fh.close()


def read_snapshot(f) -> np.ndarray:
    """Inverse of write_snapshot; returns a float64 array."""
    own = isinstance(f, (str, bytes)) or hasattr(f, "__fspath__")
    fh = open(f, "rb") if own else f
    try:
        magic = fh.read(4)
        if magic != b"FABT":
            raise ValueError(f"bad snapshot magic {magic!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        dims = [struct.unpack("<I", fh.read(4))[0] for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("snapshot payload truncated")
        return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    finally:
        if own:
            fh.close()

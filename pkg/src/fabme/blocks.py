"""Composite network blocks: Bottleneck, C2F, SPPF, VSS, C2F-VMamba and
EMCA, plus the small module/parameter registry and checkpoint format they
share.

Blocks are stateless given their parameters; parameters are read-only
during evaluation, so evaluating disjoint inputs concurrently is safe.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from fabme import tensor as T
from fabme.scan import ScanParams, ss2d
from fabme.tensor import ConvSpec, ShapeError, Tensor

__all__ = [
    "Module", "Conv", "Bottleneck", "C2F", "SPPF",
    "VSSConfig", "VSS", "C2FVMambaConfig", "C2FVMamba",
    "EMCAConfig", "EMCA", "adaptive_kernel_size",
    "block_rng", "save_checkpoint", "load_checkpoint", "load_into",
]


def block_rng(seed: int, path: str) -> np.random.Generator:
    """Generator keyed by (seed, block path) so adding or swapping one block
    never changes the initialization of the others."""
    return np.random.default_rng((seed, zlib.crc32(path.encode())))


class Module:
    """Minimal container: child modules and parameters are discovered from
    instance attributes (lists of modules included) in definition order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _walk(value, path):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield (path, value)
    elif isinstance(value, (Module, ScanParams)):
        yield from value.named_parameters(f"{path}.")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Conv(Module):
    """Conv2d with optional per-channel spatial norm and SiLU; YOLO-style
    auto same-padding.  norm defaults to act: activated convolutions are
    normalized, bare projections and predictors are not."""

    def __init__(self, c_in, c_out, k=1, stride=1, padding=None, groups=1,
                 act=True, norm=None, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        if padding is None:
            padding = k // 2
        self.spec = ConvSpec(c_in, c_out, (k, k), stride=stride, padding=padding, groups=groups)
        self.weight = _kaiming_uniform(rng, (c_out, c_in // groups, k, k), (c_in // groups) * k * k, dtype)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        self.norm = ChannelNorm(c_out, dtype=dtype) if (act if norm is None else norm) else None
        self.act = act

    def forward(self, x):
        y = T.conv2d(x, self.spec, self.weight, self.bias)
        if self.norm is not None:
            y = self.norm(y)
        return T.silu(y) if self.act else y


class ChannelNorm(Module):
    """Per-channel normalization over spatial positions with learnable affine."""

    def __init__(self, channels, dtype=np.float64):
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return T.channel_norm(x, self.gain, self.bias)


class Bottleneck(Module):
    """Two 3x3 convolutions with an optional residual connection."""

    def __init__(self, channels, shortcut=True, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cv1 = Conv(channels, channels, 3, rng=rng, dtype=dtype)
        self.cv2 = Conv(channels, channels, 3, rng=rng, dtype=dtype)
        self.shortcut = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return T.add(x, y) if self.shortcut else y


class C2F(Module):
    """CSP-style block: 1x1 conv, split in half, chain n bottlenecks on one
    half, concat every intermediate, 1x1 conv out.  Concat width is (n+2)*h."""

    def __init__(self, c_in, c_out, n=1, shortcut=False, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        if c_out % 2:
            raise ShapeError(f"C2F: out_channels {c_out} must be even")
        self.h = c_out // 2
        self.cv1 = Conv(c_in, c_out, 1, rng=rng, dtype=dtype)
        self.blocks = [Bottleneck(self.h, shortcut, rng=rng, dtype=dtype) for _ in range(n)]
        self.cv2 = Conv((n + 2) * self.h, c_out, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        parts = T.split(self.cv1(x), [self.h, self.h])
        for blk in self.blocks:
            parts.append(blk(parts[-1]))
        return self.cv2(T.concat(parts))


class SPPF(Module):
    """Spatial pyramid pooling (fast): three chained stride-1 5x5 max pools,
    concat of all four stages, 1x1 convs either side."""

    def __init__(self, c_in, c_out, k=5, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        hidden = c_in // 2
        self.k = k
        self.cv1 = Conv(c_in, hidden, 1, rng=rng, dtype=dtype)
        self.cv2 = Conv(hidden * 4, c_out, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        y = self.cv1(x)
        outs = [y]
        for _ in range(3):
            outs.append(T.maxpool2d(outs[-1], self.k, 1, self.k // 2))
        return self.cv2(T.concat(outs))


# ---------------------------------------------------------------------------
# visual state-space blocks


@dataclass
class VSSConfig:
    channels: int
    expand: float = 1.0
    dw_kernel: int = 3
    d_state: int = 8

    @property
    def inner(self) -> int:
        return int(round(self.channels * self.expand))


class VSS(Module):
    """Dual-path visual state-space block.

    Pre-norm, then path (a) pointwise-expand -> depthwise conv -> SiLU ->
    ss2d -> norm and path (b) pointwise-expand -> SiLU gate; paths merge
    by elementwise product, project back to the block width, plus residual.
    """

    def __init__(self, cfg: VSSConfig, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        c, d = cfg.channels, cfg.inner
        self.cfg = cfg
        self.norm1 = ChannelNorm(c, dtype=dtype)
        self.proj_a = Conv(c, d, 1, act=False, rng=rng, dtype=dtype)
        self.proj_b = Conv(c, d, 1, act=False, rng=rng, dtype=dtype)
        self.dw = Conv(d, d, cfg.dw_kernel, groups=d, act=False, rng=rng, dtype=dtype)
        self.scan = ScanParams.create(d, d_state=cfg.d_state, rng=rng, dtype=dtype)
        self.norm2 = ChannelNorm(d, dtype=dtype)
        self.proj_out = Conv(d, c, 1, act=False, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.data.shape[1] != self.cfg.channels:
            raise ShapeError(f"VSS: input channels {x.data.shape[1]} != {self.cfg.channels}")
        h = self.norm1(x)
        a = self.norm2(ss2d(T.silu(self.dw(self.proj_a(h))), self.scan))
        b = T.silu(self.proj_b(h))
        return T.add(x, self.proj_out(T.mul(a, b)))


@dataclass
class C2FVMambaConfig:
    in_channels: int
    out_channels: int
    n: int = 1
    strict_paper_concat: bool = True
    expand: float = 1.0
    d_state: int = 8

    def __post_init__(self):
        if self.out_channels % 2:
            raise ShapeError(f"C2FVMamba: out_channels {self.out_channels} must be even")
        if self.n < 1:
            raise ShapeError(f"C2FVMamba: n {self.n} must be >= 1")

    @property
    def hidden(self) -> int:
        return self.out_channels // 2

    @property
    def concat_width(self) -> int:
        # strict: X1 + full Conv(X) + Y2 + (n-1) chain outputs = (n+3)*h
        # conventional: X1 + X2 + n chain stages = (n+2)*h
        h = self.hidden
        return (self.n + 3) * h if self.strict_paper_concat else (self.n + 2) * h


class C2FVMamba(Module):
    """C2F variant whose inner transforms are VSS blocks.

    With strict_paper_concat the final 1x1 conv sees
    Concat(X1, Conv(X), Y2, chain outputs) of width (n+3)*h; otherwise the
    conventional C2F-style Concat(X1, X2, chain outputs) of width (n+2)*h.
    """

    def __init__(self, cfg: C2FVMambaConfig, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        h = cfg.hidden
        self.cv1 = Conv(cfg.in_channels, 2 * h, 1, rng=rng, dtype=dtype)
        vss_cfg = VSSConfig(h, expand=cfg.expand, d_state=cfg.d_state)
        self.blocks = [VSS(vss_cfg, rng=rng, dtype=dtype) for _ in range(cfg.n)]
        self.cv2 = Conv(cfg.concat_width, cfg.out_channels, 1, rng=rng, dtype=dtype)

    def forward(self, x):
        if x.data.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"C2FVMamba: input channels {x.data.shape[1]} != {self.cfg.in_channels}")
        h = self.cfg.hidden
        conv_x = self.cv1(x)
        x1, x2 = T.split(conv_x, [h, h])
        y2 = self.blocks[0](x2)
        chain = [y2]
        for blk in self.blocks[1:]:
            chain.append(blk(chain[-1]))
        if self.cfg.strict_paper_concat:
            parts = [x1, conv_x] + chain
        else:
            parts = [x1, x2] + chain
        return self.cv2(T.concat(parts))


# ---------------------------------------------------------------------------
# channel attention


def adaptive_kernel_size(channels: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Nearest odd kernel to |log2(C)/gamma + b/gamma|, floored at 3."""
    t = int(abs(math.log2(channels) / gamma + b / gamma))
    k = t if t % 2 else t + 1
    return max(k, 3)


@dataclass
class EMCAConfig:
    channels: int
    k: int | None = None

    def __post_init__(self):
        if self.k is None:
            self.k = adaptive_kernel_size(self.channels)
        if self.k % 2 == 0 or self.k < 3:
            raise ShapeError(f"EMCA: kernel size {self.k} must be odd and >= 3")


class EMCA(Module):
    """Channel recalibration from dual global pooling.

    Per sample: descriptor = GAP + GMP over spatial positions, a 1-D
    cross-channel convolution (no bias) and a sigmoid produce per-channel
    weights in (0, 1) that rescale the input map.
    """

    def __init__(self, cfg: EMCAConfig, rng=None, dtype=np.float64):
        if rng is None:
            rng = np.random.default_rng(0)
        self.cfg = cfg
        self.weight = _kaiming_uniform(rng, (cfg.k,), cfg.k, dtype)

    def forward(self, x):
        n, c, h, w = x.data.shape
        if c != self.cfg.channels:
            raise ShapeError(f"EMCA: input channels {c} != {self.cfg.channels}")
        desc = T.add(T.global_avg_pool(x), T.global_max_pool(x))
        a = T.sigmoid(T.conv1d(desc.reshape(n, c), self.weight))
        return T.mul(x, a.reshape(n, c, 1, 1))


# ---------------------------------------------------------------------------
# parameter checkpoints: flat ordered (name, shape, f64 payload) records,
# each payload in the tensor snapshot format


def save_checkpoint(path, named_params):
    rows = list(named_params)
    with open(path, "wb") as f:
        for name, t in rows:
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            T.write_snapshot(f, data)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            (ln,) = struct.unpack("<I", head)
            name = f.read(ln).decode()
            out[name] = T.read_snapshot(f)
    return out


def load_into(model: Module, path):
    """Load a checkpoint into a model, insisting on matching names/shapes."""
    state = load_checkpoint(path)
    for name, t in model.named_parameters():
        if name not in state:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        arr = state.pop(name)
        if arr.shape != t.data.shape:
            raise ShapeError(f"checkpoint parameter {name!r} shape {arr.shape} != model {t.data.shape}")
        t.data = arr.astype(t.data.dtype)
    if state:
        raise KeyError(f"checkpoint has unexpected parameters: {sorted(state)[:5]}")

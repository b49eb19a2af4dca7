"""Declarative assembly of the detector graph: backbone (stem + four
conv-downsample/C2F stages + SPPF, optional channel attention), a
top-down/bottom-up fusion neck whose four C2F slots are individually
replaceable by the state-space variant, and three per-scale prediction
heads with anchor-free center-based decoding.

A built model is immutable during inference; concurrent forward passes
over distinct inputs are safe.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fabme import tensor as T
from fabme.blocks import (
    C2F, C2FVMamba, C2FVMambaConfig, Conv, EMCA, EMCAConfig, Module, SPPF,
    block_rng,
)
from fabme.metrics import Detection
from fabme.tensor import NonFiniteError, ShapeError, Tensor

__all__ = [
    "GraphSpec", "FabMEModel", "build_graph", "count_params",
    "decode", "nms", "VARIANTS", "variant_spec",
    "SCALES", "NECK_POSITIONS",
]

SCALES = {
    "s": (0.5, 1.0 / 3.0),
    "nano-test": (0.125, 1.0 / 6.0),
}

NECK_POSITIONS = ("none", "c2f1", "c2f2", "c2f3", "c2f4")

# (emca_enabled, vmamba_position) per named variant; c2f1..c2f4 mirror the
# position-ablation rows, emca-only and fabme the component toggles.
VARIANTS = {
    "baseline": (False, "none"),
    "emca-only": (True, "none"),
    "fabme": (True, "c2f3"),
    "c2f1": (False, "c2f1"),
    "c2f2": (False, "c2f2"),
    "c2f3": (False, "c2f3"),
    "c2f4": (False, "c2f4"),
}

_BASE_WIDTHS = (64, 128, 256, 512, 1024)
_BASE_DEPTHS = (3, 6, 6, 3)
_BASE_NECK_DEPTH = 3


@dataclass
class GraphSpec:
    """Build-time description of one detector variant."""

    width_mult: float = 0.5
    depth_mult: float = 1.0 / 3.0
    emca_enabled: bool = False
    vmamba_position: str = "none"
    num_classes: int = 20
    input_size: int = 640
    in_channels: int = 3
    seed: int = 0
    d_state: int = 8
    ssm_expand: float = 1.0
    strict_paper_concat: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.vmamba_position not in NECK_POSITIONS:
            raise ValueError(
                f"invalid vmamba_position {self.vmamba_position!r}; expected one of {NECK_POSITIONS}"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @staticmethod
    def preset(scale: str = "s", **overrides) -> "GraphSpec":
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}; expected one of {tuple(SCALES)}")
        wm, dm = SCALES[scale]
        return GraphSpec(width_mult=wm, depth_mult=dm, **overrides)

    def widths(self) -> tuple[int, ...]:
        return tuple(int(round(b * self.width_mult)) for b in _BASE_WIDTHS)

    def depths(self) -> tuple[int, ...]:
        return tuple(max(1, round(b * self.depth_mult)) for b in _BASE_DEPTHS)

    def neck_depth(self) -> int:
        return max(1, round(_BASE_NECK_DEPTH * self.depth_mult))

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_file(self, path):
        with open(path, "w") as f:
            for k, v in vars(self).items():
                f.write(f"{k}={v}\n")

    @staticmethod
    def from_file(path) -> "GraphSpec":
        kwargs = {}
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
                k, v = (s.strip() for s in line.split("=", 1))
                kwargs[k] = v
        return GraphSpec(**_coerce_fields(kwargs))


def _coerce_fields(kwargs: dict) -> dict:
    out = {}
    hints = {
        "width_mult": float, "depth_mult": float, "ssm_expand": float,
        "emca_enabled": _parse_bool, "strict_paper_concat": _parse_bool,
        "num_classes": int, "input_size": int, "in_channels": int,
        "seed": int, "d_state": int,
        "vmamba_position": str, "dtype": str,
    }
    for k, v in kwargs.items():
        if k not in hints:
            raise ValueError(f"unknown graph config key {k!r}")
        out[k] = hints[k](v)
    return out


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"cannot parse boolean from {s!r}")


def variant_spec(name: str, scale: str = "s", **overrides) -> GraphSpec:
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {tuple(VARIANTS)}")
    emca, pos = VARIANTS[name]
    return GraphSpec.preset(scale, emca_enabled=emca, vmamba_position=pos, **overrides)


class Head(Module):
    """Per-scale prediction stack: two 1x1 convs producing, per cell,
    box offsets (4) + objectness (1) + class logits.  The objectness bias
    starts at -2 so few cells fire before training."""

    def __init__(self, c_in, num_classes, rng, dtype):
        self.cv1 = Conv(c_in, 2 * c_in, 1, rng=rng, dtype=dtype)
        self.cv2 = Conv(2 * c_in, 5 + num_classes, 1, act=False, rng=rng, dtype=dtype)
        self.cv2.bias.data[4] = -2.0

    def forward(self, x):
        return self.cv2(self.cv1(x))


class FabMEModel(Module):
    """Backbone + neck + heads per a GraphSpec; strides are (8, 16, 32)."""

    strides = (8, 16, 32)

    def __init__(self, spec: GraphSpec):
        self.spec = spec
        dtype = spec.np_dtype()
        w0, w1, w2, w3, w4 = spec.widths()
        n1, n2, n3, n4 = spec.depths()
        nn = spec.neck_depth()
        seed = spec.seed

        def conv(path, *a, **kw):
            return Conv(*a, rng=block_rng(seed, path), dtype=dtype, **kw)

        self.stem = conv("stem", spec.in_channels, w0, 3, 2)
        self.down1 = conv("down1", w0, w1, 3, 2)
        self.stage1 = C2F(w1, w1, n1, shortcut=True, rng=block_rng(seed, "stage1"), dtype=dtype)
        self.down2 = conv("down2", w1, w2, 3, 2)
        self.stage2 = C2F(w2, w2, n2, shortcut=True, rng=block_rng(seed, "stage2"), dtype=dtype)
        self.down3 = conv("down3", w2, w3, 3, 2)
        self.stage3 = C2F(w3, w3, n3, shortcut=True, rng=block_rng(seed, "stage3"), dtype=dtype)
        self.down4 = conv("down4", w3, w4, 3, 2)
        self.stage4 = C2F(w4, w4, n4, shortcut=True, rng=block_rng(seed, "stage4"), dtype=dtype)
        self.sppf = SPPF(w4, w4, rng=block_rng(seed, "sppf"), dtype=dtype)
        self.emca = EMCA(EMCAConfig(w4), rng=block_rng(seed, "emca"), dtype=dtype) if spec.emca_enabled else None

        def neck_block(path, c_in, c_out):
            if spec.vmamba_position == path:
                cfg = C2FVMambaConfig(
                    c_in, c_out, n=nn,
                    strict_paper_concat=spec.strict_paper_concat,
                    expand=spec.ssm_expand, d_state=spec.d_state,
                )
                return C2FVMamba(cfg, rng=block_rng(seed, path), dtype=dtype)
            return C2F(c_in, c_out, nn, shortcut=False, rng=block_rng(seed, path), dtype=dtype)

        self.neck1 = neck_block("c2f1", w4 + w3, w3)
        self.neck2 = neck_block("c2f2", w3 + w2, w2)
        self.pan1 = conv("pan1", w2, w2, 3, 2)
        self.neck3 = neck_block("c2f3", w2 + w3, w3)
        self.pan2 = conv("pan2", w3, w3, 3, 2)
        self.neck4 = neck_block("c2f4", w3 + w4, w4)
        self.heads = [
            Head(c, spec.num_classes, rng=block_rng(seed, f"head{i}"), dtype=dtype)
            for i, c in enumerate((w2, w3, w4))
        ]

    def forward(self, x: Tensor) -> list[Tensor]:
        n, c, h, w = x.data.shape
        if c != self.spec.in_channels:
            raise ShapeError(f"forward: input channels {c} != {self.spec.in_channels}")
        if h % 32 or w % 32:
            raise ShapeError(f"forward: input resolution {h}x{w} must be divisible by 32")
        y = self.stem(x)
        y = self.stage1(self.down1(y))
        c2 = self.stage2(self.down2(y))        # stride 8
        c3 = self.stage3(self.down3(c2))       # stride 16
        c4 = self.sppf(self.stage4(self.down4(c3)))  # stride 32
        if self.emca is not None:
            c4 = self.emca(c4)

        p4_td = self.neck1(T.concat([T.upsample_nearest2x(c4), c3]))
        p3 = self.neck2(T.concat([T.upsample_nearest2x(p4_td), c2]))
        p4 = self.neck3(T.concat([self.pan1(p3), p4_td]))
        p5 = self.neck4(T.concat([self.pan2(p4), c4]))

        outs = [head(p) for head, p in zip(self.heads, (p3, p4, p5))]
        for i, o in enumerate(outs):
            if not np.all(np.isfinite(o.data)):
                raise NonFiniteError(f"heads.{i}")
        return outs

    def predict(self, x: Tensor, conf_thresh=0.25, iou_thresh=0.45, max_det=300):
        with T.no_grad():
            outs = self.forward(x)
        return decode(outs, self.spec.num_classes, self.strides, conf_thresh, iou_thresh, max_det)


def build_graph(spec: GraphSpec) -> FabMEModel:
    return FabMEModel(spec)


def count_params(model: Module) -> int:
    """Exact count of learnable scalars."""
    return int(sum(t.data.size for _, t in model.named_parameters()))


def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode(outputs, num_classes, strides=(8, 16, 32), conf_thresh=0.25,
           iou_thresh=0.45, max_det=300) -> list[list[Detection]]:
    """Map raw head outputs to absolute boxes, filter by confidence, and
    apply greedy per-class non-maximum suppression.

    Cell (i, j) predicts center (j + sigmoid(tx), i + sigmoid(ty)) * stride
    and size (exp(tw), exp(th)) * stride; score = objectness * class prob.
    """
    arrs = [out.data if isinstance(out, Tensor) else np.asarray(out) for out in outputs]
    batch = arrs[0].shape[0]
    per_image: list[list[tuple]] = [[] for _ in range(batch)]
    for arr, stride in zip(arrs, strides):
        n, ch, hh, ww = arr.shape
        if ch != 5 + num_classes:
            raise ShapeError(f"decode: {ch} channels but expected {5 + num_classes}")
        jj, ii = np.meshgrid(np.arange(ww), np.arange(hh))
        cx = (_expit(arr[:, 0]) + jj) * stride
        cy = (_expit(arr[:, 1]) + ii) * stride
        bw = np.exp(np.clip(arr[:, 2], -20.0, 8.0)) * stride
        bh = np.exp(np.clip(arr[:, 3], -20.0, 8.0)) * stride
        obj = _expit(arr[:, 4])
        cls = _expit(arr[:, 5:])
        scores = obj[:, None] * cls  # (n, nc, h, w)
        for b in range(n):
            ks, iy, ix = np.nonzero(scores[b] > conf_thresh)
            for k, i, j in zip(ks, iy, ix):
                x1 = cx[b, i, j] - bw[b, i, j] / 2
                y1 = cy[b, i, j] - bh[b, i, j] / 2
                per_image[b].append(
                    (float(scores[b, k, i, j]), int(k) + 1,
                     (float(x1), float(y1), float(x1 + bw[b, i, j]), float(y1 + bh[b, i, j])))
                )
    results = []
    for cands in per_image:
        order = sorted(range(len(cands)), key=lambda t: -cands[t][0])  # stable: ties keep insertion order
        dets: list[Detection] = []
        kept_by_class: dict[int, list] = {}
        for idx in order:
            conf, cid, box = cands[idx]
            kept = kept_by_class.setdefault(cid, [])
            if any(_box_iou(box, kb) > iou_thresh for kb in kept):
                continue
            kept.append(box)
            dets.append(Detection(class_id=cid, box=box, confidence=conf))
            if len(dets) >= max_det:
                break
        results.append(dets)
    return results


def nms(boxes, scores, iou_thresh=0.45) -> list[int]:
    """Greedy NMS over one class; returns kept indices in score order
    (ties broken by input order)."""
    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    keep: list[int] = []
    for i in order:
        if all(_box_iou(boxes[i], boxes[j]) <= iou_thresh for j in keep):
            keep.append(i)
    return keep


def _box_iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0

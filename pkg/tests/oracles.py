"""Independent oracles used by the tests: a pure-Python brute-force
detection evaluator (no shared code with fabme.metrics) and a direct
triple-loop convolution."""
from __future__ import annotations

import numpy as np


def iou_py(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = ix2 - ix1, iy2 - iy1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def brute_force_ap(dets, gts, iou_thresh=0.5) -> dict[int, float]:
    """dets: (image_id, class_id, box, conf); gts: (image_id, class_id, box).
    Greedy confidence-ranked matching, envelope area by explicit max-scan."""
    classes = sorted({g[1] for g in gts})
    aps = {}
    for c in classes:
        class_dets = [d for d in dets if d[1] == c]
        class_gts = [g for g in gts if g[1] == c]
        class_dets = sorted(class_dets, key=lambda d: -d[3])  # stable on ties
        used = [False] * len(class_gts)
        flags = []
        for d in class_dets:
            best, best_i = 0.0, None
            for i, g in enumerate(class_gts):
                if used[i] or g[0] != d[0]:
                    continue
                v = iou_py(d[2], g[2])
                if v > best:
                    best, best_i = v, i
            if best_i is not None and best >= iou_thresh:
                used[best_i] = True
                flags.append(True)
            else:
                flags.append(False)
        points = []
        tp = fp = 0
        for flag in flags:
            tp += 1 if flag else 0
            fp += 0 if flag else 1
            points.append((tp / len(class_gts), tp / (tp + fp)))
        ap, prev_r = 0.0, 0.0
        for r in sorted({r for r, _ in points}):
            if r <= prev_r:
                continue
            pmax = max(p for rr, p in points if rr >= r)
            ap += (r - prev_r) * pmax
            prev_r = r
        aps[c] = ap
    return aps


def brute_force_map50(dets, gts, iou_thresh=0.5) -> float:
    aps = brute_force_ap(dets, gts, iou_thresh)
    return sum(aps.values()) / len(aps)


def random_detection_scene(rng, n_images=4, n_classes=5, max_gt=6, max_det=10):
    """Random boxes/detections for oracle-vs-library comparisons."""
    gts, dets = [], []
    for img in range(n_images):
        for _ in range(int(rng.integers(1, max_gt + 1))):
            x1, y1 = rng.uniform(0, 80, size=2)
            w, h = rng.uniform(4, 40, size=2)
            gts.append((img, int(rng.integers(1, n_classes + 1)),
                        (x1, y1, x1 + w, y1 + h)))
        for _ in range(int(rng.integers(0, max_det + 1))):
            if len(gts) and rng.random() < 0.6:
                # perturb an existing gt so matches at various IoUs occur
                base = gts[int(rng.integers(0, len(gts)))]
                if base[0] != img and rng.random() < 0.5:
                    continue
                bx = base[2]
                dx, dy = rng.uniform(-8, 8, size=2)
                box = (bx[0] + dx, bx[1] + dy, bx[2] + dx * 0.5, bx[3] + dy * 0.5)
                if box[0] >= box[2] or box[1] >= box[3]:
                    continue
                cid = base[1] if rng.random() < 0.8 else int(rng.integers(1, n_classes + 1))
            else:
                x1, y1 = rng.uniform(0, 80, size=2)
                w, h = rng.uniform(4, 40, size=2)
                box = (x1, y1, x1 + w, y1 + h)
                cid = int(rng.integers(1, n_classes + 1))
            dets.append((img, cid, box, float(rng.random())))
    return dets, gts


def conv2d_direct(x, w, b, stride=1, pad=0, groups=1):
    """Triple-loop 2-D cross-correlation oracle (NCHW), float64."""
    n, c, h, wd = x.shape
    oc, icg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    cpg = c // groups
    opg = oc // groups
    for b_ in range(n):
        for o in range(oc):
            g = o // opg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ci, u, v] * xp[b_, g * cpg + ci, i * stride + u, j * stride + v]
                    out[b_, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out

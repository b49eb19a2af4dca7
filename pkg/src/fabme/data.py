"""Dataset pipeline: tile large fabric images into fixed-size sub-images,
remap annotations into tile frames, discard defect-free tiles, split 4:1
by source image, and report per-category statistics.

Image IO is dependency-free: PPM (P5/P6) read/write and a minimal PNG
reader (8-bit, non-interlaced).
"""
from __future__ import annotations

import csv
import json
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Annotation", "TileJob", "Sample",
    "plan_tiles", "remap_annotations", "plan_tile_job", "extract_tile",
    "split_dataset", "read_labels", "write_labels", "read_coco",
    "read_ppm", "write_ppm", "read_png", "load_image",
    "scan_dataset", "tile_dataset", "write_manifest", "category_stats",
]

TILE_SIZE = 640
MIN_AREA_RATIO = 0.25
MIN_CLIPPED_PX = 2.0


@dataclass(frozen=True)
class Annotation:
    """Ground-truth box: class 1..20, center/size normalized to the frame."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not 1 <= self.class_id <= 20:
            raise ValueError(f"class_id={self.class_id} out of range 1..20")
        for name in ("cx", "cy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} out of range [0, 1]")
        for name in ("w", "h"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} out of range (0, 1]")

    def corners(self, frame_w: float, frame_h: float) -> tuple[float, float, float, float]:
        cx, cy = self.cx * frame_w, self.cy * frame_h
        w, h = self.w * frame_w, self.h * frame_h
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


# ---------------------------------------------------------------------------
# YOLO / COCO label files


def read_labels(path) -> list[Annotation]:
    """YOLO text labels: one "class cx cy w h" per line, class zero-indexed
    on disk and 1-based in memory."""
    anns = []
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
            try:
                cid = int(fields[0])
                vals = [float(v) for v in fields[1:]]
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            try:
                anns.append(Annotation(cid + 1, *vals))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return anns


def write_labels(path, anns):
    with open(path, "w") as f:
        for a in anns:
            f.write(f"{a.class_id - 1} {a.cx:.6f} {a.cy:.6f} {a.w:.6f} {a.h:.6f}\n")


def read_coco(path) -> dict[str, list[Annotation]]:
    """Read category/bbox fields of a COCO file and convert to normalized
    annotations keyed by image file name."""
    with open(path) as f:
        doc = json.load(f)
    images = {im["id"]: im for im in doc.get("images", [])}
    out: dict[str, list[Annotation]] = {im["file_name"]: [] for im in images.values()}
    for ann in doc.get("annotations", []):
        im = images[ann["image_id"]]
        x, y, w, h = ann["bbox"]
        out[im["file_name"]].append(Annotation(
            class_id=int(ann["category_id"]),
            cx=(x + w / 2) / im["width"],
            cy=(y + h / 2) / im["height"],
            w=w / im["width"],
            h=h / im["height"],
        ))
    return out


# ---------------------------------------------------------------------------
# tiling


def plan_tiles(img_w: int, img_h: int, tile: int = TILE_SIZE) -> list[tuple[int, int]]:
    """Non-overlapping grid of ceil(w/tile) x ceil(h/tile) origins; edge
    tiles shift inward when the image exceeds the tile in that axis."""
    if img_w < 1 or img_h < 1:
        raise ValueError(f"image dims {img_w}x{img_h} must be >= 1")
    nx = max(1, math.ceil(img_w / tile))
    ny = max(1, math.ceil(img_h / tile))
    xs = [min(i * tile, max(img_w - tile, 0)) for i in range(nx)]
    ys = [min(j * tile, max(img_h - tile, 0)) for j in range(ny)]
    return [(ox, oy) for oy in ys for ox in xs]


def remap_annotations(anns, origin: tuple[int, int], tile: int, src_w: int, src_h: int,
                      min_area_ratio: float = MIN_AREA_RATIO,
                      min_px: float = MIN_CLIPPED_PX) -> list[Annotation]:
    """Clip boxes to a tile and renormalize to its frame.  A clipped box is
    kept iff clipped/original area >= min_area_ratio and both clipped sides
    are >= min_px pixels."""
    ox, oy = origin
    out = []
    for a in anns:
        x1, y1, x2, y2 = a.corners(src_w, src_h)
        ix1, iy1 = max(x1, ox), max(y1, oy)
        ix2, iy2 = min(x2, ox + tile), min(y2, oy + tile)
        cw, ch = ix2 - ix1, iy2 - iy1
        if cw <= 0 or ch <= 0:
            continue
        if cw * ch < min_area_ratio * (x2 - x1) * (y2 - y1):
            continue
        if cw < min_px or ch < min_px:
            continue
        out.append(Annotation(
            class_id=a.class_id,
            cx=((ix1 + ix2) / 2 - ox) / tile,
            cy=((iy1 + iy2) / 2 - oy) / tile,
            w=cw / tile,
            h=ch / tile,
        ))
    return out


@dataclass
class TileJob:
    """Planned tiling of one source image; only annotated tiles are kept."""

    source_id: str
    src_w: int
    src_h: int
    tile: int
    origins: list[tuple[int, int]] = field(default_factory=list)
    annotations: list[list[Annotation]] = field(default_factory=list)


def plan_tile_job(source_id: str, src_w: int, src_h: int, anns,
                  tile: int = TILE_SIZE, min_area_ratio: float = MIN_AREA_RATIO,
                  min_px: float = MIN_CLIPPED_PX) -> TileJob:
    job = TileJob(source_id=source_id, src_w=src_w, src_h=src_h, tile=tile)
    for origin in plan_tiles(src_w, src_h, tile):
        kept = remap_annotations(anns, origin, tile, src_w, src_h, min_area_ratio, min_px)
        if kept:  # discard defect-free tiles
            job.origins.append(origin)
            job.annotations.append(kept)
    return job


def extract_tile(img: np.ndarray, origin: tuple[int, int], tile: int) -> np.ndarray:
    """Crop (H, W[, C]) pixels at origin; replicate the border when the
    source is smaller than the tile."""
    ox, oy = origin
    sub = img[oy:oy + tile, ox:ox + tile]
    pad_h, pad_w = tile - sub.shape[0], tile - sub.shape[1]
    if pad_h or pad_w:
        widths = [(0, pad_h), (0, pad_w)] + [(0, 0)] * (img.ndim - 2)
        sub = np.pad(sub, widths, mode="edge")
    return sub


def split_dataset(items, seed: int = 0, ratio: tuple[int, int] = (4, 1)):
    """Deterministic split by whole items (source images), within one item
    of the requested ratio."""
    items = list(items)
    frac = ratio[1] / (ratio[0] + ratio[1])
    n_val = int(round(len(items) * frac))
    perm = np.random.default_rng(seed).permutation(len(items))
    val_idx = set(perm[:n_val].tolist())
    train = [it for i, it in enumerate(items) if i not in val_idx]
    val = [it for i, it in enumerate(items) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# image IO


def write_ppm(path, img: np.ndarray):
    """Binary P6, maxval 255.  Gray (H, W) input is replicated to RGB."""
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError(f"write_ppm: expected 3 channels, got {c}")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img).tobytes())


def _read_pnm_token(f) -> bytes:
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated PNM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path) -> np.ndarray:
    """Read binary P6 (RGB) or P5 (gray) into (H, W, 3) uint8."""
    with open(path, "rb") as f:
        magic = _read_pnm_token(f)
        if magic not in (b"P6", b"P5"):
            raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
        w = int(_read_pnm_token(f))
        h = int(_read_pnm_token(f))
        maxval = int(_read_pnm_token(f))
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
        channels = 3 if magic == b"P6" else 1
        payload = f.read(w * h * channels)
        if len(payload) != w * h * channels:
            raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return np.repeat(img, 3, axis=2) if channels == 1 else img.copy()


def _paeth(a, b, c):
    p = int(a) + int(b) - int(c)
    pa, pb, pc = abs(p - int(a)), abs(p - int(b)), abs(p - int(c))
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def read_png(path) -> np.ndarray:
    """Minimal PNG reader: 8-bit gray/gray+alpha/RGB/RGBA, no interlace.
    Returns (H, W, 3) uint8."""
    with open(path, "rb") as f:
        if f.read(8) != b"\x89PNG\r\n\x1a\n":
            raise ValueError(f"{path}: not a PNG file")
        width = height = bit_depth = color_type = interlace = None
        idat = b""
        while True:
            head = f.read(8)
            if len(head) < 8:
                raise ValueError(f"{path}: truncated PNG")
            (length,) = struct.unpack(">I", head[:4])
            ctype = head[4:8]
            body = f.read(length)
            f.read(4)  # crc
            if ctype == b"IHDR":
                width, height, bit_depth, color_type, _, _, interlace = struct.unpack(">IIBBBBB", body)
            elif ctype == b"IDAT":
                idat += body
            elif ctype == b"IEND":
                break
    if bit_depth != 8:
        raise ValueError(f"{path}: only 8-bit PNG supported, got bit depth {bit_depth}")
    if interlace:
        raise ValueError(f"{path}: interlaced PNG not supported")
    channels = {0: 1, 2: 3, 4: 2, 6: 4}.get(color_type)
    if channels is None:
        raise ValueError(f"{path}: unsupported PNG color type {color_type}")
    raw = zlib.decompress(idat)
    stride = width * channels
    if len(raw) != (stride + 1) * height:
        raise ValueError(f"{path}: PNG payload size mismatch")
    img = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(height):
        ftype = raw[y * (stride + 1)]
        line = np.frombuffer(raw, dtype=np.uint8,
                             count=stride, offset=y * (stride + 1) + 1).copy()
        if ftype == 0:
            recon = line
        elif ftype == 1:
            recon = line
            for i in range(channels, stride):
                recon[i] = (int(recon[i]) + int(recon[i - channels])) & 0xFF
        elif ftype == 2:
            recon = (line.astype(np.int16) + prev).astype(np.uint8)
        elif ftype == 3:
            recon = line
            for i in range(stride):
                left = recon[i - channels] if i >= channels else 0
                recon[i] = (int(recon[i]) + (int(left) + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:
            recon = line
            for i in range(stride):
                left = recon[i - channels] if i >= channels else 0
                ul = prev[i - channels] if i >= channels else 0
                recon[i] = (int(recon[i]) + int(_paeth(left, prev[i], ul))) & 0xFF
        else:
            raise ValueError(f"{path}: unknown PNG filter type {ftype}")
        img[y] = recon
        prev = recon
    img = img.reshape(height, width, channels)
    if channels == 1:
        return np.repeat(img, 3, axis=2)
    if channels == 2:
        return np.repeat(img[:, :, :1], 3, axis=2)
    if channels == 4:
        return img[:, :, :3].copy()
    return img


def load_image(path) -> np.ndarray:
    """Read an image file into (3, H, W) float64 in [0, 1]."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pnm", ".pgm"):
        img = read_ppm(path)
    elif suffix == ".png":
        img = read_png(path)
    else:
        raise ValueError(f"unsupported image format {suffix!r} (PPM/PNG supported)")
    return img.astype(np.float64).transpose(2, 0, 1) / 255.0


# ---------------------------------------------------------------------------
# dataset directories


@dataclass
class Sample:
    image_id: str
    image_path: Path
    annotations: list[Annotation]


_IMAGE_SUFFIXES = (".ppm", ".pnm", ".pgm", ".png")


def scan_dataset(root) -> list[Sample]:
    """Pair image files with same-stem YOLO label files.  Accepts either an
    images/ + labels/ layout or a flat directory."""
    root = Path(root)
    img_dir = root / "images" if (root / "images").is_dir() else root
    lbl_dir = root / "labels" if (root / "labels").is_dir() else root
    samples = []
    for p in sorted(img_dir.iterdir()):
        if p.suffix.lower() not in _IMAGE_SUFFIXES:
            continue
        lbl = lbl_dir / f"{p.stem}.txt"
        anns = read_labels(lbl) if lbl.exists() else []
        samples.append(Sample(image_id=p.stem, image_path=p, annotations=anns))
    return samples


def write_manifest(path, rows):
    """Manifest CSV: tile_id, source_id, origin_x, origin_y, n_annotations."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tile_id", "source_id", "origin_x", "origin_y", "n_annotations"])
        for row in rows:
            w.writerow(row)


def category_stats(train_samples, val_samples, classes: int = 20):
    """Per-category (class_id, train_imgs, train_anns, val_imgs, val_anns)."""
    rows = []
    for cid in range(1, classes + 1):
        def count(samples):
            imgs = sum(1 for s in samples if any(a.class_id == cid for a in s.annotations))
            anns = sum(sum(1 for a in s.annotations if a.class_id == cid) for s in samples)
            return imgs, anns
        ti, ta = count(train_samples)
        vi, va = count(val_samples)
        rows.append((cid, ti, ta, vi, va))
    return rows


def tile_dataset(in_dir, out_dir, tile: int = TILE_SIZE, seed: int = 0,
                 min_area_ratio: float = MIN_AREA_RATIO, min_px: float = MIN_CLIPPED_PX,
                 threads: int = 1) -> dict:
    """Tile every source image, keep annotated tiles only, split 4:1 by
    source image, and write tiles (PPM), labels, manifest and stats."""
    sources = scan_dataset(in_dir)
    if not sources:
        raise FileNotFoundError(f"no images found in {in_dir}")
    out_dir = Path(out_dir)
    train_ids, val_ids = split_dataset([s.image_id for s in sources], seed=seed)
    part_of = {sid: "train" for sid in train_ids}
    part_of.update({sid: "val" for sid in val_ids})
    for part in ("train", "val"):
        (out_dir / part / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / part / "labels").mkdir(parents=True, exist_ok=True)

    def process(src: Sample):
        img = (load_image(src.image_path).transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        h, w = img.shape[:2]
        job = plan_tile_job(src.image_id, w, h, src.annotations, tile, min_area_ratio, min_px)
        part = part_of[src.image_id]
        rows, tiles = [], []
        for origin, anns in zip(job.origins, job.annotations):
            tile_id = f"{src.image_id}_{origin[0]}_{origin[1]}"
            write_ppm(out_dir / part / "images" / f"{tile_id}.ppm", extract_tile(img, origin, tile))
            write_labels(out_dir / part / "labels" / f"{tile_id}.txt", anns)
            rows.append((tile_id, src.image_id, origin[0], origin[1], len(anns)))
            tiles.append(Sample(tile_id, out_dir / part / "images" / f"{tile_id}.ppm", anns))
        return part, rows, tiles

    results = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(process, sources))
    else:
        results = [process(s) for s in sources]

    manifest_rows = []
    tiles_by_part = {"train": [], "val": []}
    for part, rows, tiles in results:
        manifest_rows.extend(rows)
        tiles_by_part[part].extend(tiles)
    manifest_rows.sort(key=lambda r: r[0])
    write_manifest(out_dir / "manifest.csv", manifest_rows)
    stats = category_stats(tiles_by_part["train"], tiles_by_part["val"])
    with open(out_dir / "stats.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "train_imgs", "train_anns", "val_imgs", "val_anns"])
        for row in stats:
            w.writerow(row)
    return {
        "n_sources": len(sources),
        "n_train_tiles": len(tiles_by_part["train"]),
        "n_val_tiles": len(tiles_by_part["val"]),
        "manifest": str(out_dir / "manifest.csv"),
        "stats": str(out_dir / "stats.csv"),
    }

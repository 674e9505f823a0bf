"""Image/mask file handling, resizing, manifests and the synthetic
desk-scale dataset.

File formats are dependency-free and bit-exact: binary PPM (P6) for RGB
images and binary PGM (P5) for masks, with label values stored as raw
bytes.  Manifests are UTF-8, one sample per line:
``image<TAB>drivable_mask<TAB>lane_mask<TAB>split``  (split: train|val).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ManifestError

DEFAULT_SIZE = (384, 640)   # (H, W)


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

def _read_pnm_header(fh):
    magic = fh.read(2)
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PNM header")
        text = line.split(b"#", 1)[0]
        fields.extend(text.split())
    width, height, maxval = (int(v) for v in fields[:3])
    if maxval > 255:
        raise ValueError(f"only 8-bit PNM supported, maxval={maxval}")
    return magic, width, height, maxval


def read_pnm(path):
    """Binary PPM/PGM -> uint8 array (H, W, 3) or (H, W)."""
    with open(path, "rb") as fh:
        magic, w, h, _ = _read_pnm_header(fh)
        if magic == b"P6":
            count, shape = w * h * 3, (h, w, 3)
        elif magic == b"P5":
            count, shape = w * h, (h, w)
        else:
            raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
        raw = fh.read(count)
        if len(raw) != count:
            raise ValueError(f"{path}: truncated pixel data")
        return np.frombuffer(raw, dtype=np.uint8).reshape(shape)


def write_pnm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def resize_bilinear(img, out_hw):
    """img (..., H, W) float -> (..., H', W'), half-pixel-centre sampling."""
    h, w = img.shape[-2:]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return img.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0).reshape(-1, 1)
    fx = np.clip(xs - x0, 0.0, 1.0).reshape(1, -1)
    r0 = img[..., y0, :][..., :, x0] * (1 - fy) * (1 - fx) + img[..., y0, :][..., :, x1] * (1 - fy) * fx
    r1 = img[..., y1, :][..., :, x0] * fy * (1 - fx) + img[..., y1, :][..., :, x1] * fy * fx
    return (r0 + r1).astype(img.dtype, copy=False)


def resize_nearest(mask, out_hw):
    h, w = mask.shape[-2:]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return mask.copy()
    ys = np.clip(((np.arange(oh) + 0.5) * (h / oh)).astype(np.int64), 0, h - 1)
    xs = np.clip(((np.arange(ow) + 0.5) * (w / ow)).astype(np.int64), 0, w - 1)
    return mask[..., ys, :][..., :, xs]


# ---------------------------------------------------------------------------
# image / mask loading
# ---------------------------------------------------------------------------

def load_image(path, size=DEFAULT_SIZE):
    """-> (3, H, W) float32 in [0, 1], bilinearly resized."""
    arr = read_pnm(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    img = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
    if size is not None:
        img = resize_bilinear(img, size)
    return img


def load_mask(path, num_classes, size=DEFAULT_SIZE):
    """-> (H, W) int64 label map, nearest-neighbour resized, values validated."""
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise ValueError(f"{path}: masks must be single-channel PGM")
    bad = arr[arr >= num_classes]
    if bad.size:
        raise ValueError(f"{path}: mask label {int(bad[0])} out of range [0, {num_classes})")
    mask = arr.astype(np.int64)
    if size is not None:
        mask = resize_nearest(mask, size)
    return mask


def save_mask(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("mask labels must fit in a byte")
    write_pnm(path, labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    image: str
    drivable: str
    lane: str
    split: str


def read_manifest(path):
    records = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(f"{path}:{ln}: expected 4 tab-separated fields, got {len(parts)}")
            img, drv, lane, split = parts
            if split not in ("train", "val"):
                raise ManifestError(f"{path}:{ln}: split must be train|val, got {split!r}")
            rel = lambda p: p if os.path.isabs(p) else os.path.join(base, p)
            records.append(SampleRecord(rel(img), rel(drv), rel(lane), split))
    missing = [p for r in records for p in (r.image, r.drivable, r.lane) if not os.path.isfile(p)]
    if missing:
        raise ManifestError("manifest references missing files: " + ", ".join(missing))
    return records


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray       # (3, H, W) float32 in [0, 1]
    drivable: np.ndarray    # (H, W) int64
    lane: np.ndarray        # (H, W) int64


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    drivable_classes: int = 2


def load_dataset(manifest_path, size=DEFAULT_SIZE, drivable_classes=2) -> Dataset:
    ds = Dataset(drivable_classes=drivable_classes)
    for rec in read_manifest(manifest_path):
        s = Sample(load_image(rec.image, size),
                   load_mask(rec.drivable, drivable_classes, size),
                   load_mask(rec.lane, 2, size))
        (ds.train if rec.split == "train" else ds.val).append(s)
    return ds


# ---------------------------------------------------------------------------
# synthetic road scenes
# ---------------------------------------------------------------------------

def _draw_polyline(mask, y_top, y_bot, x_top, x_bot, width):
    h, w = mask.shape
    for y in range(y_top, y_bot):
        t = (y - y_top) / max(y_bot - 1 - y_top, 1)
        x = int(round(x_top + t * (x_bot - x_top)))
        lo, hi = max(x, 0), min(x + width, w)
        if lo < hi:
            mask[y, lo:hi] = 1


def synth_sample(rng, size=(64, 64), drivable_classes=2) -> Sample:
    h, w = size
    y_h = int(rng.uniform(0.30, 0.50) * h)
    xbl = rng.uniform(0.0, 0.15) * w
    xbr = rng.uniform(0.85, 1.0) * w
    xc = rng.uniform(0.35, 0.65) * w
    half = rng.uniform(0.05, 0.12) * w
    xtl, xtr = xc - half, xc + half

    drivable = np.zeros((h, w), dtype=np.int64)
    seam_bot = rng.uniform(0.35, 0.65) * w
    for y in range(y_h, h):
        t = (y - y_h) / max(h - 1 - y_h, 1)
        left = int(round(xtl + t * (xbl - xtl)))
        right = int(round(xtr + t * (xbr - xtr)))
        left, right = max(left, 0), min(right, w)
        if drivable_classes == 2:
            drivable[y, left:right] = 1
        else:
            seam = int(round(xc + t * (seam_bot - xc)))
            seam = min(max(seam, left + 1), right - 1)
            drivable[y, left:seam] = 1
            drivable[y, seam:right] = 2

    lane = np.zeros((h, w), dtype=np.int64)
    budget = int(0.08 * h * w)
    n_lines = rng.integers(1, 4)
    for _ in range(n_lines):
        width_px = int(rng.integers(2, 5))
        fx_top = rng.uniform(0.35, 0.65)
        fx_bot = rng.uniform(0.1, 0.9)
        cand = lane.copy()
        _draw_polyline(cand, y_h, h, fx_top * w, fx_bot * w, width_px)
        if cand.sum() <= budget:
            lane = cand

    img = np.empty((3, h, w), dtype=np.float32)
    sky = np.linspace(0.75, 0.55, h, dtype=np.float32).reshape(h, 1)
    img[0] = sky * 0.8
    img[1] = sky * 0.9
    img[2] = sky
    road_shade = rng.uniform(0.30, 0.42)
    road = drivable > 0
    img[:, road] = road_shade
    img[:, lane > 0] = 0.9
    img += rng.normal(0.0, 0.02, img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return Sample(img, drivable, lane)


def synth_dataset(n, seed, size=(64, 64), drivable_classes=2) -> Dataset:
    """Deterministic road-trapezoid scenes; the drivable mask is one
    connected region, lane pixels never exceed 10% of the frame."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size[0] % 16 or size[1] % 16:
        raise ValueError(f"size {size} must be divisible by 16")
    rng = np.random.default_rng(seed)
    samples = [synth_sample(rng, size, drivable_classes) for _ in range(n)]
    return Dataset(train=samples, val=list(samples), drivable_classes=drivable_classes)


def write_dataset(ds: Dataset, root) -> str:
    """Materialize a dataset as PPM/PGM files plus a manifest; returns the
    manifest path."""
    os.makedirs(root, exist_ok=True)
    lines = []
    idx = 0
    for split, samples in (("train", ds.train), ("val", ds.val)):
        for s in samples:
            img_p = os.path.join(root, f"{idx:04d}_img.ppm")
            drv_p = os.path.join(root, f"{idx:04d}_drv.pgm")
            lane_p = os.path.join(root, f"{idx:04d}_lane.pgm")
            write_pnm(img_p, (s.image.transpose(1, 2, 0) * 255.0).round().astype(np.uint8))
            save_mask(drv_p, s.drivable)
            save_mask(lane_p, s.lane)
            lines.append("\t".join((img_p, drv_p, lane_p, split)))
            idx += 1
    man = os.path.join(root, "manifest.tsv")
    with open(man, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return man

"""Dataset tooling: manifest ingestion, preprocessing, stats, synthesis.

The annotation manifest is JSON-lines, one record per image:
``{"image": path, "width": int, "height": int, "boxes": [{"class": int,
"cx": f, "cy": f, "w": f, "h": f}]}`` with normalized coordinates.  Image
I/O is deliberately limited to binary PPM (P6) and PGM (P5).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .geometry import Box


class ManifestError(ValueError):
    pass


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GtBox:
    """Normalized ground-truth box with class id."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def as_box(self) -> Box:
        return Box(self.cx, self.cy, self.w, self.h)


@dataclass
class ImageRecord:
    """Lazy sample descriptor; pixels load on demand."""

    image: str
    width: int
    height: int
    boxes: list[GtBox] = field(default_factory=list)


@dataclass
class DatasetStats:
    num_images: int
    num_classes: int
    avg_width: float
    avg_height: float
    avg_object_classes_per_image: float
    avg_object_scale: float  # mean over objects of sqrt(box area / image area)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


# ---------------------------------------------------------------------------
# PPM / PGM codec


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("truncated PPM/PGM header")
    return data[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read binary PPM (P6) or PGM (P5); returns uint8 [H,W,3] or [H,W]."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P6", b"P5"):
        raise ValueError(f"unsupported image magic {magic!r} (want P6/P5)")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise ValueError("truncated raster data")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3).copy()
    return arr.reshape(height, width).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write uint8 [H,W,3] as binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H,W,3], got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


def load_image(path) -> np.ndarray:
    """Load PPM/PGM as float32 [3,H,W] in [0,1] (gray is replicated)."""
    arr = read_ppm(path)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# manifest


def _box_in_range(b: GtBox) -> bool:
    eps = 1e-6
    if not (0.0 <= b.cx <= 1.0 and 0.0 <= b.cy <= 1.0):
        return False
    if not (0.0 <= b.w <= 1.0 and 0.0 <= b.h <= 1.0):
        return False
    return (b.cx - b.w / 2 >= -eps and b.cx + b.w / 2 <= 1 + eps
            and b.cy - b.h / 2 >= -eps and b.cy + b.h / 2 <= 1 + eps)


def load_manifest(path) -> list[ImageRecord]:
    """Parse a JSON-lines manifest; bad records are skipped with a warning."""
    records: list[ImageRecord] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"line {line_no}: malformed JSON: {e}") from None
            try:
                boxes = [GtBox(class_id=int(b["class"]), cx=float(b["cx"]),
                               cy=float(b["cy"]), w=float(b["w"]),
                               h=float(b["h"])) for b in obj.get("boxes", [])]
                rec = ImageRecord(image=str(obj["image"]),
                                  width=int(obj["width"]),
                                  height=int(obj["height"]), boxes=boxes)
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"line {line_no}: bad record: {e}") from None
            bad = [b for b in rec.boxes if not _box_in_range(b) or b.class_id < 0]
            if bad:
                skipped += 1
                warnings.warn(f"line {line_no}: out-of-range box {bad[0]}, "
                              f"record skipped", DataWarning, stacklevel=2)
                continue
            records.append(rec)
    if skipped:
        warnings.warn(f"{skipped} record(s) skipped while loading {path}",
                      DataWarning, stacklevel=2)
    return records


def save_manifest(records: list[ImageRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "image": rec.image, "width": rec.width, "height": rec.height,
                "boxes": [{"class": b.class_id, "cx": b.cx, "cy": b.cy,
                           "w": b.w, "h": b.h} for b in rec.boxes],
            }) + "\n")


# ---------------------------------------------------------------------------
# preprocessing


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of [C,H,W]; exact identity when sizes match."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    # pixel-center sampling: src = (dst + 0.5) * scale - 0.5
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def gaussian_blur3(image: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Separable 3x3 Gaussian with reflect padding; kernel sums to 1."""
    g = np.exp(-0.5 * np.array([1.0, 0.0, 1.0]) / (sigma * sigma))
    g /= g.sum()
    padded = np.pad(image, ((0, 0), (1, 1), (0, 0)), mode="reflect")
    out = padded[:, :-2] * g[0] + padded[:, 1:-1] * g[1] + padded[:, 2:] * g[2]
    padded = np.pad(out, ((0, 0), (0, 0), (1, 1)), mode="reflect")
    out = padded[:, :, :-2] * g[0] + padded[:, :, 1:-1] * g[1] + padded[:, :, 2:] * g[2]
    return out.astype(image.dtype)


def preprocess(image: np.ndarray, cfg: ModelConfig, denoise: bool = False,
               binarize: bool = False) -> np.ndarray:
    """Resize to the network input, optionally blur/binarize/standardize.

    Input is float [3,H,W] in [0,1]; normalized boxes are untouched by the
    square resize so no box transform is returned.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {image.shape}")
    out = bilinear_resize(image, cfg.input_size, cfg.input_size)
    if denoise:
        out = gaussian_blur3(out, sigma=1.0)
    if binarize:
        out = (out >= 0.5).astype(out.dtype)
    if cfg.mean is not None and cfg.std is not None:
        mean = np.asarray(cfg.mean, dtype=out.dtype)[:, None, None]
        std = np.asarray(cfg.std, dtype=out.dtype)[:, None, None]
        out = (out - mean) / std
    return out


def jitter_crop(image: np.ndarray, boxes: list[GtBox], jitter: float,
                rng: np.random.Generator) -> tuple[np.ndarray, list[GtBox]]:
    """Random crop/pad up to +-jitter per side; boxes are shifted, clamped,
    and dropped when their center leaves the frame.  Training-time only."""
    c, h, w = image.shape
    dx1, dx2, dy1, dy2 = (rng.uniform(-jitter, jitter) for _ in range(4))
    nx1, nx2 = dx1 * w, w + dx2 * w
    ny1, ny2 = dy1 * h, h + dy2 * h
    new_w, new_h = nx2 - nx1, ny2 - ny1
    out = np.full((c, int(round(new_h)), int(round(new_w))), 0.5,
                  dtype=image.dtype)
    sx1 = int(round(max(nx1, 0)))
    sy1 = int(round(max(ny1, 0)))
    sx2 = int(round(min(nx2, w)))
    sy2 = int(round(min(ny2, h)))
    ox = int(round(sx1 - nx1))
    oy = int(round(sy1 - ny1))
    out[:, oy:oy + (sy2 - sy1), ox:ox + (sx2 - sx1)] = image[:, sy1:sy2, sx1:sx2]

    kept: list[GtBox] = []
    for b in boxes:
        cx = (b.cx * w - nx1) / new_w
        cy = (b.cy * h - ny1) / new_h
        if not (0.0 <= cx < 1.0 and 0.0 <= cy < 1.0):
            continue
        bw = min(b.w * w / new_w, 1.0)
        bh = min(b.h * h / new_h, 1.0)
        kept.append(GtBox(b.class_id, cx, cy, bw, bh))
    return out, kept


# ---------------------------------------------------------------------------
# stats


def dataset_stats(records: list[ImageRecord]) -> DatasetStats:
    """Aggregate dataset-level statistics from manifest records."""
    if not records:
        return DatasetStats(0, 0, 0.0, 0.0, 0.0, 0.0)
    classes = {b.class_id for r in records for b in r.boxes}
    widths = [r.width for r in records]
    heights = [r.height for r in records]
    per_image_classes = [len({b.class_id for b in r.boxes}) for r in records]
    scales = [math.sqrt(b.w * b.h) for r in records for b in r.boxes]
    return DatasetStats(
        num_images=len(records),
        num_classes=len(classes),
        avg_width=float(np.mean(widths)),
        avg_height=float(np.mean(heights)),
        avg_object_classes_per_image=float(np.mean(per_image_classes)),
        avg_object_scale=float(np.mean(scales)) if scales else 0.0,
    )


# ---------------------------------------------------------------------------
# synthetic small-object dataset

SYNTH_CLASS_NAMES = ("square", "disk", "bar")
_SYNTH_COLORS = np.array([[230, 60, 50], [60, 220, 70], [70, 90, 235]],
                         dtype=np.uint8)


def _paint_object(img: np.ndarray, cls_id: int, x0: int, y0: int,
                  x1: int, y1: int) -> None:
    color = _SYNTH_COLORS[cls_id]
    if cls_id == 1:  # disk inside the bounding square
        h, w = y1 - y0 + 1, x1 - x0 + 1
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        mask = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
        img[y0:y1 + 1, x0:x1 + 1][mask] = color
    else:
        img[y0:y1 + 1, x0:x1 + 1] = color


def synth_small_objects(n_images: int, image_size: int, seed: int,
                        ) -> list[tuple[np.ndarray, list[GtBox]]]:
    """Generate noisy images with 1-4 planted shapes and exact boxes.

    Classes are square/disk/bar; at least half the objects per image have
    normalized scale <= 0.1.  Deterministic given the seed.
    """
    if image_size < 64 or image_size % 32 != 0:
        raise ValueError("image_size must be >= 64 and a multiple of 32")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_images):
        img = rng.integers(0, 64, (image_size, image_size, 3)).astype(np.uint8)
        n_obj = int(rng.integers(1, 5))
        boxes: list[GtBox] = []
        rects: list[tuple[int, int, int, int]] = []
        for obj_i in range(n_obj):
            small = obj_i < (n_obj + 1) // 2  # first half (rounded up) small
            cls_id = int(rng.integers(0, len(SYNTH_CLASS_NAMES)))
            scale = rng.uniform(0.05, 0.1) if small else rng.uniform(0.1, 0.3)
            side = scale * image_size
            if cls_id == 2:  # bar: elongated 3..5 : 1, random orientation
                ratio = rng.uniform(3.0, 5.0)
                bw, bh = side * math.sqrt(ratio), side / math.sqrt(ratio)
                if rng.random() < 0.5:
                    bw, bh = bh, bw
            else:
                bw = bh = side
            w_px = max(2, int(round(bw)))
            h_px = max(2, int(round(bh)))
            w_px = min(w_px, image_size - 2)
            h_px = min(h_px, image_size - 2)
            placed = None
            for _attempt in range(20):
                x0 = int(rng.integers(1, image_size - w_px))
                y0 = int(rng.integers(1, image_size - h_px))
                cand = (x0, y0, x0 + w_px - 1, y0 + h_px - 1)
                if all(_rect_iou(cand, r) < 0.2 for r in rects):
                    placed = cand
                    break
            if placed is None:
                continue
            rects.append(placed)
            x0, y0, x1, y1 = placed
            _paint_object(img, cls_id, x0, y0, x1, y1)
            boxes.append(GtBox(
                class_id=cls_id,
                cx=(x0 + x1 + 1) / 2.0 / image_size,
                cy=(y0 + y1 + 1) / 2.0 / image_size,
                w=(x1 - x0 + 1) / image_size,
                h=(y1 - y0 + 1) / image_size))
        out.append((img, boxes))
    return out


def _rect_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def write_synthetic_dataset(out_dir, n_images: int, image_size: int,
                            seed: int) -> Path:
    """Write PPM images plus manifest.jsonl; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, boxes) in enumerate(synth_small_objects(n_images, image_size,
                                                         seed)):
        name = f"synth_{i:04d}.ppm"
        write_ppm(out_dir / name, img)
        records.append(ImageRecord(image=str(out_dir / name), width=image_size,
                                   height=image_size, boxes=boxes))
    manifest = out_dir / "manifest.jsonl"
    save_manifest(records, manifest)
    return manifest


# ---------------------------------------------------------------------------
# box rendering (annotated PPM output)

_FONT = {  # 3x5 bitmap glyphs, rows top-down, 3-bit masks
    "0": (7, 5, 5, 5, 7), "1": (2, 6, 2, 2, 7), "2": (7, 1, 7, 4, 7),
    "3": (7, 1, 7, 1, 7), "4": (5, 5, 7, 1, 1), "5": (7, 4, 7, 1, 7),
    "6": (7, 4, 7, 5, 7), "7": (7, 1, 1, 2, 2), "8": (7, 5, 7, 5, 7),
    "9": (7, 5, 7, 1, 7), ".": (0, 0, 0, 0, 2), "-": (0, 0, 7, 0, 0),
    " ": (0, 0, 0, 0, 0), ":": (0, 2, 0, 2, 0),
    "A": (7, 5, 7, 5, 5), "B": (6, 5, 6, 5, 6), "C": (7, 4, 4, 4, 7),
    "D": (6, 5, 5, 5, 6), "E": (7, 4, 7, 4, 7), "F": (7, 4, 7, 4, 4),
    "G": (7, 4, 5, 5, 7), "H": (5, 5, 7, 5, 5), "I": (7, 2, 2, 2, 7),
    "J": (1, 1, 1, 5, 7), "K": (5, 6, 4, 6, 5), "L": (4, 4, 4, 4, 7),
    "M": (5, 7, 7, 5, 5), "N": (5, 7, 7, 7, 5), "O": (7, 5, 5, 5, 7),
    "P": (7, 5, 7, 4, 4), "Q": (7, 5, 5, 7, 1), "R": (7, 5, 7, 6, 5),
    "S": (7, 4, 7, 1, 7), "T": (7, 2, 2, 2, 2), "U": (5, 5, 5, 5, 7),
    "V": (5, 5, 5, 7, 2), "W": (5, 5, 7, 7, 5), "X": (5, 5, 2, 5, 5),
    "Y": (5, 5, 2, 2, 2), "Z": (7, 1, 2, 4, 7),
}


def class_color(class_id: int) -> tuple[int, int, int]:
    """Deterministic bright color per class id."""
    rng = np.random.default_rng(class_id * 7919 + 17)
    hue = rng.integers(0, 3)
    base = [60, 60, 60]
    base[hue] = 230
    base[(hue + 1 + int(rng.integers(0, 2))) % 3] = int(rng.integers(90, 200))
    return tuple(base)


def _draw_text(img: np.ndarray, x: int, y: int, text: str,
               color: tuple[int, int, int]) -> None:
    h, w, _ = img.shape
    for ch in text.upper():
        glyph = _FONT.get(ch, _FONT[" "])
        for row, bits in enumerate(glyph):
            for col in range(3):
                if bits & (4 >> col):
                    yy, xx = y + row, x + col
                    if 0 <= yy < h and 0 <= xx < w:
                        img[yy, xx] = color
        x += 4


def draw_detections(image: np.ndarray, detections, class_names=None,
                    thickness: int = 1) -> np.ndarray:
    """Burn box outlines and class labels into a uint8 [H,W,3] image copy."""
    img = np.asarray(image).copy()
    h, w, _ = img.shape
    for det in detections:
        color = class_color(det.class_id)
        x1 = int(np.clip(round(det.box.x1), 0, w - 1))
        y1 = int(np.clip(round(det.box.y1), 0, h - 1))
        x2 = int(np.clip(round(det.box.x2), 0, w - 1))
        y2 = int(np.clip(round(det.box.y2), 0, h - 1))
        for t in range(thickness):
            xa, ya = max(x1 - t, 0), max(y1 - t, 0)
            xb, yb = min(x2 + t, w - 1), min(y2 + t, h - 1)
            img[ya, xa:xb + 1] = color
            img[yb, xa:xb + 1] = color
            img[ya:yb + 1, xa] = color
            img[ya:yb + 1, xb] = color
        name = (class_names or {}).get(det.class_id, str(det.class_id)) \
            if not isinstance(class_names, (list, tuple)) \
            else class_names[det.class_id]
        _draw_text(img, x1 + 2, max(y1 - 6, 0), f"{name} {det.score:.2f}", color)
    return img

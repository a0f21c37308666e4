"""Box types, coordinate conversions, and IoU primitives.

Boxes are closed real rectangles; areas carry no pixel-grid +1 correction so
the same geometry is valid inside the loss, the matcher, and the evaluator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class BoxConvention(Enum):
    """Units of a center-format :class:`Box`."""

    NORMALIZED = "normalized"  # cx, cy, w, h are fractions of image size
    PIXEL = "pixel"  # cx, cy, w, h are pixels


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in center format (cx, cy, w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class CornerBox:
    """Axis-aligned rectangle as pixel corners (x1, y1) .. (x2, y2), x1 <= x2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite coordinate: {v!r}")


def to_corner(b: Box, image_w: float, image_h: float,
              convention: BoxConvention = BoxConvention.NORMALIZED) -> CornerBox:
    """Convert a center-format box to pixel corners.

    ``convention`` selects the units of ``b``: normalized boxes are scaled by
    the image size, pixel boxes pass through.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    _check_finite(b.cx, b.cy, b.w, b.h)
    sx, sy = (image_w, image_h) if convention is BoxConvention.NORMALIZED else (1.0, 1.0)
    cx, cy, w, h = b.cx * sx, b.cy * sy, b.w * sx, b.h * sy
    return CornerBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def from_corner(cb: CornerBox, image_w: float, image_h: float,
                convention: BoxConvention = BoxConvention.NORMALIZED) -> Box:
    """Inverse of :func:`to_corner` (identity round-trip up to float epsilon)."""
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    _check_finite(cb.x1, cb.y1, cb.x2, cb.y2)
    sx, sy = (image_w, image_h) if convention is BoxConvention.NORMALIZED else (1.0, 1.0)
    return Box((cb.x1 + cb.x2) / 2.0 / sx, (cb.y1 + cb.y2) / 2.0 / sy,
               (cb.x2 - cb.x1) / sx, (cb.y2 - cb.y1) / sy)


def clamp_to_image(cb: CornerBox, image_w: float, image_h: float) -> CornerBox:
    """Clip a corner box to the image rectangle (output-time only)."""
    return CornerBox(min(max(cb.x1, 0.0), image_w), min(max(cb.y1, 0.0), image_h),
                     min(max(cb.x2, 0.0), image_w), min(max(cb.y2, 0.0), image_h))


def iou(a: CornerBox, b: CornerBox) -> float:
    """Intersection over union of two corner boxes; 0 when the union is empty."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def wh_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """IoU of two boxes co-centered at the origin, given only (w, h) pairs."""
    wa, ha = a
    wb, hb = b
    if wa < 0 or ha < 0 or wb < 0 or hb < 0:
        raise ValueError("box dimensions must be >= 0")
    inter = min(wa, wb) * min(ha, hb)
    union = wa * ha + wb * hb - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def wh_iou_matrix(wh_a: np.ndarray, wh_b: np.ndarray) -> np.ndarray:
    """Pairwise co-centered IoU. ``wh_a`` is [N,2], ``wh_b`` is [M,2] -> [N,M]."""
    wh_a = np.asarray(wh_a, dtype=np.float64)[:, None, :]  # [N,1,2]
    wh_b = np.asarray(wh_b, dtype=np.float64)[None, :, :]  # [1,M,2]
    inter = np.minimum(wh_a, wh_b).prod(axis=2)
    union = wh_a.prod(axis=2) + wh_b.prod(axis=2) - inter
    out = np.zeros(inter.shape, dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner boxes. ``a`` is [N,4], ``b`` is [M,4] -> [N,M]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros(inter.shape, dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out

"""Per-class greedy non-maximum suppression and the full post-process path.

This is the latency-critical stage: decode, threshold, and NMS compose into
``postprocess``, which is what the frame-rate benchmark times on full-size
candidate streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet, anchor_set_from_config
from .config import ModelConfig
from .decode import ScoredCandidates, fast_threshold_scale
from .geometry import CornerBox
from .network import RawPredictions
from .tensor import Tensor


@dataclass(frozen=True)
class Detection:
    """Final detection: class, score, and pixel corner box."""

    class_id: int
    score: float
    box: CornerBox


def _sort_order(boxes_xyxy: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Score-descending order; ties broken by smaller area, then input order."""
    areas = np.clip(boxes_xyxy[:, 2] - boxes_xyxy[:, 0], 0, None) \
        * np.clip(boxes_xyxy[:, 3] - boxes_xyxy[:, 1], 0, None)
    return np.lexsort((np.arange(len(scores)), areas, -scores))


def nms_indices(boxes_xyxy: np.ndarray, scores: np.ndarray,
                class_ids: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy per-class NMS over corner boxes; returns kept indices in
    score-descending output order."""
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = _sort_order(boxes_xyxy, scores)
    x1, y1, x2, y2 = (boxes_xyxy[:, i] for i in range(4))
    areas = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)

    kept: list[int] = []
    for c in np.unique(class_ids):
        cand = order[class_ids[order] == c]
        while cand.size > 0:
            i = cand[0]
            kept.append(int(i))
            rest = cand[1:]
            if rest.size == 0:
                break
            ix1 = np.maximum(x1[i], x1[rest])
            iy1 = np.maximum(y1[i], y1[rest])
            ix2 = np.minimum(x2[i], x2[rest])
            iy2 = np.minimum(y2[i], y2[rest])
            inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
            union = areas[i] + areas[rest] - inter
            iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
            cand = rest[iou <= iou_threshold]
    kept_arr = np.array(kept, dtype=np.int64)
    # deterministic cross-class output order: same tie rules as the sort
    return kept_arr[_sort_order(boxes_xyxy[kept_arr], scores[kept_arr])]


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class NMS on a detection list; output score-descending."""
    if not dets:
        return []
    boxes = np.array([[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in dets])
    scores = np.array([d.score for d in dets])
    class_ids = np.array([d.class_id for d in dets])
    keep = nms_indices(boxes, scores, class_ids, iou_threshold)
    return [dets[i] for i in keep]


def _cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    half_w = boxes[:, 2] / 2.0
    half_h = boxes[:, 3] / 2.0
    return np.stack([boxes[:, 0] - half_w, boxes[:, 1] - half_h,
                     boxes[:, 0] + half_w, boxes[:, 1] + half_h], axis=-1)


def detections_from_scored(scored: ScoredCandidates,
                           iou_threshold: float) -> list[Detection]:
    """Run NMS on threshold survivors and wrap as Detection objects."""
    xyxy = _cxcywh_to_xyxy(scored.boxes)
    keep = nms_indices(xyxy, scored.scores, scored.class_ids, iou_threshold)
    return [Detection(class_id=int(scored.class_ids[i]),
                      score=float(scored.scores[i]),
                      box=CornerBox(*map(float, xyxy[i])))
            for i in keep]


def _single_image_maps(raw, image_index: int) -> list[np.ndarray]:
    if isinstance(raw, RawPredictions):
        return [m.data[image_index] for m in raw.maps]
    out = []
    for m in raw:
        data = m.data if isinstance(m, Tensor) else np.asarray(m)
        out.append(data[image_index] if data.ndim == 4 else data)
    return out


def postprocess(raw, cfg: ModelConfig, conf_threshold: float = 0.25,
                iou_threshold: float = 0.45, anchor_set: AnchorSet | None = None,
                image_index: int = 0) -> list[Detection]:
    """decode -> threshold -> NMS for one image; deterministic.

    ``raw`` may be a RawPredictions batch or a list of per-scale maps.
    Anchors default to the ones embedded in the config.
    """
    if anchor_set is None:
        anchor_set = anchor_set_from_config(cfg)
    maps = _single_image_maps(raw, image_index)
    if len(maps) != cfg.num_scales:
        raise ValueError(f"{len(maps)} raw maps for {cfg.num_scales} scales")
    parts = [fast_threshold_scale(m, anchor_set.for_scale(s), cfg.strides[s],
                                  cfg.input_size, conf_threshold, scale_index=s)
             for s, m in enumerate(maps)]
    nonempty = [p for p in parts if len(p)]
    if not nonempty:
        return []
    merged = ScoredCandidates(
        *[np.concatenate([getattr(p, f) for p in nonempty])
          for f in ("boxes", "scores", "class_ids", "objectness",
                    "scale_index", "cells", "anchor_slots")])
    return detections_from_scored(merged, iou_threshold)

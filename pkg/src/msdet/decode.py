"""Raw head outputs -> candidate boxes -> confidence thresholding.

Candidates are kept in structure-of-arrays batches; per-candidate objects are
materialized on demand.  Flattening order within a scale is (anchor, row,
column), and scales concatenate in config order, so downstream stages see a
stable, deterministic candidate stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import Anchor, AnchorSet
from .config import ModelConfig
from .geometry import Box
from .network import RawPredictions
from .tensor import Tensor, sigmoid_array


@dataclass(frozen=True)
class Candidate:
    """One decoded box with provenance (scale, cell, anchor slot)."""

    box: Box  # pixel center format
    objectness: float
    class_scores: np.ndarray  # [K] in [0,1]
    scale_index: int
    cell: tuple[int, int]  # (column, row)
    anchor_index: int  # slot within the scale's mask


@dataclass
class CandidateBatch:
    """All decoded candidates of one scale, as arrays of length A*S*S."""

    boxes: np.ndarray  # [M,4] cx, cy, w, h in pixels
    objectness: np.ndarray  # [M]
    class_scores: np.ndarray  # [M,K]
    scale_index: int
    cells: np.ndarray  # [M,2] (column, row)
    anchor_slots: np.ndarray  # [M]

    def __len__(self) -> int:
        return len(self.boxes)

    def candidate(self, i: int) -> Candidate:
        return Candidate(box=Box(*map(float, self.boxes[i])),
                         objectness=float(self.objectness[i]),
                         class_scores=self.class_scores[i].copy(),
                         scale_index=self.scale_index,
                         cell=(int(self.cells[i, 0]), int(self.cells[i, 1])),
                         anchor_index=int(self.anchor_slots[i]))

    def __iter__(self):
        return (self.candidate(i) for i in range(len(self)))


@dataclass
class ScoredCandidates:
    """Threshold survivors with final score and class assignment."""

    boxes: np.ndarray  # [M,4] cx, cy, w, h pixels
    scores: np.ndarray  # [M] objectness * best class score
    class_ids: np.ndarray  # [M]
    objectness: np.ndarray  # [M]
    scale_index: np.ndarray  # [M]
    cells: np.ndarray  # [M,2]
    anchor_slots: np.ndarray  # [M]

    def __len__(self) -> int:
        return len(self.boxes)


def _empty_scored(k: int) -> ScoredCandidates:
    return ScoredCandidates(boxes=np.zeros((0, 4)), scores=np.zeros(0),
                            class_ids=np.zeros(0, dtype=np.int64),
                            objectness=np.zeros(0),
                            scale_index=np.zeros(0, dtype=np.int64),
                            cells=np.zeros((0, 2), dtype=np.int64),
                            anchor_slots=np.zeros(0, dtype=np.int64))


def _decode_boxes(view: np.ndarray, anchors: list[Anchor],
                  stride: int) -> tuple[np.ndarray, ...]:
    """Box decode on [A, 5+K, S, S] raw: sigmoid offsets, exponential sizes."""
    a_per, _, size, _ = view.shape
    cols = np.arange(size, dtype=view.dtype)
    b_x = (sigmoid_array(view[:, 0]) + cols[None, None, :]) * stride
    b_y = (sigmoid_array(view[:, 1]) + cols[None, :, None]) * stride
    p_w = np.array([a.p_w for a in anchors], dtype=view.dtype)[:, None, None]
    p_h = np.array([a.p_h for a in anchors], dtype=view.dtype)[:, None, None]
    b_w = p_w * np.exp(view[:, 2])
    b_h = p_h * np.exp(view[:, 3])
    return b_x, b_y, b_w, b_h


def _as_view(raw_map, n_anchors: int) -> np.ndarray:
    data = raw_map.data if isinstance(raw_map, Tensor) else np.asarray(raw_map)
    if data.ndim != 3:
        raise ValueError(f"expected [C,S,S] raw map, got shape {data.shape}")
    c, size, size2 = data.shape
    if size != size2 or c % n_anchors != 0 or c // n_anchors < 6:
        raise ValueError(f"raw map shape {data.shape} inconsistent with "
                         f"{n_anchors} anchors")
    return data.reshape(n_anchors, c // n_anchors, size, size)


def decode_scale(raw_map, anchors_for_scale: list[Anchor], stride: int,
                 input_size: int, scale_index: int = 0) -> CandidateBatch:
    """Decode one scale's raw map into all A*S*S candidates."""
    view = _as_view(raw_map, len(anchors_for_scale))
    a_per, ck, size, _ = view.shape
    if size * stride != input_size:
        raise ValueError(f"grid {size} x stride {stride} != input {input_size}")
    b_x, b_y, b_w, b_h = _decode_boxes(view, anchors_for_scale, stride)
    objectness = sigmoid_array(view[:, 4])
    class_scores = sigmoid_array(view[:, 5:])  # [A,K,S,S]

    m = a_per * size * size
    boxes = np.stack([b_x, b_y, b_w, b_h], axis=-1).reshape(m, 4)
    k = ck - 5
    scores = np.moveaxis(class_scores, 1, -1).reshape(m, k)
    jj, ii = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cells = np.broadcast_to(np.stack([ii, jj], axis=-1),
                            (a_per, size, size, 2)).reshape(m, 2)
    slots = np.repeat(np.arange(a_per), size * size)
    return CandidateBatch(boxes=boxes, objectness=objectness.reshape(m),
                          class_scores=scores, scale_index=scale_index,
                          cells=np.ascontiguousarray(cells),
                          anchor_slots=slots)


def decode_all(raw: RawPredictions, anchor_set: AnchorSet,
               image_index: int = 0) -> list[CandidateBatch]:
    """Decode every scale of one image from a batched forward pass."""
    batches = []
    for s, m in enumerate(raw.maps):
        batches.append(decode_scale(m.data[image_index],
                                    anchor_set.for_scale(s),
                                    raw.strides[s], raw.input_size,
                                    scale_index=s))
    return batches


def candidate_count(cfg: ModelConfig) -> int:
    """Total candidates per image: sum over scales of A * S^2."""
    return sum(cfg.anchors_per_scale * s * s for s in cfg.grid_sizes())


def threshold(batches: CandidateBatch | list[CandidateBatch],
              conf_threshold: float) -> ScoredCandidates:
    """Assign classes and keep candidates with score >= the threshold.

    The final score is objectness times the best class score; order is
    preserved (stable within and across scales).
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    if isinstance(batches, CandidateBatch):
        batches = [batches]
    if not batches:
        return _empty_scored(0)
    parts = []
    for b in batches:
        if len(b) == 0:
            continue
        best_cls = b.class_scores.argmax(axis=1)
        best_score = b.class_scores[np.arange(len(b)), best_cls]
        score = b.objectness * best_score
        keep = score >= conf_threshold
        parts.append(ScoredCandidates(
            boxes=b.boxes[keep], scores=score[keep],
            class_ids=best_cls[keep], objectness=b.objectness[keep],
            scale_index=np.full(int(keep.sum()), b.scale_index, dtype=np.int64),
            cells=b.cells[keep], anchor_slots=b.anchor_slots[keep]))
    if not parts:
        return _empty_scored(0)
    return ScoredCandidates(*[np.concatenate([getattr(p, f) for p in parts])
                              for f in ("boxes", "scores", "class_ids",
                                        "objectness", "scale_index", "cells",
                                        "anchor_slots")])


def fast_threshold_scale(raw_map, anchors_for_scale: list[Anchor], stride: int,
                         input_size: int, conf_threshold: float,
                         scale_index: int = 0) -> ScoredCandidates:
    """Decode + threshold one scale without materializing class scores.

    Since the final score is bounded by objectness, candidates below the
    threshold on objectness alone are pruned before their class vectors are
    touched; survivors get the identical score/argmax as the plain path.
    """
    view = _as_view(raw_map, len(anchors_for_scale))
    a_per, ck, size, _ = view.shape
    if size * stride != input_size:
        raise ValueError(f"grid {size} x stride {stride} != input {input_size}")
    b_x, b_y, b_w, b_h = _decode_boxes(view, anchors_for_scale, stride)
    objectness = sigmoid_array(view[:, 4])  # [A,S,S]

    prefilter = objectness >= conf_threshold
    ia, ja, iw = np.nonzero(prefilter)
    if len(ia) == 0:
        return _empty_scored(ck - 5)
    logits = view[:, 5:][ia, :, ja, iw]  # [M,K]
    cls_scores = sigmoid_array(logits)
    best_cls = cls_scores.argmax(axis=1)
    best_score = cls_scores[np.arange(len(ia)), best_cls]
    score = objectness[ia, ja, iw] * best_score
    keep = score >= conf_threshold

    ia, ja, iw = ia[keep], ja[keep], iw[keep]
    boxes = np.stack([b_x[ia, ja, iw], b_y[ia, ja, iw],
                      b_w[ia, ja, iw], b_h[ia, ja, iw]], axis=-1)
    return ScoredCandidates(
        boxes=boxes, scores=score[keep], class_ids=best_cls[keep],
        objectness=objectness[ia, ja, iw],
        scale_index=np.full(len(ia), scale_index, dtype=np.int64),
        cells=np.stack([iw, ja], axis=-1).astype(np.int64),
        anchor_slots=ia.astype(np.int64))

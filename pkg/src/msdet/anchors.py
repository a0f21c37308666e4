"""Anchor priors: k-means clustering of box shapes in 1-IoU space.

Centroids are updated with per-cluster medians (robust to long-tailed box
size distributions); an update is kept only if it does not increase that
cluster's within-cluster distance, which makes the total objective provably
non-increasing across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .geometry import wh_iou_matrix

MAX_ITERATIONS = 300


@dataclass(frozen=True)
class Anchor:
    """Prior box dimensions in pixels."""

    p_w: float
    p_h: float

    def area(self) -> float:
        return self.p_w * self.p_h


@dataclass
class AnchorSet:
    """Anchors sorted ascending by area, partitioned into per-scale masks.

    ``masks[0]`` belongs to the coarsest grid (largest stride) and holds the
    largest-area group; the finest grid gets the smallest anchors.
    """

    anchors: list[Anchor]
    masks: list[list[int]]

    def __post_init__(self):
        for a in self.anchors:
            if a.p_w <= 0 or a.p_h <= 0:
                raise ValueError(f"anchor dimensions must be > 0, got {a}")
        areas = [a.area() for a in self.anchors]
        if any(b < a for a, b in zip(areas, areas[1:])):
            raise ValueError("anchors must be sorted ascending by area")
        flat = sorted(i for m in self.masks for i in m)
        if flat != list(range(len(self.anchors))):
            raise ValueError("masks must partition the anchor index range")

    def __len__(self) -> int:
        return len(self.anchors)

    def as_array(self) -> np.ndarray:
        return np.array([[a.p_w, a.p_h] for a in self.anchors], dtype=np.float64)

    def for_scale(self, scale_index: int) -> list[Anchor]:
        return [self.anchors[i] for i in self.masks[scale_index]]

    def scale_of_anchor(self, anchor_index: int) -> tuple[int, int]:
        """Map a global anchor index to (scale_index, slot within mask)."""
        for s, mask in enumerate(self.masks):
            if anchor_index in mask:
                return s, mask.index(anchor_index)
        raise IndexError(f"anchor index {anchor_index} not in any mask")


def make_masks(n_anchors: int, anchors_per_scale: int) -> list[list[int]]:
    """Partition area-sorted indices into per-scale groups, coarsest first."""
    if n_anchors % anchors_per_scale != 0:
        raise ValueError(f"{n_anchors} anchors do not divide into groups "
                         f"of {anchors_per_scale}")
    n_scales = n_anchors // anchors_per_scale
    groups = [list(range(i * anchors_per_scale, (i + 1) * anchors_per_scale))
              for i in range(n_scales)]
    return groups[::-1]  # largest-area group first (largest stride)


def anchor_set_from_wh(wh: np.ndarray, anchors_per_scale: int) -> AnchorSet:
    """Build an area-sorted AnchorSet with masks from raw (w, h) rows."""
    wh = np.asarray(wh, dtype=np.float64)
    order = np.argsort(wh[:, 0] * wh[:, 1], kind="stable")
    anchors = [Anchor(float(w), float(h)) for w, h in wh[order]]
    return AnchorSet(anchors=anchors,
                     masks=make_masks(len(anchors), anchors_per_scale))


def anchor_set_from_config(cfg: ModelConfig) -> AnchorSet:
    """Materialize the anchors embedded in a config (``anchors=`` key)."""
    if cfg.anchors is None:
        raise ValueError("config carries no anchors; add an 'anchors=' key or "
                         "pass an AnchorSet computed by k-means")
    anchors = [Anchor(float(w), float(h)) for w, h in cfg.anchors]
    return AnchorSet(anchors=anchors, masks=[list(m) for m in cfg.masks])


def _objective(wh: np.ndarray, centroids: np.ndarray,
               assignment: np.ndarray) -> float:
    iou = wh_iou_matrix(wh, centroids)
    return float((1.0 - iou[np.arange(len(wh)), assignment]).sum())


def _plusplus_init(wh: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with squared 1-IoU distances as weights."""
    n = len(wh)
    centroids = np.empty((k, 2), dtype=np.float64)
    centroids[0] = wh[rng.integers(n)]
    d = (1.0 - wh_iou_matrix(wh, centroids[:1])[:, 0]) ** 2
    for i in range(1, k):
        total = d.sum()
        if total <= 0:
            centroids[i:] = wh[rng.integers(n, size=k - i)]
            break
        probs = d / total
        centroids[i] = wh[rng.choice(n, p=probs)]
        d_new = (1.0 - wh_iou_matrix(wh, centroids[i:i + 1])[:, 0]) ** 2
        d = np.minimum(d, d_new)
    return centroids


N_RESTARTS = 8


def _lloyd_run(wh: np.ndarray, k: int, rng: np.random.Generator,
               ) -> tuple[np.ndarray, float]:
    centroids = _plusplus_init(wh, k, rng)
    assignment = np.argmin(1.0 - wh_iou_matrix(wh, centroids), axis=1)
    best_obj = _objective(wh, centroids, assignment)

    for _ in range(MAX_ITERATIONS):
        for ci in range(k):
            members = wh[assignment == ci]
            if len(members) == 0:
                # re-seed dead centroid at the worst-served box; its cluster
                # is empty so the objective cannot rise
                worst = np.argmax(1.0 - wh_iou_matrix(
                    wh, centroids)[np.arange(len(wh)), assignment])
                centroids[ci] = wh[worst]
                continue
            candidate = np.median(members, axis=0)
            old_d = (1.0 - wh_iou_matrix(members, centroids[ci:ci + 1])[:, 0]).sum()
            new_d = (1.0 - wh_iou_matrix(members, candidate[None, :])[:, 0]).sum()
            if new_d <= old_d:
                centroids[ci] = candidate
        new_assignment = np.argmin(1.0 - wh_iou_matrix(wh, centroids), axis=1)
        obj = _objective(wh, centroids, new_assignment)
        assert obj <= best_obj + 1e-9, \
            f"objective increased: {best_obj} -> {obj}"
        best_obj = obj
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    return centroids, best_obj


def kmeans_anchors(boxes, k: int, seed: int,
                   anchors_per_scale: int = 5) -> AnchorSet:
    """Cluster (w, h) pairs into ``k`` anchors by Lloyd iteration in 1-IoU space.

    ``boxes`` is a sequence of (w, h) in pixels.  Runs several restarts and
    keeps the lowest-objective result; deterministic given ``seed``.
    """
    wh = np.asarray(list(boxes), dtype=np.float64)
    if wh.ndim != 2 or wh.shape[1] != 2 or len(wh) == 0:
        raise ValueError("boxes must be a non-empty sequence of (w, h) pairs")
    if np.any(wh <= 0):
        raise ValueError("all box dimensions must be > 0")
    if len(wh) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(wh)}")

    best_centroids, best_obj = None, float("inf")
    for restart in range(N_RESTARTS):
        rng = np.random.default_rng([seed, restart])
        centroids, obj = _lloyd_run(wh, k, rng)
        if obj < best_obj:
            best_centroids, best_obj = centroids, obj
    return anchor_set_from_wh(best_centroids, anchors_per_scale)


def mean_best_iou(boxes, anchor_set: AnchorSet) -> float:
    """Mean over boxes of the best co-centered IoU against any anchor."""
    wh = np.asarray(list(boxes), dtype=np.float64)
    if len(wh) == 0 or len(anchor_set) == 0:
        raise ValueError("boxes and anchors must be non-empty")
    iou = wh_iou_matrix(wh, anchor_set.as_array())
    return float(iou.max(axis=1).mean())

"""Ground-truth to training-target conversion.

Each ground-truth box is owned by exactly one (scale, cell, anchor) slot: the
anchor with the best shape IoU picks the scale through the mask arithmetic,
and the grid cell containing the box center picks the slot.  Anchors whose
shape IoU with any ground truth exceeds the ignore threshold form an ignore
band that receives neither positive nor negative confidence loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .anchors import AnchorSet
from .config import ModelConfig
from .geometry import Box, wh_iou_matrix


class AssignWarning(UserWarning):
    pass


@dataclass
class ScaleTarget:
    """Targets for one detection scale; arrays are [A,S,S] ([A,S,S,K] for cls)."""

    obj_mask: np.ndarray
    noobj_mask: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    tw: np.ndarray
    th: np.ndarray
    cls: np.ndarray


@dataclass
class TargetTensor:
    """Per-scale assignment of ground truth for a single image."""

    scales: list[ScaleTarget]
    num_assigned: int

    def total_obj(self) -> int:
        return int(sum(s.obj_mask.sum() for s in self.scales))


def assign_targets(gt: list[tuple[Box, int]], anchor_set: AnchorSet,
                   cfg: ModelConfig) -> TargetTensor:
    """Build per-scale targets from normalized ground-truth boxes.

    ``gt`` is a list of (box, class_id) with normalized coordinates.  A center
    exactly on the 1.0 boundary is clamped into the last cell.  When two boxes
    claim the same slot the larger-area box wins and the loser falls back to
    its next-best anchor; a box whose anchors are all taken is dropped with a
    warning.  Anchors with shape IoU above ``truth_threshold`` against a box
    (strictly above, so the default 1.0 disables it) gain duplicate positives.
    """
    n_scales = cfg.num_scales
    grid = cfg.grid_sizes()
    a_per = cfg.anchors_per_scale
    k_cls = cfg.num_classes
    targets = [ScaleTarget(
        obj_mask=np.zeros((a_per, s, s), dtype=np.float32),
        noobj_mask=np.ones((a_per, s, s), dtype=np.float32),
        tx=np.zeros((a_per, s, s), dtype=np.float32),
        ty=np.zeros((a_per, s, s), dtype=np.float32),
        tw=np.zeros((a_per, s, s), dtype=np.float32),
        th=np.zeros((a_per, s, s), dtype=np.float32),
        cls=np.zeros((a_per, s, s, k_cls), dtype=np.float32),
    ) for s in grid]
    if not gt:
        return TargetTensor(scales=targets, num_assigned=0)

    for box, cls_id in gt:
        if not 0 <= cls_id < k_cls:
            raise ValueError(f"class id {cls_id} out of range [0, {k_cls})")
        if box.w < 0 or box.h < 0:
            raise ValueError(f"invalid box dimensions: {box}")

    anchor_wh = anchor_set.as_array()  # [n_anchors, 2]
    scale_of = np.empty(len(anchor_set), dtype=np.int64)
    slot_of = np.empty(len(anchor_set), dtype=np.int64)
    for s, mask in enumerate(anchor_set.masks):
        for slot, g in enumerate(mask):
            scale_of[g] = s
            slot_of[g] = slot

    input_size = cfg.input_size
    gt_wh_px = np.array([[b.w * input_size, b.h * input_size]
                         for b, _ in gt], dtype=np.float64)
    iou = wh_iou_matrix(gt_wh_px, anchor_wh)  # [n_gt, n_anchors]

    def place(gi: int, g_anchor: int) -> None:
        box, cls_id = gt[gi]
        s = int(scale_of[g_anchor])
        a = int(slot_of[g_anchor])
        size = grid[s]
        ci = min(int(box.cx * size), size - 1)
        cj = min(int(box.cy * size), size - 1)
        t = targets[s]
        t.obj_mask[a, cj, ci] = 1.0
        t.noobj_mask[a, cj, ci] = 0.0
        t.tx[a, cj, ci] = box.cx * size - ci
        t.ty[a, cj, ci] = box.cy * size - cj
        t.tw[a, cj, ci] = math.log(gt_wh_px[gi, 0] / anchor_wh[g_anchor, 0])
        t.th[a, cj, ci] = math.log(gt_wh_px[gi, 1] / anchor_wh[g_anchor, 1])
        t.cls[a, cj, ci, :] = 0.0
        t.cls[a, cj, ci, cls_id] = 1.0

    def slot_taken(gi: int, g_anchor: int) -> bool:
        box = gt[gi][0]
        s = int(scale_of[g_anchor])
        a = int(slot_of[g_anchor])
        size = grid[s]
        ci = min(int(box.cx * size), size - 1)
        cj = min(int(box.cy * size), size - 1)
        return targets[s].obj_mask[a, cj, ci] == 1.0

    # larger boxes claim slots first; losers re-route to their next-best anchor
    order = sorted(range(len(gt)), key=lambda gi: -gt[gi][0].area())
    num_assigned = 0
    for gi in order:
        ranking = np.argsort(-iou[gi], kind="stable")
        placed = False
        for g_anchor in ranking:
            if slot_taken(gi, int(g_anchor)):
                continue
            place(gi, int(g_anchor))
            placed = True
            num_assigned += 1
            break
        if not placed:
            warnings.warn(f"ground-truth box {gi} dropped: every anchor slot "
                          f"at its cells is already claimed", AssignWarning,
                          stacklevel=2)
            continue
        if cfg.truth_threshold < 1.0:
            best = int(ranking[0])
            for g_anchor in ranking[1:]:
                g_anchor = int(g_anchor)
                if g_anchor == best or iou[gi, g_anchor] <= cfg.truth_threshold:
                    continue
                if not slot_taken(gi, g_anchor):
                    place(gi, g_anchor)

    # ignore band: anchor shapes overlapping some gt above the threshold get
    # neither positive nor negative confidence signal
    over = iou.max(axis=0) > cfg.ignore_threshold  # [n_anchors]
    for g_anchor in np.nonzero(over)[0]:
        s = int(scale_of[g_anchor])
        a = int(slot_of[g_anchor])
        targets[s].noobj_mask[a] = 0.0

    # responsible slots always keep noobj = 0 (set above); re-assert obj slots
    for t in targets:
        t.noobj_mask[t.obj_mask == 1.0] = 0.0

    return TargetTensor(scales=targets, num_assigned=num_assigned)


_BIG_LOGIT = 200.0  # saturates sigmoid to exactly 1.0; to exactly 0.0 in f32


def targets_to_raw(targets: TargetTensor, cfg: ModelConfig,
                   dtype=np.float64) -> list[np.ndarray]:
    """Encode targets as raw head maps that decode back to the ground truth.

    Inverse construction used by tests and synthetic pipelines: offsets go
    through a clamped logit, log-scale sizes pass through unchanged, and
    objectness/class channels are driven to saturation.
    """
    eps = 1e-9
    maps = []
    for s, t in enumerate(targets.scales):
        a_per, size, _ = t.obj_mask.shape
        raw = np.zeros((a_per, 5 + cfg.num_classes, size, size), dtype=dtype)
        raw[:, 4] = -_BIG_LOGIT
        raw[:, 5:] = -_BIG_LOGIT
        obj = t.obj_mask == 1.0
        tx = np.clip(t.tx.astype(dtype), eps, 1.0 - eps)
        ty = np.clip(t.ty.astype(dtype), eps, 1.0 - eps)
        raw[:, 0][obj] = np.log(tx[obj] / (1.0 - tx[obj]))
        raw[:, 1][obj] = np.log(ty[obj] / (1.0 - ty[obj]))
        raw[:, 2][obj] = t.tw[obj]
        raw[:, 3][obj] = t.th[obj]
        raw[:, 4][obj] = _BIG_LOGIT
        cls_plane = np.moveaxis(raw[:, 5:], 1, -1)  # [A,S,S,K] view
        cls_plane[t.cls == 1.0] = _BIG_LOGIT
        maps.append(raw.reshape(a_per * (5 + cfg.num_classes), size, size))
    return maps

import math

import numpy as np
import pytest

from msdet.anchors import Anchor, AnchorSet, anchor_set_from_config
from msdet.assign import AssignWarning, assign_targets, targets_to_raw
from msdet.config import parse_config
from msdet.decode import decode_scale
from msdet.geometry import Box, wh_iou
from test_config import paper_text, tiny_text


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(tiny_text())


@pytest.fixture(scope="module")
def tiny_anchors(tiny_cfg):
    return anchor_set_from_config(tiny_cfg)


@pytest.fixture(scope="module")
def paper_cfg():
    return parse_config(paper_text())


@pytest.fixture(scope="module")
def paper_anchors(paper_cfg):
    return anchor_set_from_config(paper_cfg)


def test_cell_floor_arithmetic(paper_cfg, paper_anchors):
    # center (100/416, 250/416) on the stride-32 grid lands in cell (3, 7)
    big = paper_anchors.anchors[24]  # force stride-32 ownership via size
    gt = [(Box(100 / 416, 250 / 416, big.p_w / 416, big.p_h / 416), 0)]
    targets = assign_targets(gt, paper_anchors, paper_cfg)
    t = targets.scales[0]  # stride 32
    slot = paper_anchors.masks[0].index(24)
    assert t.obj_mask[slot, 7, 3] == 1.0
    assert targets.total_obj() == 1


def test_anchor_exact_match_targets(tiny_cfg, tiny_anchors):
    # gt equal to an anchor, centered in a cell: tx = ty = 0.5, tw = th = 0
    a = tiny_anchors.anchors[5]
    scale, slot = tiny_anchors.scale_of_anchor(5)
    size = tiny_cfg.grid_sizes()[scale]
    cx = (2 + 0.5) / size
    cy = (3 + 0.5) / size
    gt = [(Box(cx, cy, a.p_w / 64, a.p_h / 64), 1)]
    targets = assign_targets(gt, tiny_anchors, tiny_cfg)
    t = targets.scales[scale]
    assert t.obj_mask[slot, 3, 2] == 1.0
    assert t.tx[slot, 3, 2] == pytest.approx(0.5)
    assert t.ty[slot, 3, 2] == pytest.approx(0.5)
    assert t.tw[slot, 3, 2] == pytest.approx(0.0, abs=1e-6)
    assert t.th[slot, 3, 2] == pytest.approx(0.0, abs=1e-6)
    assert t.cls[slot, 3, 2, 1] == 1.0 and t.cls[slot, 3, 2].sum() == 1.0


def test_two_boxes_two_responsible_slots(tiny_cfg, tiny_anchors):
    gt = [(Box(0.25, 0.25, 0.1, 0.1), 0), (Box(0.75, 0.75, 0.3, 0.3), 2)]
    targets = assign_targets(gt, tiny_anchors, tiny_cfg)
    assert targets.total_obj() == 2
    assert targets.num_assigned == 2


def test_boundary_center_clamped(tiny_cfg, tiny_anchors):
    gt = [(Box(1.0, 1.0, 0.1, 0.1), 0)]
    targets = assign_targets(gt, tiny_anchors, tiny_cfg)
    assert targets.total_obj() == 1  # clamped into the last cell, not lost


def test_masks_partition_every_slot(tiny_cfg, tiny_anchors, rng):
    gt = [(Box(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
               float(rng.uniform(0.05, 0.4)), float(rng.uniform(0.05, 0.4))), 0)
          for _ in range(4)]
    targets = assign_targets(gt, tiny_anchors, tiny_cfg)
    for t in targets.scales:
        combined = t.obj_mask + t.noobj_mask
        assert np.all((combined == 0) | (combined == 1))
        assert np.all((t.obj_mask == 0) | (t.noobj_mask == 0))


def test_ignore_band_brute_force_rescan(tiny_cfg, tiny_anchors, rng):
    for trial in range(10):
        gt = [(Box(float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8)),
                   float(rng.uniform(0.05, 0.5)), float(rng.uniform(0.05, 0.5))),
               int(rng.integers(0, 3))) for _ in range(3)]
        targets = assign_targets(gt, tiny_anchors, tiny_cfg)
        gt_wh = [(b.w * 64, b.h * 64) for b, _ in gt]
        for s, t in enumerate(targets.scales):
            ignore = (t.obj_mask == 0) & (t.noobj_mask == 0)
            for a_slot, j, i in zip(*np.nonzero(ignore)):
                g = tiny_anchors.masks[s][a_slot]
                anchor = tiny_anchors.anchors[g]
                best = max(wh_iou((anchor.p_w, anchor.p_h), wh) for wh in gt_wh)
                assert best > tiny_cfg.ignore_threshold


def test_collision_larger_box_wins(tiny_cfg, tiny_anchors):
    # same center cell, same best anchor: larger area claims it, smaller
    # re-routes to its next-best anchor; both stay assigned
    a = tiny_anchors.anchors[5]
    scale, slot = tiny_anchors.scale_of_anchor(5)
    size = tiny_cfg.grid_sizes()[scale]
    cx = (4 + 0.5) / size
    cy = (4 + 0.5) / size
    big = Box(cx, cy, a.p_w / 64 * 1.05, a.p_h / 64 * 1.05)
    small = Box(cx, cy, a.p_w / 64 * 0.95, a.p_h / 64 * 0.95)
    targets = assign_targets([(small, 0), (big, 1)], tiny_anchors, tiny_cfg)
    assert targets.total_obj() == 2
    t = targets.scales[scale]
    assert t.cls[slot, 4, 4, 1] == 1.0  # larger box owns the best slot


def test_all_slots_exhausted_warns(tiny_cfg, tiny_anchors):
    b = Box(0.5, 0.5, 0.2, 0.2)
    gt = [(b, 0)] * (len(tiny_anchors) + 1)
    with pytest.warns(AssignWarning):
        targets = assign_targets(gt, tiny_anchors, tiny_cfg)
    assert targets.num_assigned == len(tiny_anchors)


def test_class_out_of_range(tiny_cfg, tiny_anchors):
    with pytest.raises(ValueError, match="class id"):
        assign_targets([(Box(0.5, 0.5, 0.1, 0.1), 99)], tiny_anchors, tiny_cfg)


def test_truth_threshold_enables_duplicates(tiny_cfg, tiny_anchors):
    import dataclasses
    cfg = dataclasses.replace(tiny_cfg, truth_threshold=0.5,
                              layers=tiny_cfg.layers)
    a = tiny_anchors.anchors[3]
    gt = [(Box(0.5, 0.5, a.p_w / 64, a.p_h / 64), 0)]
    dup = assign_targets(gt, tiny_anchors, cfg)
    plain = assign_targets(gt, tiny_anchors, tiny_cfg)
    assert plain.total_obj() == 1
    assert dup.total_obj() > 1  # other anchors above 0.5 wh-IoU join in


# --- assign -> decode inverse (shared contract with the decode module) --------

def roundtrip_errors(cfg, anchors, gt):
    targets = assign_targets(gt, anchors, cfg)
    raws = targets_to_raw(targets, cfg)
    errs = []
    recovered = []
    for s, raw in enumerate(raws):
        batch = decode_scale(raw, anchors.for_scale(s), cfg.strides[s],
                             cfg.input_size, scale_index=s)
        t = targets.scales[s]
        for a_slot, j, i in zip(*np.nonzero(t.obj_mask)):
            size = t.obj_mask.shape[1]
            flat = a_slot * size * size + j * size + i
            cand = batch.candidate(int(flat))
            recovered.append(cand)
    assert len(recovered) == len(gt)
    matched = set()
    for box, cls_id in gt:
        best_err, best_k = float("inf"), None
        for k, cand in enumerate(recovered):
            if k in matched:
                continue
            err = max(abs(cand.box.cx / cfg.input_size - box.cx),
                      abs(cand.box.cy / cfg.input_size - box.cy),
                      abs(cand.box.w / cfg.input_size - box.w),
                      abs(cand.box.h / cfg.input_size - box.h))
            if err < best_err:
                best_err, best_k = err, k
        matched.add(best_k)
        errs.append(best_err)
    return errs


def test_assign_decode_inverse_tiny(tiny_cfg, tiny_anchors, rng):
    for _ in range(50):
        n = int(rng.integers(1, 4))
        gt = []
        for _ in range(n):
            w = float(rng.uniform(0.03, 0.5))
            h = float(rng.uniform(0.03, 0.5))
            cx = float(rng.uniform(w / 2, 1 - w / 2))
            cy = float(rng.uniform(h / 2, 1 - h / 2))
            gt.append((Box(cx, cy, w, h), int(rng.integers(0, 3))))
        for err in roundtrip_errors(tiny_cfg, tiny_anchors, gt):
            assert err < 1e-4

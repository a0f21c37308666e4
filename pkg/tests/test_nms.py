import numpy as np
import pytest

from msdet.anchors import anchor_set_from_config
from msdet.assign import assign_targets, targets_to_raw
from msdet.config import parse_config
from msdet.decode import decode_scale, threshold
from msdet.evaluate import synthetic_raw_maps
from msdet.geometry import Box, CornerBox, iou
from msdet.nms import (Detection, detections_from_scored, nms, nms_indices,
                       postprocess)
from test_config import tiny_text


def reference_nms(dets: list[Detection], iou_threshold: float) -> set:
    """Transparent O(n^2) reference: independent of the production path."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].box.area(), i))
    suppressed = [False] * len(dets)
    kept = []
    for oi, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order[oi + 1:]:
            if suppressed[j] or dets[j].class_id != dets[i].class_id:
                continue
            if iou(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
    return {(dets[i].class_id, dets[i].score,
             dets[i].box.x1, dets[i].box.y1, dets[i].box.x2, dets[i].box.y2)
            for i in kept}


def det_set(dets):
    return {(d.class_id, d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2)
            for d in dets}


def random_detections(rng, n, n_classes=4, span=100.0):
    dets = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, span, 2)
        w, h = rng.uniform(1, span / 3, 2)
        dets.append(Detection(class_id=int(rng.integers(0, n_classes)),
                              score=float(rng.uniform(0, 1)),
                              box=CornerBox(x1, y1, x1 + w, y1 + h)))
    return dets


def test_single_detection_survives():
    d = Detection(0, 0.7, CornerBox(0, 0, 10, 10))
    assert nms([d], 0.45) == [d]


def test_two_overlapping_same_class_keeps_higher():
    # identical 10x10 boxes shifted by 1: iou = 9*10 / (200-90) ~ 0.818
    hi = Detection(0, 0.9, CornerBox(0, 0, 10, 10))
    lo = Detection(0, 0.7, CornerBox(1, 0, 11, 10))
    assert iou(hi.box, lo.box) > 0.45
    assert nms([lo, hi], 0.45) == [hi]


def test_different_classes_independent():
    a = Detection(0, 0.9, CornerBox(0, 0, 10, 10))
    b = Detection(1, 0.7, CornerBox(1, 0, 11, 10))
    assert det_set(nms([a, b], 0.45)) == det_set([a, b])


def test_empty_input():
    assert nms([], 0.5) == []


def test_output_sorted_by_score():
    rng = np.random.default_rng(5)
    dets = random_detections(rng, 60)
    out = nms(dets, 0.5)
    scores = [d.score for d in out]
    assert scores == sorted(scores, reverse=True)


def test_survivors_never_overlap_above_threshold(rng):
    for trial in range(20):
        dets = random_detections(rng, 80, n_classes=3, span=60)
        out = nms(dets, 0.45)
        for i, a in enumerate(out):
            for b in out[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) <= 0.45


def test_output_subset_scores_untouched(rng):
    dets = random_detections(rng, 50)
    out = nms(dets, 0.3)
    pool = det_set(dets)
    assert det_set(out) <= pool


def test_idempotent(rng):
    dets = random_detections(rng, 120)
    once = nms(dets, 0.45)
    twice = nms(once, 0.45)
    assert once == twice


def test_tie_break_smaller_area_first():
    big = Detection(0, 0.5, CornerBox(0, 0, 20, 20))
    small = Detection(0, 0.5, CornerBox(2, 2, 12, 12))
    out = nms([big, small], 0.1)
    assert out[0] == small  # equal scores: smaller box wins the slot


def test_oracle_equivalence_200_random_inputs():
    rng = np.random.default_rng(777)
    for trial in range(200):
        n = int(rng.integers(1, 501))
        thr = float(rng.uniform(0.2, 0.7))
        dets = random_detections(rng, n, n_classes=int(rng.integers(1, 6)))
        assert det_set(nms(dets, thr)) == reference_nms(dets, thr)


def test_nms_indices_validation():
    with pytest.raises(ValueError, match="iou_threshold"):
        nms_indices(np.zeros((1, 4)), np.zeros(1), np.zeros(1), 1.5)


# --- postprocess ---------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny():
    cfg = parse_config(tiny_text())
    return cfg, anchor_set_from_config(cfg)


def test_all_zero_raw_yields_empty_at_conf_025(tiny):
    cfg, anchors = tiny
    maps = [np.zeros((24, 8, 8), dtype=np.float32),
            np.zeros((24, 32, 32), dtype=np.float32)]
    # verify, not assume: the best possible score of an all-zero map
    batch = decode_scale(maps[0], anchors.for_scale(0), 8, 64)
    best = float((batch.objectness * batch.class_scores.max(axis=1)).max())
    assert best == 0.25  # sigma(0) * sigma(0)
    assert postprocess(maps, cfg, conf_threshold=0.25 + 1e-6,
                       anchor_set=anchors) == []
    # boundary inclusive: at exactly 0.25 every slot passes
    assert len(postprocess(maps, cfg, conf_threshold=0.25,
                           anchor_set=anchors)) > 0


def test_synthetic_strong_box_detected(tiny):
    cfg, anchors = tiny
    gt = [(Box(0.4, 0.6, 0.25, 0.2), 1)]
    targets = assign_targets(gt, anchors, cfg)
    maps = targets_to_raw(targets, cfg, dtype=np.float32)
    dets = postprocess(maps, cfg, conf_threshold=0.25, iou_threshold=0.45,
                       anchor_set=anchors)
    assert len(dets) == 1
    d = dets[0]
    assert d.class_id == 1
    assert d.score == pytest.approx(1.0)
    assert d.box.x1 == pytest.approx((0.4 - 0.125) * 64, abs=1e-2)
    assert d.box.y2 == pytest.approx((0.6 + 0.1) * 64, abs=1e-2)


def test_postprocess_equals_naive_composition(tiny):
    cfg, anchors = tiny
    for seed in range(4):
        maps = synthetic_raw_maps(cfg, seed=seed, positives_per_scale=25)
        fused = postprocess(maps, cfg, conf_threshold=0.25,
                            iou_threshold=0.45, anchor_set=anchors)
        batches = [decode_scale(m, anchors.for_scale(s), cfg.strides[s],
                                cfg.input_size, scale_index=s)
                   for s, m in enumerate(maps)]
        naive = detections_from_scored(threshold(batches, 0.25), 0.45)
        assert fused == naive


def test_postprocess_deterministic(tiny):
    cfg, anchors = tiny
    maps = synthetic_raw_maps(cfg, seed=9)
    a = postprocess(maps, cfg, anchor_set=anchors)
    b = postprocess(maps, cfg, anchor_set=anchors)
    assert a == b

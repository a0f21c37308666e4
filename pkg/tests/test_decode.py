import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msdet.anchors import Anchor, anchor_set_from_config
from msdet.config import parse_config
from msdet.decode import (CandidateBatch, candidate_count, decode_all,
                          decode_scale, fast_threshold_scale, threshold)
from msdet.evaluate import synthetic_raw_maps
from test_config import paper_text, tiny_text


def test_all_zero_raw_decodes_to_anchor_at_half_cell():
    raw = np.zeros((1 * 6, 2, 2), dtype=np.float32)  # A=1, K=1, S=2
    batch = decode_scale(raw, [Anchor(32, 32)], stride=32, input_size=64)
    cand = batch.candidate(0)  # cell (0, 0)
    assert cand.box.cx == pytest.approx(16.0)
    assert cand.box.cy == pytest.approx(16.0)
    assert cand.box.w == pytest.approx(32.0)
    assert cand.box.h == pytest.approx(32.0)
    assert cand.objectness == pytest.approx(0.5)


def test_exponential_width_law():
    raw = np.zeros((6, 1, 1), dtype=np.float32)
    raw[2, 0, 0] = np.log(2.0)  # t_w
    batch = decode_scale(raw, [Anchor(10, 20)], stride=32, input_size=32)
    assert batch.candidate(0).box.w == pytest.approx(20.0, rel=1e-6)
    assert batch.candidate(0).box.h == pytest.approx(20.0, rel=1e-6)


def test_candidate_provenance_order():
    # flattening is (anchor, row, column)
    raw = np.zeros((2 * 6, 2, 2), dtype=np.float32)
    batch = decode_scale(raw, [Anchor(8, 8), Anchor(16, 16)], stride=16,
                         input_size=32, scale_index=3)
    assert len(batch) == 8
    cells = [tuple(c) for c in batch.cells]
    assert cells[:4] == [(0, 0), (1, 0), (0, 1), (1, 1)]
    assert list(batch.anchor_slots[:4]) == [0, 0, 0, 0]
    assert list(batch.anchor_slots[4:]) == [1, 1, 1, 1]
    assert batch.candidate(5).scale_index == 3


def test_paper_profile_candidate_count():
    cfg = parse_config(paper_text())
    assert candidate_count(cfg) == 288145
    assert candidate_count(cfg) == (208 ** 2 + 104 ** 2 + 52 ** 2 + 26 ** 2
                                    + 13 ** 2) * 5


def test_decoded_candidate_total_matches_law():
    cfg = parse_config(tiny_text())
    anchors = anchor_set_from_config(cfg)
    maps = synthetic_raw_maps(cfg, seed=1)
    batches = [decode_scale(m, anchors.for_scale(s), cfg.strides[s],
                            cfg.input_size, scale_index=s)
               for s, m in enumerate(maps)]
    assert sum(len(b) for b in batches) == candidate_count(cfg)
    assert candidate_count(cfg) == 3 * (8 * 8 + 32 * 32)


@settings(max_examples=25, deadline=None)
@given(a_per=st.integers(1, 4), size=st.sampled_from([1, 2, 4, 8]),
       k=st.integers(1, 5))
def test_candidate_count_law_random_shapes(a_per, size, k, ):
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(a_per * (5 + k), size, size)).astype(np.float32)
    anchors = [Anchor(4.0 * (i + 1), 6.0 * (i + 1)) for i in range(a_per)]
    batch = decode_scale(raw, anchors, stride=8, input_size=size * 8)
    assert len(batch) == a_per * size * size
    assert batch.class_scores.shape == (len(batch), k)
    assert np.all(batch.class_scores >= 0) and np.all(batch.class_scores <= 1)
    assert np.all(batch.objectness >= 0) and np.all(batch.objectness <= 1)


def test_threshold_zero_keeps_all():
    cfg = parse_config(tiny_text())
    anchors = anchor_set_from_config(cfg)
    maps = synthetic_raw_maps(cfg, seed=2)
    batches = [decode_scale(m, anchors.for_scale(s), cfg.strides[s],
                            cfg.input_size, scale_index=s)
               for s, m in enumerate(maps)]
    kept = threshold(batches, 0.0)
    assert len(kept) == candidate_count(cfg)


def test_threshold_one_rejects_all(rng):
    raw = rng.normal(size=(6, 4, 4)).astype(np.float32)
    batch = decode_scale(raw, [Anchor(8, 8)], stride=8, input_size=32)
    assert np.all(batch.objectness < 1.0)  # sigmoid is strictly below 1 here
    assert len(threshold(batch, 1.0)) == 0


def test_threshold_boundary_inclusive():
    batch = CandidateBatch(
        boxes=np.array([[10.0, 10, 4, 4], [20, 20, 4, 4], [30, 30, 4, 4]]),
        objectness=np.array([0.9, 0.3, 0.25]),
        class_scores=np.array([[1.0], [1.0], [1.0]]),
        scale_index=0,
        cells=np.zeros((3, 2), dtype=np.int64),
        anchor_slots=np.zeros(3, dtype=np.int64))
    kept = threshold(batch, 0.25)
    assert list(kept.scores) == [0.9, 0.3, 0.25]


def test_threshold_monotone_subset(rng):
    raw = rng.normal(size=(12, 6, 6)).astype(np.float32)
    batch = decode_scale(raw, [Anchor(6, 6), Anchor(12, 12)], stride=8,
                         input_size=48)
    low = threshold(batch, 0.2)
    high = threshold(batch, 0.5)
    low_keys = {tuple(b) for b in low.boxes}
    high_keys = {tuple(b) for b in high.boxes}
    assert high_keys <= low_keys
    assert np.all(high.scores >= 0.5)


def test_threshold_assigns_argmax_class(rng):
    raw = rng.normal(size=(9, 2, 2)).astype(np.float32)  # A=1, K=4
    batch = decode_scale(raw, [Anchor(8, 8)], stride=8, input_size=16)
    kept = threshold(batch, 0.0)
    manual = batch.class_scores.argmax(axis=1)
    assert np.array_equal(kept.class_ids, manual)
    np.testing.assert_allclose(
        kept.scores,
        batch.objectness * batch.class_scores.max(axis=1), rtol=1e-7)


def test_fast_threshold_matches_naive_path(rng):
    cfg = parse_config(tiny_text())
    anchors = anchor_set_from_config(cfg)
    for seed in range(5):
        maps = synthetic_raw_maps(cfg, seed=seed)
        for conf in (0.0, 0.1, 0.25, 0.6):
            for s, m in enumerate(maps):
                naive = threshold(decode_scale(
                    m, anchors.for_scale(s), cfg.strides[s], cfg.input_size,
                    scale_index=s), conf)
                fast = fast_threshold_scale(
                    m, anchors.for_scale(s), cfg.strides[s], cfg.input_size,
                    conf, scale_index=s)
                assert len(naive) == len(fast)
                np.testing.assert_array_equal(naive.boxes, fast.boxes)
                np.testing.assert_array_equal(naive.scores, fast.scores)
                np.testing.assert_array_equal(naive.class_ids, fast.class_ids)
                np.testing.assert_array_equal(naive.cells, fast.cells)
                np.testing.assert_array_equal(naive.anchor_slots,
                                              fast.anchor_slots)


def test_decode_all_from_batched_forward(rng):
    from msdet.network import build
    from msdet.tensor import Tensor
    cfg = parse_config(tiny_text())
    anchors = anchor_set_from_config(cfg)
    net = build(cfg)
    x = Tensor(rng.uniform(0, 1, (2, 3, 64, 64)).astype(np.float32))
    raw = net.forward(x)
    batches = decode_all(raw, anchors, image_index=1)
    assert sum(len(b) for b in batches) == candidate_count(cfg)


def test_decode_shape_validation():
    with pytest.raises(ValueError, match="inconsistent"):
        decode_scale(np.zeros((7, 2, 2)), [Anchor(4, 4), Anchor(8, 8)],
                     stride=8, input_size=16)
    with pytest.raises(ValueError, match="grid"):
        decode_scale(np.zeros((6, 2, 2)), [Anchor(4, 4)], stride=8,
                     input_size=64)

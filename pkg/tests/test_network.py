import numpy as np
import pytest

from msdet.config import parse_config
from msdet.network import (BuildError, WeightsFormatError, build,
                           load_weights, save_weights)
from msdet.tensor import Tensor
from test_config import paper_text, tiny_text


@pytest.fixture(scope="module")
def tiny_net():
    return build(parse_config(tiny_text()))


def test_paper_config_builds_with_census():
    net = build(parse_config(paper_text()))
    assert len(net.head_layers) == 5


def test_census_mismatch_is_error():
    cfg = parse_config(paper_text())
    cfg.census = (59, 20, 6, 5)
    with pytest.raises(BuildError, match="census mismatch"):
        build(cfg)


def test_tiny_config_builds_without_census(tiny_net):
    assert tiny_net.cfg.census is None
    assert len(tiny_net.head_layers) == 2


def test_bad_shortcut_reference_names_layer():
    text = tiny_text().replace("from=-2", "from=-99", 1)
    with pytest.raises(Exception, match="-99"):
        build(parse_config(text))


def test_detection_channel_validation():
    text = tiny_text().replace("filters=24\nsize=1", "filters=23\nsize=1", 1)
    with pytest.raises(BuildError, match="channels"):
        build(parse_config(text))


def test_forward_head_shapes(tiny_net):
    cfg = tiny_net.cfg
    x = Tensor(np.zeros((2, 3, cfg.input_size, cfg.input_size),
                        dtype=np.float32))
    raw = tiny_net.forward(x)
    assert len(raw) == 2
    for m, stride in zip(raw.maps, cfg.strides):
        s = cfg.input_size // stride
        assert m.shape == (2, cfg.anchors_per_scale * (5 + cfg.num_classes),
                           s, s)


def test_forward_rejects_wrong_input_size(tiny_net):
    with pytest.raises(ValueError, match="expected input"):
        tiny_net.forward(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)))


def test_forward_is_pure(tiny_net, rng):
    x = Tensor(rng.uniform(0, 1, (1, 3, 64, 64)).astype(np.float32))
    a = tiny_net.forward(x)
    b = tiny_net.forward(x)
    for ma, mb in zip(a.maps, b.maps):
        assert np.array_equal(ma.data, mb.data)


def test_only_allowed_layer_kinds(tiny_net):
    kinds = {l.kind for l in tiny_net.cfg.layers}
    assert kinds <= {"convolutional", "shortcut", "upsample", "route",
                     "detection"}


def test_init_is_seed_deterministic():
    cfg_a = parse_config(tiny_text())
    cfg_b = parse_config(tiny_text())
    for wa, wb in zip(build(cfg_a).weights, build(cfg_b).weights):
        if wa is not None:
            assert np.array_equal(wa.data, wb.data)
    cfg_c = parse_config(tiny_text().replace("seed=0", "seed=7"))
    diff = any(wa is not None and not np.array_equal(wa.data, wc.data)
               for wa, wc in zip(build(cfg_a).weights, build(cfg_c).weights))
    assert diff


def test_weights_round_trip_bitwise(tiny_net):
    blob = save_weights(tiny_net)
    assert blob[:4] == b"TSW1"
    other = build(parse_config(tiny_text().replace("seed=0", "seed=3")))
    load_weights(other, blob)
    assert np.array_equal(save_weights(other), blob)
    for wa, wb in zip(tiny_net.weights, other.weights):
        if wa is not None:
            assert np.array_equal(wa.data, wb.data)


def test_weights_bad_magic(tiny_net):
    blob = b"XXXX" + save_weights(tiny_net)[4:]
    with pytest.raises(WeightsFormatError, match="magic"):
        load_weights(build(parse_config(tiny_text())), blob)


def test_weights_truncated_stream(tiny_net):
    blob = save_weights(tiny_net)
    with pytest.raises(WeightsFormatError, match="truncated"):
        load_weights(build(parse_config(tiny_text())), blob[:len(blob) // 2])


def test_weights_config_mismatch(tiny_net):
    blob = save_weights(tiny_net)
    paper_net = build(parse_config(paper_text()))
    with pytest.raises(WeightsFormatError, match="mismatch"):
        load_weights(paper_net, blob)

import numpy as np
import pytest

from htlprune import tensor as T
from htlprune.unet import ArchConfig, ConfigError, build_classifier, build_unet, forward, predict_masks


def conv_params(cout, cin, k=3):
    return cout * cin * k * k + cout


def test_parameter_count_depth1_base1():
    # enc0: 1->1, 1->1; mid: 1->2, 2->2; dec0: (2+1)->1, 1->1; head 1->2 (1x1)
    expected = (conv_params(1, 1) * 2 + conv_params(2, 1) + conv_params(2, 2)
                + conv_params(1, 3) + conv_params(1, 1) + conv_params(2, 1, k=1))
    assert expected == 120
    assert build_unet(ArchConfig(depth=1, base_channels=1), seed=0).num_parameters() == expected


@pytest.mark.parametrize("depth, base", [(1, 2), (2, 4), (3, 2)])
def test_output_shape(depth, base):
    cfg = ArchConfig(depth=depth, base_channels=base, input_size=16)
    m = build_unet(cfg, seed=3)
    x = np.random.default_rng(0).random((2, 1, 16, 16))
    with T.no_grad():
        assert forward(m, x).shape == (2, 2, 16, 16)
    assert predict_masks(m, x).shape == (2, 16, 16)


def test_same_seed_same_weights():
    a, b = build_unet(ArchConfig(), seed=7), build_unet(ArchConfig(), seed=7)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    c = build_unet(ArchConfig(), seed=8)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_bad_spatial_size_rejected():
    m = build_unet(ArchConfig(depth=2, base_channels=2), seed=0)
    with pytest.raises(T.DimensionError):
        forward(m, np.zeros((1, 1, 10, 10)))
    with pytest.raises(T.DimensionError):
        forward(m, np.zeros((1, 3, 8, 8)))


def test_config_validation_lists_every_problem():
    errs = ArchConfig(depth=0, base_channels=0, num_seg_classes=3, upsample="transposed").validate()
    assert len(errs) == 4
    with pytest.raises(ConfigError):
        build_unet(ArchConfig(input_size=30), seed=0)


def test_classifier_captures_saliency_layer():
    cfg = ArchConfig(depth=2, base_channels=2, input_size=16, num_cls_classes=3)
    m = build_classifier(cfg, seed=0)
    logits = forward(m, np.zeros((2, 1, 16, 16)), capture=True)
    assert logits.shape == (2, 3)
    assert m.activations["L"].shape == (2, 8, 4, 4)
    assert m.head == "fc"


def test_state_dict_round_trip():
    a = build_unet(ArchConfig(depth=1, base_channels=2), seed=1)
    b = build_unet(ArchConfig(depth=1, base_channels=2), seed=2)
    b.load_state_dict(a.state_dict())
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    bad = a.state_dict()
    bad["head.weight"] = np.zeros((1, 1))
    with pytest.raises(ConfigError):
        b.load_state_dict(bad)

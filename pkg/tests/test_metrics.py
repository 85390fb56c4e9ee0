import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from htlprune import metrics, pruning
from htlprune.metrics import DropRecord
from htlprune.unet import ArchConfig, build_unet


def brute_iou(a, b):
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


masks = arrays(np.uint8, (6, 6), elements=st.integers(0, 1))


@given(masks, masks)
def test_iou_matches_counting(a, b):
    assert metrics.iou(a, b, "fg") == brute_iou(a, b)
    assert metrics.iou(a, b, "bg") == brute_iou(1 - a, 1 - b)


@given(masks, masks)
def test_dice_iou_identity(a, b):
    j = metrics.iou(a, b)
    assert abs(metrics.dice(a, b) - 2 * j / (1 + j)) <= 1e-12


def test_empty_conventions():
    z = np.zeros((3, 3), dtype=np.uint8)
    assert metrics.iou(z, z) == 1.0 and metrics.dice(z, z) == 1.0
    o = np.ones((3, 3), dtype=np.uint8)
    assert metrics.iou(o, o, "bg") == 1.0
    assert metrics.iou(z, o) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        metrics.iou(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        metrics.iou(np.zeros((2, 2)), np.zeros((2, 2)), "edge")


def test_sample_metrics_mean_iou():
    p = np.array([[1, 1], [0, 0]])
    t = np.array([[1, 0], [0, 0]])
    m = metrics.sample_metrics(p, t)
    assert m.iou_foreground == 0.5 and m.iou_background == pytest.approx(2 / 3)
    assert m.mean_iou == pytest.approx((0.5 + 2 / 3) / 2)
    assert m.dice == pytest.approx(2 / 3)


@pytest.mark.parametrize("full, pruned, expected", [
    (0.8, 0.4, 0.5), (0.5, 0.5, 0.0), (0.5, 0.75, -0.5), (0.0, 0.0, 0.0), (0.0, 0.3, -1.0), (0.1, 0.9, -1.0),
])
def test_relative_drop(full, pruned, expected):
    assert metrics.relative_drop(full, pruned) == pytest.approx(expected)


def test_degradation_table_identity_mask_gives_zero_drop():
    m = build_unet(ArchConfig(depth=1, base_channels=2, input_size=8), seed=0)
    rng = np.random.default_rng(0)

    class S:
        def __init__(self, i):
            self.id, self.image, self.mask = f"x{i}", rng.random((1, 8, 8)), (rng.random((8, 8)) > 0.5).astype(np.uint8)

    samples = [S(i) for i in range(4)]
    rows = metrics.degradation_table(m, pruning.identity_mask(m), samples)
    assert [r.sample_id for r in rows] == ["x0", "x1", "x2", "x3"]
    assert all(r.drop_fg == 0.0 and r.drop_bg == 0.0 for r in rows)


def test_drop_csv_round_trip(tmp_path):
    rows = [DropRecord("a", 0.1, 0.2, 0.3, 0.4, 0.1 / 3, -1.0, True), DropRecord("b", 1.0, 0.0, 1.0, 1.0, 1.0, 0.0)]
    path = tmp_path / "drops.csv"
    metrics.write_drop_csv(rows, path)
    assert path.read_text().splitlines()[0] == ",".join(metrics.DROP_COLUMNS)
    assert metrics.read_drop_csv(path) == rows

from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from htlprune import saliency
from htlprune.saliency import BoundingBox
from htlprune.unet import ArchConfig, UsageError, build_classifier, build_unet

# two channels on a 2x2 grid; hand-derived weights are 2/3 and 9/20
A = np.array([[[1.0, 0.0], [0.0, 1.0]], [[2.0, 1.0], [0.0, 0.0]]])
G = np.array([[[0.5, 0.5], [0.5, 0.5]], [[-1.0, 2.0], [0.0, 1.0]]])
CAM = np.array([[47 / 30, 9 / 20], [0.0, 2 / 3]])


def test_gradcam_pp_toy_weights_and_map():
    np.testing.assert_allclose(saliency.gradcam_pp_weights(A, G), [2 / 3, 9 / 20], atol=1e-12)
    np.testing.assert_allclose(saliency.cam_from(A, G), CAM, atol=1e-10)


def test_zero_gradient_gives_zero_map():
    assert not saliency.cam_from(A, np.zeros_like(G)).any()


def test_scale_to_255():
    s = saliency.scale_to_255(CAM)
    assert s.dtype == np.uint8
    assert s[0, 0] == 255 and s[1, 0] == 0
    assert s[1, 1] == int(np.floor(255 * (2 / 3) / (47 / 30) + 0.5))
    assert not saliency.scale_to_255(np.full((3, 3), 2.0)).any()


def test_resize_bilinear_half_pixel():
    out = saliency.resize_bilinear(np.array([[0.0, 4.0]]), (1, 4))
    np.testing.assert_allclose(out, [[0.0, 1.0, 3.0, 4.0]])
    x = np.random.default_rng(0).random((4, 4))
    np.testing.assert_allclose(saliency.resize_bilinear(x, (4, 4)), x)


@given(arrays(np.uint8, (8, 8), elements=st.integers(0, 255)), st.integers(0, 255))
def test_binarize_counts(scaled, thr):
    assert int(saliency.binarize(scaled, thr).sum()) == sum(int(v) >= thr for v in scaled.ravel())


def components_oracle(mask):
    """Plain BFS over 4-neighbours; returns (area, y0, x0, y1, x1) per component."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                q, pts = deque([(y, x)]), []
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    pts.append((cy, cx))
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
                ys, xs = zip(*pts)
                comps.append((len(pts), min(ys), min(xs), max(ys), max(xs)))
    return comps


@given(arrays(np.uint8, (7, 9), elements=st.integers(0, 1)))
def test_bounding_box_matches_component_oracle(mask):
    comps = components_oracle(mask)
    box = saliency.bounding_box(mask)
    if not comps:
        assert box is None
        return
    area, y0, x0, y1, x1 = min(comps, key=lambda c: (-c[0], c[1], c[2]))
    assert box == BoundingBox(x0, y0, x1, y1)


def test_diagonal_pixels_are_separate_components():
    m = np.array([[1, 0], [0, 1]])
    assert saliency.bounding_box(m) == BoundingBox(0, 0, 0, 0)


def test_box_iou_and_divergence():
    a, b = BoundingBox(0, 0, 1, 1), BoundingBox(1, 1, 2, 2)
    assert saliency.box_iou(a, b) == pytest.approx(1 / 7)
    assert saliency.box_divergence(a, a) == 0.0
    assert saliency.box_divergence(None, None) == 0.0
    assert saliency.box_divergence(a, None) == 1.0
    with pytest.raises(ValueError):
        BoundingBox(2, 0, 1, 0)


def test_heatmap_batch_matches_single():
    cfg = ArchConfig(depth=2, base_channels=2, input_size=16)
    m = build_classifier(cfg, seed=0)
    imgs = np.random.default_rng(0).random((3, 1, 16, 16))
    batch = saliency.gradcam_pp_batch(m, imgs, [0, 1, 1])
    for i, cls in enumerate([0, 1, 1]):
        single = saliency.gradcam_pp(m, imgs[i], cls)
        np.testing.assert_allclose(single.values, batch[i].values, atol=1e-12)
        assert single.values.shape == (16, 16) and single.raw.shape == (4, 4)


def test_gradcam_rejects_segmentation_model():
    with pytest.raises(UsageError):
        saliency.gradcam_pp(build_unet(ArchConfig(depth=1, base_channels=1), seed=0), np.zeros((1, 32, 32)), 0)


def test_heatmap_pgm_export(tmp_path):
    m = build_classifier(ArchConfig(depth=1, base_channels=2, input_size=8), seed=0)
    h = saliency.gradcam_pp(m, np.random.default_rng(1).random((1, 8, 8)), 1)
    saliency.write_heatmap_pgm(h, tmp_path / "h.pgm")
    raw = (tmp_path / "h.pgm").read_bytes()
    assert raw.startswith(b"P5\n8 8\n255\n")
    assert np.frombuffer(raw[-64:], dtype=np.uint8).reshape(8, 8).tolist() == h.scaled_values.tolist()

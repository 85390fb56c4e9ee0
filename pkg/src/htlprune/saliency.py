"""GradCAM++ heatmaps and the heatmap -> mask -> bounding box chain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .data import write_pnm
from .unet import Model, UsageError, forward


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel extent."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class Heatmap:
    raw: np.ndarray  # layer-resolution CAM
    values: np.ndarray  # bilinearly resized to input resolution
    scaled_values: np.ndarray  # uint8, min-max scaled to [0, 255]


def scale_to_255(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.floor(255.0 * (v - lo) / (hi - lo) + 0.5).astype(np.uint8)


def _resize_axis(a: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    shape = [1] * a.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, hi, axis=axis) * frac


def resize_bilinear(a: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D array (edge-clamped)."""
    return _resize_axis(_resize_axis(np.asarray(a, dtype=np.float64), size[0], 0), size[1], 1)


def gradcam_pp_weights(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Per-channel GradCAM++ weights from K,h,w activations and score gradients.

    With an exponential score the second and third derivatives reduce to
    powers of the first, giving alpha = g^2 / (2 g^2 + sum(A) g^3); the
    weight is sum over positions of alpha * relu(g). The common exp(score)
    factor is dropped because it only rescales the map.
    """
    g2 = grads ** 2
    g3 = g2 * grads
    denom = 2.0 * g2 + activations.sum(axis=(1, 2), keepdims=True) * g3
    alpha = g2 / np.where(denom != 0.0, denom, 1.0)
    return (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))


def cam_from(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    w = gradcam_pp_weights(activations, grads)
    return np.maximum(np.tensordot(w, activations, axes=(0, 0)), 0.0)


def gradcam_pp_batch(model: Model, images: np.ndarray, classes, batch_size: int = 64) -> list[Heatmap]:
    if model.kind != "classification":
        raise UsageError("GradCAM++ needs the classification model")
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size and (classes.min() < 0 or classes.max() >= model.config.num_cls_classes):
        raise ValueError("class index out of range")
    size = images.shape[2:]
    maps = []
    for s in range(0, len(images), batch_size):
        xb = images[s:s + batch_size]
        model.zero_grad()
        T.reset_tape()
        logits = forward(model, xb, capture=True)
        layer = model.activations.pop("L")
        T.select_class_scores(logits, classes[s:s + batch_size]).backward()
        grads = layer.grad if layer.grad is not None else np.zeros_like(layer.data)
        for a, g in zip(layer.data, grads):
            raw = cam_from(a, g)
            values = resize_bilinear(raw, size)
            maps.append(Heatmap(raw, values, scale_to_255(values)))
    model.zero_grad()
    return maps


def gradcam_pp(model: Model, image: np.ndarray, class_index: int) -> Heatmap:
    """Heatmap for one C,H,W image and target class."""
    return gradcam_pp_batch(model, np.asarray(image)[None], [class_index])[0]


def binarize(heatmap: Heatmap | np.ndarray, threshold: int = 180) -> np.ndarray:
    if not 0 <= threshold <= 255:
        raise ValueError("threshold must lie in [0, 255]")
    scaled = heatmap.scaled_values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    return (scaled >= threshold).astype(np.uint8)


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def bounding_box(mask: np.ndarray) -> BoundingBox | None:
    """Box of the largest 4-connected component; area ties go to the box
    whose top-left corner comes first in row-major order."""
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=_FOUR_CONNECTED)
    if n == 0:
        return None
    areas = np.bincount(labels.ravel())[1:]
    best = None
    for sl, area in zip(ndimage.find_objects(labels), areas):
        key = (-int(area), sl[0].start, sl[1].start)
        if best is None or key < best[0]:
            best = (key, sl)
    ys, xs = best[1]
    return BoundingBox(xs.start, ys.start, xs.stop - 1, ys.stop - 1)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min) + 1
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min) + 1
    inter = max(ix, 0) * max(iy, 0)
    return inter / (a.area + b.area - inter)


def box_divergence(a: BoundingBox | None, b: BoundingBox | None) -> float:
    """1 - box IoU; 0 if both boxes are missing, 1 if exactly one is."""
    if a is None and b is None:
        return 0.0
    if a is None or b is None:
        return 1.0
    return 1.0 - box_iou(a, b)


def heatmap_boxes(model: Model, images: np.ndarray, classes, threshold: int = 180) -> list[BoundingBox | None]:
    return [bounding_box(binarize(h, threshold)) for h in gradcam_pp_batch(model, images, classes)]


def write_heatmap_pgm(heatmap: Heatmap, path) -> None:
    """8-bit grayscale export of the scaled map."""
    write_pnm(path, heatmap.scaled_values, 255)

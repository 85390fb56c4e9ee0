"""Two-class segmentation metrics and full-vs-pruned degradation records."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .pruning import PruneMask, masked
from .unet import Model, UsageError, predict_masks

EPS = 1e-8
DROP_COLUMNS = ("sample_id", "iou_fg_full", "iou_fg_pruned", "drop_fg", "iou_bg_full", "iou_bg_pruned",
                "drop_bg", "is_htl")


def _pair(prediction, target) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(prediction).astype(bool)
    b = np.asarray(target).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"prediction shape {a.shape} != target shape {b.shape}")
    return a, b


def iou(prediction, target, cls: str = "fg") -> float:
    """Intersection over union of one class; 1.0 when the class is absent from both."""
    a, b = _pair(prediction, target)
    if cls == "bg":
        a, b = ~a, ~b
    elif cls != "fg":
        raise ValueError("cls must be 'fg' or 'bg'")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def dice(prediction, target) -> float:
    a, b = _pair(prediction, target)
    denom = np.count_nonzero(a) + np.count_nonzero(b)
    if denom == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / denom


@dataclass
class SegMetrics:
    iou_foreground: float
    iou_background: float
    mean_iou: float
    dice: float

    def as_dict(self) -> dict:
        return asdict(self)


def sample_metrics(pred, target) -> SegMetrics:
    fg, bg = iou(pred, target, "fg"), iou(pred, target, "bg")
    return SegMetrics(fg, bg, (fg + bg) / 2, dice(pred, target))


def mean_metrics(preds: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> SegMetrics:
    rows = [sample_metrics(p, t) for p, t in zip(preds, targets)]
    if not rows:
        raise ValueError("cannot average metrics over an empty slice")
    fg = float(np.mean([r.iou_foreground for r in rows]))
    bg = float(np.mean([r.iou_background for r in rows]))
    return SegMetrics(fg, bg, (fg + bg) / 2, float(np.mean([r.dice for r in rows])))


def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    if any(s.mask is None for s in samples):
        raise UsageError("evaluation needs ground-truth masks on every sample")
    return images, np.stack([s.mask for s in samples])


def evaluate(model: Model, samples) -> SegMetrics:
    """Dataset-mean metrics of argmax predictions."""
    if model.kind != "segmentation":
        raise UsageError("evaluate needs a segmentation model")
    images, targets = _stack(samples)
    return mean_metrics(predict_masks(model, images), targets)


def per_sample_iou(model: Model, samples) -> tuple[np.ndarray, np.ndarray]:
    images, targets = _stack(samples)
    preds = predict_masks(model, images)
    fg = np.array([iou(p, t, "fg") for p, t in zip(preds, targets)])
    bg = np.array([iou(p, t, "bg") for p, t in zip(preds, targets)])
    return fg, bg


def relative_drop(full: float, pruned: float) -> float:
    """(full - pruned) / max(full, EPS), floored at -1.

    The floor stops a sample with full IoU 0 that happens to improve under
    pruning from swamping dataset means with a -1e8 outlier.
    """
    return float(max((full - pruned) / max(full, EPS), -1.0))


@dataclass
class DropRecord:
    sample_id: str
    iou_fg_full: float
    iou_fg_pruned: float
    iou_bg_full: float
    iou_bg_pruned: float
    drop_fg: float
    drop_bg: float
    is_htl: bool = False


def degradation_table(model: Model, mask: PruneMask, samples) -> list[DropRecord]:
    if model.kind != "segmentation":
        raise UsageError("degradation_table needs a segmentation model")
    fg_full, bg_full = per_sample_iou(model, samples)
    with masked(model, mask):
        fg_pr, bg_pr = per_sample_iou(model, samples)
    return [
        DropRecord(s.id, float(ff), float(fp), float(bf), float(bp), relative_drop(ff, fp), relative_drop(bf, bp))
        for s, ff, fp, bf, bp in zip(samples, fg_full, fg_pr, bg_full, bg_pr)
    ]


def write_drop_csv(records: Iterable[DropRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DROP_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, repr(r.iou_fg_full), repr(r.iou_fg_pruned), repr(r.drop_fg),
                        repr(r.iou_bg_full), repr(r.iou_bg_pruned), repr(r.drop_bg), int(r.is_htl)])


def read_drop_csv(path) -> list[DropRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [DropRecord(r["sample_id"], float(r["iou_fg_full"]), float(r["iou_fg_pruned"]), float(r["iou_bg_full"]),
                       float(r["iou_bg_pruned"]), float(r["drop_fg"]), float(r["drop_bg"]), r["is_htl"] == "1")
            for r in rows]

"""Pruning-assisted hard-to-learn (HTL) sample mining and HTL fine-tuning.

Three mining settings share one recipe: measure how much a sample's
localization changes when the trained model is pruned, and flag the
samples whose change exceeds ``tau``.

* supervised: relative drop of foreground IoU against the ground truth;
* semi: divergence of the largest-component box of the predicted mask;
* weak: divergence of the GradCAM++ box of a classifier.

The pruned model is only ever a probe; every mining call restores the dense
weights before returning.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics, pruning, saliency
from .data import ParseError, Sample
from .training import TrainConfig, fit
from .unet import ConfigError, Model, UsageError, predict_masks

log = logging.getLogger(__name__)

SETTINGS = ("supervised", "semi", "weak")
HTL_COLUMNS = ("sample_id", "setting", "sensitivity", "is_htl", "threshold_used",
               "full_x_min", "full_y_min", "full_x_max", "full_y_max",
               "pruned_x_min", "pruned_y_min", "pruned_x_max", "pruned_y_max")


@dataclass
class MiningConfig:
    prune_method: str = "unstructured-magnitude"
    prune_ratio: float = 0.7
    tau: float = 0.4
    fine_tune_epochs: int = 20
    fine_tune_lr: float = 0.01
    fine_tune_decay_epoch: int = 15
    class_weights: tuple[float, ...] = (1.0, 2.0)  # background, foreground
    seed: int = 0
    mix_ratio: float = 0.0
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 2e-4
    cam_threshold: int = 180
    cam_class: str = "label"  # label | predicted

    def validate(self) -> list[str]:
        errors = []
        if self.prune_method not in pruning.METHODS:
            errors.append(f"mining.prune_method must be one of {pruning.METHODS}")
        if not 0 <= self.prune_ratio < 1:
            errors.append("mining.prune_ratio must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            errors.append("mining.tau must lie in (0, 1]")
        if self.fine_tune_epochs < 1:
            errors.append("mining.fine_tune_epochs must be >= 1")
        if not self.fine_tune_lr > 0:
            errors.append("mining.fine_tune_lr must be > 0")
        if self.mix_ratio < 0:
            errors.append("mining.mix_ratio must be >= 0")
        if not 0 <= self.cam_threshold <= 255:
            errors.append("mining.cam_threshold must lie in [0, 255]")
        if self.cam_class not in ("label", "predicted"):
            errors.append("mining.cam_class must be 'label' or 'predicted'")
        w = np.asarray(self.class_weights, dtype=float)
        if (w < 0).any() or not (w > 0).any():
            errors.append("mining.class_weights must be nonnegative with one positive")
        return errors

    def finetune_config(self, class_weights=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.fine_tune_epochs, lr=self.fine_tune_lr, momentum=self.momentum,
            weight_decay=self.weight_decay, decay_epochs=(self.fine_tune_decay_epoch,), decay_factor=0.1,
            batch_size=self.batch_size, augment=True,
            class_weights=tuple(self.class_weights if class_weights is None else class_weights))


@dataclass
class HtlRecord:
    sample_id: str
    setting: str
    sensitivity: float
    is_htl: bool
    threshold_used: float
    full_box: saliency.BoundingBox | None = None
    pruned_box: saliency.BoundingBox | None = None


@dataclass
class MiningResult:
    records: list[HtlRecord]
    mask: pruning.PruneMask
    drops: list[metrics.DropRecord] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    @property
    def htl_ids(self) -> list[str]:
        return [r.sample_id for r in self.records if r.is_htl]

    def __len__(self) -> int:
        return len(self.records)


def _flag(sample_id, setting, sensitivity, tau, full_box=None, pruned_box=None) -> HtlRecord:
    return HtlRecord(sample_id, setting, float(sensitivity), bool(sensitivity > tau), float(tau), full_box, pruned_box)


def _mask_for(model: Model, cfg: MiningConfig) -> pruning.PruneMask:
    return pruning.make_mask(model, cfg.prune_method, cfg.prune_ratio, cfg.seed)


def train_base(model: Model, samples: list[Sample], cfg: TrainConfig, seed: int = 0):
    """Fit the base model in place (theta_intermediate); returns the loss history."""
    if not samples:
        raise ValueError("training set is empty")
    images = np.stack([s.image for s in samples])
    if model.kind == "segmentation":
        if any(s.mask is None for s in samples):
            raise UsageError("segmentation training needs masks on every sample")
        targets = np.stack([s.mask for s in samples])
    else:
        if any(s.class_label is None for s in samples):
            raise UsageError("classifier training needs class labels on every sample")
        targets = np.asarray([s.class_label for s in samples])
        if len(cfg.class_weights) != model.config.num_cls_classes:
            # segmentation-style (bg, fg) weights do not apply to image classes
            cfg = replace(cfg, class_weights=(1.0,) * model.config.num_cls_classes)
    return fit(model, images, targets, cfg, seed)


def mine_supervised(model: Model, samples: list[Sample], cfg: MiningConfig) -> MiningResult:
    mask = _mask_for(model, cfg)
    drops = metrics.degradation_table(model, mask, samples)
    records = [_flag(d.sample_id, "supervised", d.drop_fg, cfg.tau) for d in drops]
    for d, r in zip(drops, records):
        d.is_htl = r.is_htl
    return MiningResult(records, mask, drops)


def mine_semi(model: Model, labeled: list[Sample], unlabeled: list[Sample], cfg: MiningConfig):
    """Returns (pseudo-labelled samples, result) for the unlabelled pool.

    Pseudo-labels come from the dense model. ``labeled`` is accepted for
    symmetry with the supervised setting; the base model has already seen it.
    """
    if not unlabeled:
        raise ValueError("unlabeled pool is empty")
    images = np.stack([s.image for s in unlabeled])
    full = predict_masks(model, images)
    mask = _mask_for(model, cfg)
    with pruning.masked(model, mask):
        pruned = predict_masks(model, images)
    pseudo, records, excluded = [], [], []
    for s, fm, pm in zip(unlabeled, full, pruned):
        pseudo.append(replace(s, mask=fm.astype(np.uint8)))
        fb, pb = saliency.bounding_box(fm), saliency.bounding_box(pm)
        if fb is None:
            excluded.append(s.id)
            continue
        records.append(_flag(s.id, "semi", saliency.box_divergence(fb, pb), cfg.tau, fb, pb))
    if excluded:
        log.info("semi mining: %d samples without a full-model box excluded", len(excluded))
    return pseudo, MiningResult(records, mask, excluded=excluded)


def mine_weak(model: Model, samples: list[Sample], cfg: MiningConfig, labels=None) -> MiningResult:
    if model.kind != "classification":
        raise UsageError("weak mining needs the classification model")
    images = np.stack([s.image for s in samples])
    if cfg.cam_class == "predicted":
        from . import tensor as T
        with T.no_grad():
            classes = np.concatenate([model(images[i:i + 64]).data.argmax(axis=1) for i in range(0, len(images), 64)])
    else:
        labels = [s.class_label for s in samples] if labels is None else labels
        if any(c is None for c in labels):
            raise UsageError("weak mining in label mode needs class labels")
        classes = np.asarray(labels)
    full = saliency.heatmap_boxes(model, images, classes, cfg.cam_threshold)
    mask = _mask_for(model, cfg)
    with pruning.masked(model, mask):
        pruned = saliency.heatmap_boxes(model, images, classes, cfg.cam_threshold)
    records, excluded = [], []
    for s, fb, pb in zip(samples, full, pruned):
        if fb is None:
            excluded.append(s.id)
            continue
        records.append(_flag(s.id, "weak", saliency.box_divergence(fb, pb), cfg.tau, fb, pb))
    if excluded:
        log.info("weak mining: %d samples with an empty full-model CAM excluded", len(excluded))
    return MiningResult(records, mask, excluded=excluded)


def rethreshold(result: MiningResult, tau: float) -> MiningResult:
    """Same measurements, new cut."""
    records = [_flag(r.sample_id, r.setting, r.sensitivity, tau, r.full_box, r.pruned_box) for r in result.records]
    return MiningResult(records, result.mask, result.drops, result.excluded)


def finetune_on_htl(model: Model, samples: list[Sample], cfg: MiningConfig, setting: str = "supervised",
                    pool: list[Sample] | None = None) -> Model:
    """Fine-tune a copy of ``model`` on ``samples`` only (theta_intermediate -> theta_final).

    With ``mix_ratio > 0`` that many extra samples per HTL sample are drawn
    from ``pool``. An empty sample list returns an unchanged copy.
    """
    if setting not in SETTINGS:
        raise ConfigError(f"setting must be one of {SETTINGS}")
    out = model.copy()
    if not samples:
        log.warning("no HTL samples: fine-tuning skipped, model returned unchanged")
        return out
    if setting == "weak":
        if model.kind != "classification" or any(s.class_label is None for s in samples):
            raise UsageError("weak fine-tuning needs a classifier and class labels")
    elif model.kind != "segmentation" or any(s.mask is None for s in samples):
        raise UsageError(f"{setting} fine-tuning needs a segmentation model and (pseudo-)masks")
    chosen = list(samples)
    if cfg.mix_ratio > 0 and pool:
        ids = {s.id for s in samples}
        rest = [s for s in pool if s.id not in ids]
        k = min(len(rest), int(round(cfg.mix_ratio * len(samples))))
        rng = np.random.Generator(np.random.Philox(cfg.seed + 7919))
        chosen += [rest[i] for i in sorted(rng.choice(len(rest), size=k, replace=False))]
    weights = (1.0,) * model.config.num_cls_classes if setting == "weak" else cfg.class_weights
    train_base(out, chosen, cfg.finetune_config(weights), seed=cfg.seed)
    return out


def baseline_sampler(kind: str, samples: list[Sample], count: int, seed: int = 0) -> list[Sample]:
    """Comparison sample sets of exactly ``count`` samples.

    random: uniform without replacement. class-distribution: inverse class
    frequency weights, drawn with replacement so minority classes are
    oversampled. demographic-distribution: sex strata allocated in proportion
    to the corpus and sampled uniformly within each stratum.
    """
    n = len(samples)
    if count > n or count < 0:
        raise ValueError(f"cannot sample {count} of {n} samples")
    rng = np.random.Generator(np.random.Philox(seed))
    if kind == "random":
        return [samples[i] for i in rng.permutation(n)[:count]]
    if kind == "class-distribution":
        labels = [s.class_label for s in samples]
        freq = {c: labels.count(c) for c in set(labels)}
        w = np.array([1.0 / freq[c] for c in labels])
        idx = rng.choice(n, size=count, replace=True, p=w / w.sum())
        return [samples[i] for i in idx]
    if kind == "demographic-distribution":
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(samples):
            groups.setdefault(s.sex, []).append(i)
        keys = sorted(groups)
        raw = np.array([len(groups[k]) for k in keys]) * count / n
        alloc = np.floor(raw).astype(int)
        for j in np.argsort(-(raw - alloc), kind="stable")[:count - alloc.sum()]:
            alloc[j] += 1
        picked = []
        for k, a in zip(keys, alloc):
            members = groups[k]
            picked.extend(members[i] for i in rng.permutation(len(members))[:a])
        return [samples[i] for i in picked]
    raise ConfigError(f"unknown baseline sampler {kind!r}")


def _box_cells(b):
    return ["", "", "", ""] if b is None else list(b.as_tuple())


def write_htl_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HTL_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.setting, repr(r.sensitivity), int(r.is_htl), repr(r.threshold_used)]
                       + _box_cells(r.full_box) + _box_cells(r.pruned_box))


def read_htl_csv(path) -> list[HtlRecord]:
    def box(row, prefix):
        vals = [row[f"{prefix}_{k}"] for k in ("x_min", "y_min", "x_max", "y_max")]
        return None if vals[0] == "" else saliency.BoundingBox(*map(int, vals))

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HTL_COLUMNS:
            raise ParseError(f"{path}: not an HTL table (header {reader.fieldnames})")
        return [HtlRecord(r["sample_id"], r["setting"], float(r["sensitivity"]), r["is_htl"] == "1",
                          float(r["threshold_used"]), box(r, "full"), box(r, "pruned"))
                for r in reader]


def config_dict(cfg: MiningConfig) -> dict:
    d = asdict(cfg)
    d["class_weights"] = list(cfg.class_weights)
    return d

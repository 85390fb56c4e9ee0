"""Minibatch SGD loop shared by base training and fine-tuning."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import NumericError, OptimizerState, sgd_step
from .unet import Model, forward

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    decay_epochs: tuple[int, ...] = (20, 50, 80)
    decay_factor: float = 0.1
    batch_size: int = 64
    augment: bool = True
    class_weights: tuple[float, ...] = (1.0, 1.0)

    def validate(self, prefix: str = "training") -> list[str]:
        errors = []
        if self.epochs < 0:
            errors.append(f"{prefix}.epochs must be >= 0")
        if not self.lr > 0:
            errors.append(f"{prefix}.lr must be > 0")
        if not 0 <= self.momentum < 1:
            errors.append(f"{prefix}.momentum must lie in [0, 1)")
        if self.batch_size < 1:
            errors.append(f"{prefix}.batch_size must be >= 1")
        if self.weight_decay < 0:
            errors.append(f"{prefix}.weight_decay must be >= 0")
        return errors


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 flip/rotate/mirror transforms on the last two axes."""
    out = np.rot90(arr, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return out


def fit(model: Model, images: np.ndarray, targets: np.ndarray, cfg: TrainConfig, seed: int) -> TrainHistory:
    """Train in place on (images, targets).

    ``targets`` are N,H,W masks for a segmentation model and N labels for a
    classifier. Shuffling and augmentation draw from one seeded stream, so
    identical inputs give bit-identical parameters.
    """
    hist = TrainHistory()
    n = len(images)
    if n == 0 or cfg.epochs == 0:
        return hist
    seg = model.kind == "segmentation"
    rng = np.random.Generator(np.random.Philox(seed))
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay, tuple(cfg.decay_epochs), cfg.decay_factor)
    masks = model.active_mask.masks if model.active_mask is not None else None
    for epoch in range(cfg.epochs):
        lr = opt.lr_at(epoch)
        order = rng.permutation(n)
        ks = rng.integers(0, 8, size=n) if cfg.augment else np.zeros(n, dtype=int)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = np.stack([dihedral(images[i], ks[i]) for i in idx])
            yb = np.stack([dihedral(targets[i], ks[i]) for i in idx]) if seg else targets[idx]
            model.zero_grad()
            T.reset_tape()
            try:
                loss = T.weighted_cross_entropy(forward(model, xb), yb, cfg.class_weights)
                loss.backward()
                sgd_step(model.params, opt, lr, masks)
            except NumericError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            total += loss.item() * len(idx)
        hist.losses.append(total / n)
        if not np.isfinite(hist.losses[-1]):
            raise TrainingDiverged(epoch, "loss is not finite")
        log.debug("epoch %d lr %.4g loss %.5f", epoch, lr, hist.losses[-1])
    model.zero_grad()
    return hist

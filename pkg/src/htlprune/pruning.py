"""Prune masks: global unstructured magnitude, structured filter magnitude, random.

Masks are applied non-destructively: :func:`apply_mask` keeps a shadow copy
of the dense weights so :func:`remove_mask` restores them bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .unet import ConfigError, Model

METHODS = ("unstructured-magnitude", "structured-magnitude", "random")


@dataclass
class PruneMask:
    masks: dict[str, np.ndarray]  # slot name -> bool array, True = kept
    ratio: float
    method: str
    seed: int = 0

    def total(self) -> int:
        return sum(m.size for m in self.masks.values())

    def zeros(self) -> int:
        return sum(int(m.size - np.count_nonzero(m)) for m in self.masks.values())


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"prune ratio must lie in [0, 1), got {ratio}")


def _flat_weights(model: Model) -> tuple[list[str], np.ndarray, list[int]]:
    names = model.prunable()
    arrays = [model.params[n].data.reshape(-1) for n in names]
    sizes = [a.size for a in arrays]
    return names, np.concatenate(arrays), sizes


def _split(names, flat_keep, sizes, model) -> dict[str, np.ndarray]:
    out, start = {}, 0
    for name, size in zip(names, sizes):
        out[name] = flat_keep[start:start + size].reshape(model.params[name].data.shape).copy()
        start += size
    return out


def prune_unstructured_magnitude(model: Model, ratio: float, apply: bool = True) -> PruneMask:
    """Zero the globally smallest-|w| fraction of prunable weights.

    Ties at the cut are resolved by (layer index, flat index) order, so exactly
    round(ratio * total) weights are pruned.
    """
    _check_ratio(ratio)
    names, flat, sizes = _flat_weights(model)
    k = int(round(ratio * flat.size))
    order = np.argsort(np.abs(flat), kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:k]] = False
    mask = PruneMask(_split(names, keep, sizes, model), ratio, "unstructured-magnitude")
    if apply:
        apply_mask(model, mask)
    return mask


def filter_scores(model: Model) -> list[tuple[float, int, int, str]]:
    """(L1 mean, layer index, filter index, slot) for every structurally prunable filter.

    The output layer is excluded: dropping one of its filters deletes a class.
    """
    rows = []
    for li, name in enumerate(model.prunable()):
        if name == f"{model.head}.weight":
            continue
        w = model.params[name].data
        per = np.abs(w.reshape(w.shape[0], -1)).mean(axis=1)
        rows.extend((float(s), li, fi, name) for fi, s in enumerate(per))
    return rows


def prune_structured_magnitude(model: Model, ratio: float, apply: bool = True) -> PruneMask:
    """Zero whole output filters in ascending order of element-normalized L1
    until the pruned fraction of all prunable weights first reaches ``ratio``."""
    _check_ratio(ratio)
    names = model.prunable()
    masks = {n: np.ones(model.params[n].data.shape, dtype=bool) for n in names}
    total = sum(m.size for m in masks.values())
    target = ratio * total
    zeroed = 0
    # sorted() is stable and tuples compare (score, layer, filter) lexicographically
    for score, li, fi, name in sorted(filter_scores(model)):
        if zeroed >= target - 1e-9:
            break
        masks[name][fi] = False
        zeroed += masks[name][fi].size
    mask = PruneMask(masks, ratio, "structured-magnitude")
    if apply:
        apply_mask(model, mask)
    return mask


def prune_random(model: Model, ratio: float, seed: int = 0, apply: bool = True) -> PruneMask:
    _check_ratio(ratio)
    names, flat, sizes = _flat_weights(model)
    k = int(round(ratio * flat.size))
    rng = np.random.Generator(np.random.Philox(seed))
    chosen = rng.permutation(flat.size)[:k]
    keep = np.ones(flat.size, dtype=bool)
    keep[chosen] = False
    mask = PruneMask(_split(names, keep, sizes, model), ratio, "random", seed)
    if apply:
        apply_mask(model, mask)
    return mask


def make_mask(model: Model, method: str, ratio: float, seed: int = 0) -> PruneMask:
    """Build a mask for ``method`` without touching the model."""
    if method == "unstructured-magnitude":
        return prune_unstructured_magnitude(model, ratio, apply=False)
    if method == "structured-magnitude":
        return prune_structured_magnitude(model, ratio, apply=False)
    if method == "random":
        return prune_random(model, ratio, seed, apply=False)
    raise ConfigError(f"unknown prune method {method!r}; expected one of {METHODS}")


def sparsity(mask: PruneMask) -> float:
    total = mask.total()
    return mask.zeros() / total if total else 0.0


def identity_mask(model: Model) -> PruneMask:
    return PruneMask({n: np.ones(model.params[n].data.shape, dtype=bool) for n in model.prunable()}, 0.0,
                     "unstructured-magnitude")


def apply_mask(model: Model, mask: PruneMask) -> None:
    """Zero masked weights in place. Re-applying is idempotent; the shadow
    copy always holds the dense weights from before the first apply."""
    for name, m in mask.masks.items():
        if name not in model.params:
            raise ConfigError(f"mask slot {name!r} not in model")
        if m.shape != model.params[name].data.shape:
            raise ConfigError(f"mask shape {m.shape} does not match {name} {model.params[name].data.shape}")
    if model.shadow is None:
        model.shadow = {name: model.params[name].data.copy() for name in mask.masks}
    for name, m in mask.masks.items():
        model.params[name].data = np.where(m, model.shadow[name], 0.0)
    model.active_mask = mask


def remove_mask(model: Model, mask: PruneMask | None = None) -> None:
    if model.shadow is None:
        return
    for name, dense in model.shadow.items():
        model.params[name].data = dense
    model.shadow = None
    model.active_mask = None


class masked:
    """Context manager: evaluate ``model`` under ``mask``, then restore it."""

    def __init__(self, model: Model, mask: PruneMask):
        self.model, self.mask = model, mask

    def __enter__(self) -> Model:
        apply_mask(self.model, self.mask)
        return self.model

    def __exit__(self, *exc) -> None:
        remove_mask(self.model, self.mask)

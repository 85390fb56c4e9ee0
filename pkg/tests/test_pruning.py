import numpy as np
import pytest
from hypothesis import given, strategies as st

from htlprune import pruning
from htlprune.unet import ArchConfig, ConfigError, build_unet


@pytest.fixture(scope="module")
def model():
    return build_unet(ArchConfig(depth=1, base_channels=4, input_size=8), seed=5)


def flat_abs(model):
    return np.concatenate([np.abs(model.params[n].data).ravel() for n in model.prunable()])


@given(st.floats(0.0, 0.95))
def test_unstructured_exact_count_and_cut(ratio):
    m = build_unet(ArchConfig(depth=1, base_channels=2, input_size=8), seed=1)
    mask = pruning.prune_unstructured_magnitude(m, ratio, apply=False)
    total = mask.total()
    assert mask.zeros() == round(ratio * total)
    keep = np.concatenate([mask.masks[n].ravel() for n in m.prunable()])
    w = flat_abs(m)
    if 0 < mask.zeros() < total:
        assert w[~keep].max() <= w[keep].min()


def test_unstructured_ties_broken_by_position():
    m = build_unet(ArchConfig(depth=1, base_channels=1, input_size=8), seed=0)
    for n in m.prunable():
        m.params[n].data[...] = 1.0
    mask = pruning.prune_unstructured_magnitude(m, 0.5, apply=False)
    keep = np.concatenate([mask.masks[n].ravel() for n in m.prunable()])
    k = round(0.5 * keep.size)
    assert not keep[:k].any() and keep[k:].all()


def test_structured_zeroes_whole_filters_and_spares_head(model):
    mask = pruning.prune_structured_magnitude(model, 0.5, apply=False)
    assert mask.masks["head.weight"].all()
    for n, m in mask.masks.items():
        per_filter = m.reshape(m.shape[0], -1)
        assert np.all(per_filter.all(axis=1) | ~per_filter.any(axis=1))
    assert mask.zeros() >= 0.5 * mask.total()


def test_structured_drops_lowest_normalized_l1_first(model):
    mask = pruning.prune_structured_magnitude(model, 0.05, apply=False)
    scores = pruning.filter_scores(model)
    dropped = [(s, n, f) for s, _, f, n in scores if not mask.masks[n][f].any()]
    kept = [(s, n, f) for s, _, f, n in scores if mask.masks[n][f].any()]
    assert dropped and max(d[0] for d in dropped) <= min(k[0] for k in kept)


def test_random_is_seed_deterministic(model):
    a = pruning.prune_random(model, 0.3, seed=4, apply=False)
    b = pruning.prune_random(model, 0.3, seed=4, apply=False)
    c = pruning.prune_random(model, 0.3, seed=5, apply=False)
    assert all(np.array_equal(a.masks[n], b.masks[n]) for n in a.masks)
    assert any(not np.array_equal(a.masks[n], c.masks[n]) for n in a.masks)
    assert a.zeros() == round(0.3 * a.total())


def test_apply_is_idempotent_and_reversible(model):
    dense = model.state_dict()
    mask = pruning.make_mask(model, "unstructured-magnitude", 0.6)
    pruning.apply_mask(model, mask)
    once = model.state_dict()
    pruning.apply_mask(model, mask)
    for k in once:
        np.testing.assert_array_equal(once[k], model.params[k].data)
    pruning.remove_mask(model)
    for k in dense:
        np.testing.assert_array_equal(dense[k], model.params[k].data)


def test_masked_context_restores(model):
    dense = model.state_dict()
    with pruning.masked(model, pruning.make_mask(model, "random", 0.5, seed=1)):
        assert pruning.sparsity(model.active_mask) == pytest.approx(0.5, abs=1e-3)
    assert model.active_mask is None
    for k in dense:
        np.testing.assert_array_equal(dense[k], model.params[k].data)


def test_ratio_zero_is_identity(model):
    for method in pruning.METHODS:
        assert pruning.make_mask(model, method, 0.0).zeros() == 0


@pytest.mark.parametrize("ratio", [-0.1, 1.0, 1.5])
def test_bad_ratio(model, ratio):
    with pytest.raises(ConfigError):
        pruning.make_mask(model, "random", ratio)


def test_unknown_method(model):
    with pytest.raises(ConfigError):
        pruning.make_mask(model, "hessian", 0.5)


def test_biases_are_never_masked(model):
    mask = pruning.make_mask(model, "unstructured-magnitude", 0.9)
    assert all(n.endswith(".weight") for n in mask.masks)

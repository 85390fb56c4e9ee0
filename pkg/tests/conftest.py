import numpy as np
import pytest
from hypothesis import settings

from htlprune import tensor as T

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _clean_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar f() with respect to every entry of arr (mutated in place)."""
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))

"""Shared test helpers: an independent finite-difference oracle."""

import numpy as np
import pytest


def fd_gradient(loss_fn, param, step=1e-6):
    """Central finite differences of ``loss_fn()`` w.r.t. a Tensor's data.

    Deliberately separate from the package's own gradient checker so that
    engine tests do not validate the engine with itself.
    """
    flat = param.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(param.data.shape)


def rel_err(a, b, floor=1e-4):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

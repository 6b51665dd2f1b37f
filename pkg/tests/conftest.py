"""Shared helpers: finite differences and tiny seeded fixtures."""

from __future__ import annotations

import numpy as np
import pytest

from calfat.nn import Model, flatten, forward, init_mlp, unflatten


def central_diff_params(loss_of_model, model: Model, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. flattened parameters."""
    flat = flatten(model)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += h
        down = flat.copy()
        down[i] -= h
        grad[i] = (loss_of_model(unflatten(up, model)) - loss_of_model(unflatten(down, model))) / (2 * h)
    return grad


def central_diff_array(loss_of_array, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. an array argument."""
    grad = np.empty_like(x)
    flat_view = grad.reshape(-1)
    x_flat = x.reshape(-1)
    for i in range(x_flat.size):
        up = x_flat.copy()
        up[i] += h
        down = x_flat.copy()
        down[i] -= h
        flat_view[i] = (loss_of_array(up.reshape(x.shape)) - loss_of_array(down.reshape(x.shape))) / (2 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def bundle_to_flat(grads, model: Model) -> np.ndarray:
    parts = []
    for gw, gb in zip(grads.weights, grads.biases):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_net(rng):
    return init_mlp(4, (6, 5), 3, rng)


def random_net(rng, depth_choices=((), (5,), (6, 4))):
    d = int(rng.integers(2, 6))
    C = int(rng.integers(2, 5))
    hidden = depth_choices[rng.integers(0, len(depth_choices))]
    return init_mlp(d, hidden, C, rng), d, C

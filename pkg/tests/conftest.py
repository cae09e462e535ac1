"""Shared fixtures: small configs, synthetic worlds, finite-difference helpers."""

import numpy as np
import pytest

from epiforge.config import ModelConfig
from epiforge.data import make_synthetic_world


def small_model_config(**kw):
    """Tiny architecture for fast gradient checks."""
    defaults = dict(
        fourier_dim=4,
        fourier_sigma=1.0,
        trunk_widths=(8, 8, 6),
        head_widths=(8,),
        encoder_hidden=4,
        encoder_layers=1,
        decoder_hidden=4,
    )
    defaults.update(kw)
    return ModelConfig(**defaults)


@pytest.fixture
def tiny_config():
    return small_model_config()


@pytest.fixture
def covid_world():
    ds, truth = make_synthetic_world(
        np.array([0.3, 0.2, 0.12, 0.02]), 1e6, 70, 0.03, seed=12
    )
    return ds, truth


def fd_param_grad(loss_fn, store: dict, name: str, indices, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. selected entries of one
    parameter array in ``store`` (mutated in place and restored)."""
    out = []
    arr = store[name]
    for idx in indices:
        orig = arr.flat[idx]
        arr.flat[idx] = orig + h
        fp = loss_fn()
        arr.flat[idx] = orig - h
        fm = loss_fn()
        arr.flat[idx] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def assert_grad_matches_fd(loss_builder, store: dict, rng, n_checks=4, rtol=1e-4, h=1e-5):
    """loss_builder() -> (loss_node, bound_map name->Node). Checks analytic
    gradients of a few random entries of every parameter against central FD."""
    from epiforge.autodiff import grad

    loss, bound = loss_builder()
    names = [n for n in bound if bound[n].is_param]
    grads = grad(loss, [bound[n] for n in names])
    for name, g in zip(names, grads):
        size = store[name].size
        k = min(n_checks, size)
        idx = rng.choice(size, size=k, replace=False)
        fd = fd_param_grad(lambda: loss_builder()[0].value, store, name, idx, h=h)
        ana = np.array([g.flat[i] for i in idx])
        denom = np.maximum(np.abs(fd), 1e-6)
        rel = np.abs(ana - fd) / denom
        assert np.max(rel) < rtol, f"{name}: analytic {ana} vs fd {fd}"

from __future__ import annotations

import numpy as np
import pytest

from igpode import diffmath as dm
from igpode.config import ExperimentConfig
from igpode.config import ModelConfig
from igpode.config import TrainConfig
from igpode.simdata import BallsConfig
from igpode.simdata import Split
from igpode.simdata import simulate_balls


def _numeric_grad(fn, values, h=1e-5, max_entries=None, rng=None):
    """Central differences of ``fn(values) -> float`` for every array in ``values``.

    With ``max_entries`` only that many randomly chosen entries per array are
    perturbed; the others are left as NaN.
    """
    out = {}
    for name, value in values.items():
        grad = np.full(value.shape, np.nan)
        flat = list(np.ndindex(value.shape))
        if max_entries is not None and len(flat) > max_entries:
            picks = rng.choice(len(flat), size=max_entries, replace=False)
            flat = [flat[i] for i in picks]
        for index in flat:
            original = value[index]
            value[index] = original + h
            up = fn(values)
            value[index] = original - h
            down = fn(values)
            value[index] = original
            grad[index] = (up - down) / (2.0 * h)
        out[name] = grad
    return out


def _assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    assert set(analytic) == set(numeric)
    for name in numeric:
        mask = ~np.isnan(numeric[name])
        np.testing.assert_allclose(
            analytic[name][mask],
            numeric[name][mask],
            rtol=rtol,
            atol=atol,
            err_msg=f"gradient mismatch for '{name}'",
        )


@pytest.fixture
def numeric_grad():
    return _numeric_grad


@pytest.fixture
def assert_grads_close():
    return _assert_grads_close


@pytest.fixture
def rng():
    return dm.make_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Small enough for finite differences and quick training runs."""
    return ModelConfig(
        num_inducing=5,
        num_features=16,
        hidden_f_s=8,
        hidden_f_b=8,
    )


@pytest.fixture
def tiny_experiment(tiny_model_config):
    return ExperimentConfig(
        tiny_model_config,
        TrainConfig(rounds=((5, 3), (8, 2)), batch_size=2, log_every=1),
    )


@pytest.fixture
def tiny_balls():
    config = BallsConfig(
        num_objects=2,
        num_train=4,
        num_test=2,
        num_steps=12,
        inner_steps=10,
    )
    return simulate_balls(config, seed=3, split=Split.TRAIN)

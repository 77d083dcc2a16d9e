import numpy as np
import pytest

from fkpm.application.fk_core import FeynmanKacModel
from fkpm.infrastructure.config import get_settings


TWO_STATE_M = np.array([[0.9, 0.1], [0.2, 0.8]])
TWO_STATE_G = np.array([0.5, 1.0])


@pytest.fixture
def two_state_model():
    return FeynmanKacModel.finite(
        eta0=[0.5, 0.5], kernels=TWO_STATE_M, potentials=TWO_STATE_G, horizon=3, name="two_state"
    )


@pytest.fixture
def three_state_model():
    M = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]])
    G = np.array([0.4, 1.0, 0.7])
    return FeynmanKacModel.finite(
        eta0=[0.2, 0.5, 0.3], kernels=M, potentials=G, horizon=4, name="three_state"
    )


def random_finite_model(rng: np.random.Generator, d: int, horizon: int, floor: float = 0.05):
    M = rng.uniform(floor, 1.0, size=(d, d))
    M /= M.sum(axis=1, keepdims=True)
    G = rng.uniform(0.2, 1.0, size=d)
    eta0 = rng.uniform(0.1, 1.0, size=d)
    return FeynmanKacModel.finite(eta0 / eta0.sum(), M, G, horizon, name="random")


@pytest.fixture
def isolated_settings(tmp_path, monkeypatch):
    monkeypatch.setenv("FKPM_DATABASE_URL", f"sqlite:///{tmp_path / 'fkpm.db'}")
    get_settings.cache_clear()
    yield get_settings()
    get_settings.cache_clear()


def within_4_sigma(samples, expected):
    samples = np.asarray(samples, dtype=float)
    se = samples.std(ddof=1) / np.sqrt(len(samples))
    return abs(samples.mean() - expected) <= 4.0 * se

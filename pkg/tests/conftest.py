import numpy as np
import pytest

from rdwgd.measures import DiscreteMeasure, RngSeed


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or benchmark test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, m, n, d, scale=1.0):
    mu = DiscreteMeasure(rng.normal(size=(m, d)) * scale, rng.dirichlet(np.ones(m)))
    nu = DiscreteMeasure(rng.normal(size=(n, d)) * scale, rng.dirichlet(np.ones(n)))
    return mu, nu


@pytest.fixture
def seed0():
    return RngSeed(0)

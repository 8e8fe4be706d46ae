import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from macfield.model import ClassParams, homogeneous, two_class
from macfield.scenarios import load_example


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def example1():
    return load_example("example1")


@pytest.fixture(scope="session")
def example2():
    return load_example("example2")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def k1_class():
    return ClassParams.from_rates([1.0, 0.5])


def random_mint_class(rng, k_max=8, label="H", sigma=1.0):
    K = int(rng.integers(1, k_max + 1))
    q = 1.0 - rng.random(K + 1)  # (0, 1]
    return ClassParams.from_rates(q, sigma=sigma, label=label)


def random_mono_class(rng, k_max=8, top=4.0, label="H", sigma=1.0):
    K = int(rng.integers(1, k_max + 1))
    q = np.sort(top * (1.0 - rng.random(K + 1)))[::-1]
    return ClassParams.from_rates(q, sigma=sigma, label=label)


def mint_homogeneous(rng, k_max=8):
    return homogeneous(random_mint_class(rng, k_max).q)


def random_two_class(rng, make, delta, k_max=6):
    sigma_h = float(rng.uniform(0.2, 0.8))
    h = make(rng, k_max)
    l = make(rng, k_max)
    return two_class(h.q, l.q, sigma_h=sigma_h, delta=delta)

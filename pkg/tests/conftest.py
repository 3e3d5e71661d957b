import numpy as np
import pytest

from polyfeed.genlyap import synthesize
from polyfeed.model import BurgersConfig, QuadraticControlSystem, make_burgers, make_scalar

PATCHES = ((0.1, 0.3), (0.6, 0.8))


@pytest.fixture(scope="session")
def burgers6():
    return make_burgers(BurgersConfig(6, 0.05, 1.0, PATCHES), alpha=0.1)


@pytest.fixture(scope="session")
def burgers4():
    return make_burgers(BurgersConfig(4, 0.05, 1.0, PATCHES), alpha=0.1)


@pytest.fixture(scope="session")
def scalar():
    return make_scalar(-1.0, 1.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def burgers6_d4(burgers6):
    return synthesize(burgers6, 4)


@pytest.fixture(scope="session")
def scalar_d3(scalar):
    return synthesize(scalar, 3)


@pytest.fixture(scope="session")
def linear3():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((3, 3)) + np.eye(3) * 0.5
    B = rng.standard_normal((3, 2))
    return QuadraticControlSystem(A, B, np.zeros((3, 3, 3)), 0.5, "linear")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)

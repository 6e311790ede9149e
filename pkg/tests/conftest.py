import numpy as np
import pytest
from hypothesis import settings

from scoreapprox.gridfilter import build_disc_occluded_grid, build_filter_plan, spacing_for_extent
from scoreapprox.kernels import PowerLawModel, PowerLawParams

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def powerlaw():
    return PowerLawModel(PowerLawParams(1.5, (7.0, 10.0)))


@pytest.fixture
def small_grid():
    dims = (12, 12)
    return build_disc_occluded_grid(dims, spacing_for_extent(dims), (40.0, 60.0), 15.0)


@pytest.fixture
def small_plan(small_grid):
    return build_filter_plan(small_grid, 1)


def random_spd(rng, n, spread=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    K = (Q * rng.uniform(1.0, spread, n)) @ Q.T
    return 0.5 * (K + K.T)


def random_sym(rng, n):
    A = rng.standard_normal((n, n))
    return A + A.T


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

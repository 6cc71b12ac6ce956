import numpy as np
import pytest

from mfg_models import GodunovQuadratic, MfgProblem, NonlocalCoupling, PowerCoupling
from torus_grid import TorusGrid


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def grid_1d():
    return TorusGrid(1, 8)


@pytest.fixture
def grid_2d():
    return TorusGrid(2, 6)


def random_density(grid, rng, low=0.5, high=1.5):
    M = rng.uniform(low, high, grid.node_count)
    return M / grid.mean(M)


@pytest.fixture
def stationary_1d():
    """Second-order 1D problem small enough for every solver to converge in well under a second."""
    grid = TorusGrid(1, 16)
    V = grid.sample(lambda x: np.sin(2 * np.pi * x) + 0.5 * np.cos(4 * np.pi * x))
    return MfgProblem(grid, 0.2, GodunovQuadratic(), PowerCoupling(1.0), V, name="small-1d")


@pytest.fixture
def stationary_2d():
    grid = TorusGrid(2, 6)
    V = grid.sample(lambda x, y: np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y))
    return MfgProblem(grid, 0.3, GodunovQuadratic(), PowerCoupling(1.0), V, name="small-2d")


@pytest.fixture
def timedep_1d():
    grid = TorusGrid(1, 8)
    V = grid.sample(lambda x: np.sin(2 * np.pi * x) + np.cos(4 * np.pi * x))
    m0 = grid.sample(lambda x: 1.0 + 0.3 * np.cos(2 * np.pi * x))
    return MfgProblem(grid, 0.1, GodunovQuadratic(), NonlocalCoupling(scale=1.0, repeats=2), V,
                      horizon=1.0, n_time=4, initial_density=m0, name="small-td")

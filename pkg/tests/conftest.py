import math

import numpy as np
import pytest

from bchopt.grid import Grid, TimeGrid

TWO_PI = 2 * math.pi


def smooth_phi0(grid: Grid, shift: float = 0.0) -> np.ndarray:
    if grid.dim == 1:
        (x,) = grid.cell_coords()
        return 0.5 * np.cos(x) + 0.2 * np.sin(2 * x) + shift
    X, Y = grid.cell_coords()
    return 0.6 * np.cos(X) * np.sin(Y) + 0.2 * np.cos(2 * Y) + shift


@pytest.fixture(params=["periodic", "box-neumann"])
def bc_mode(request):
    return request.param


@pytest.fixture
def grid2(bc_mode):
    return Grid((12, 10), (TWO_PI, 5.0), bc_mode)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_time():
    return TimeGrid(0.05, 5)

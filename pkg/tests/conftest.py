import numpy as np
import pytest

from mucor.grid import build_grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid4():
    return build_grid(4, 4)

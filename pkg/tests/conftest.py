import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facmap.field import Decoder, FactorizedGrid, SceneBounds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_bounds():
    return SceneBounds(np.array([0.0, 0.0, 0.0]), np.array([1.0, 1.0, 1.0]))


@pytest.fixture
def small_grid(unit_bounds, rng):
    return FactorizedGrid(unit_bounds, res=8, density_channels=3, appearance_channels=4, rng=rng)


@pytest.fixture
def small_decoder(small_grid, rng):
    return Decoder(feature_dim=small_grid.feature_dim, hidden=8, rng=rng)

from __future__ import annotations

import numpy as np
import pytest

from mapfm.core import BEVGridSpec


@pytest.fixture
def paper_grid() -> BEVGridSpec:
    return BEVGridSpec(rows=200, cols=100, x_range=(-30.0, 30.0), y_range=(-15.0, 15.0), resolution=0.3)


@pytest.fixture
def desk_grid() -> BEVGridSpec:
    return BEVGridSpec(rows=60, cols=30, x_range=(-30.0, 30.0), y_range=(-15.0, 15.0), resolution=1.0)


@pytest.fixture
def tiny_grid() -> BEVGridSpec:
    return BEVGridSpec(rows=30, cols=15, x_range=(-30.0, 30.0), y_range=(-15.0, 15.0), resolution=2.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)

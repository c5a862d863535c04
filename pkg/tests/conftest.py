import numpy as np
import pytest

from canopymap.grid import GridGeometry, Raster, RasterStack
from canopymap.geo import NAIP_ROLES


@pytest.fixture
def geom():
    return GridGeometry(100.0, 500.0, 1.0, 40, 30, "local")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def naip_stack(geom, rng):
    values = rng.uniform(0.05, 0.6, (4, geom.height, geom.width)).astype(np.float32)
    return RasterStack(geom, values, band_roles=NAIP_ROLES)


@pytest.fixture
def small_raster(geom, rng):
    values = rng.uniform(0.0, 50.0, (geom.height, geom.width)).astype(np.float32)
    return Raster(geom, values)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from canopymap.errors import AlignmentError, ConfigError
from canopymap.grid import (
    NODATA_BYTE,
    NODATA_FLOAT,
    GridGeometry,
    PatchSet,
    Raster,
    RasterStack,
)


def test_geometry_center_of():
    g = GridGeometry(100.0, 500.0, 2.0, 10, 5)
    assert g.center_of(0, 0) == (101.0, 499.0)
    assert g.center_of(4, 9) == (119.0, 491.0)


def test_geometry_bounds():
    g = GridGeometry(100.0, 500.0, 2.0, 10, 5)
    assert g.bounds == (100.0, 490.0, 120.0, 500.0)


def test_geometry_rejects_bad_pixel_size():
    with pytest.raises(ConfigError):
        GridGeometry(0.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ConfigError):
        GridGeometry(0.0, 0.0, -1.0, 4, 4)


def test_geometry_rejects_empty_grid():
    with pytest.raises(ConfigError):
        GridGeometry(0.0, 0.0, 1.0, 0, 4)


@given(
    row=st.integers(0, 99),
    col=st.integers(0, 99),
    ps=st.floats(0.1, 10.0, allow_nan=False),
)
def test_rowcol_of_inverts_center_of(row, col, ps):
    g = GridGeometry(-50.0, 80.0, ps, 100, 100)
    x, y = g.center_of(row, col)
    r, c = g.rowcol_of(np.array(x), np.array(y))
    assert (int(r), int(c)) == (row, col)


def test_contains_rowcol():
    g = GridGeometry(0.0, 10.0, 1.0, 10, 10)
    assert g.contains_rowcol(np.array(0), np.array(0))
    assert not g.contains_rowcol(np.array(-1), np.array(0))
    assert not g.contains_rowcol(np.array(0), np.array(10))


def test_alignable_with_checks_crs():
    a = GridGeometry(0.0, 10.0, 1.0, 10, 10, "epsg:1")
    b = GridGeometry(5.0, 20.0, 2.0, 3, 3, "epsg:1")
    c = GridGeometry(0.0, 10.0, 1.0, 10, 10, "epsg:2")
    assert a.alignable_with(b)
    assert not a.alignable_with(c)


def test_raster_promotes_2d():
    g = GridGeometry(0.0, 4.0, 1.0, 3, 4)
    r = Raster(g, np.zeros((4, 3), dtype=np.float32))
    assert r.values.shape == (1, 4, 3)
    assert r.band_count == 1


def test_raster_rejects_shape_mismatch():
    g = GridGeometry(0.0, 4.0, 1.0, 3, 4)
    with pytest.raises(AlignmentError):
        Raster(g, np.zeros((3, 3)))


def test_raster_valid_mask_nodata_and_nan():
    g = GridGeometry(0.0, 2.0, 1.0, 2, 2)
    vals = np.array([[1.0, NODATA_FLOAT], [np.nan, 4.0]], dtype=np.float32)
    r = Raster(g, vals)
    assert r.valid_mask()[0].tolist() == [[True, False], [False, True]]


def test_raster_filled():
    g = GridGeometry(0.0, 2.0, 1.0, 2, 2)
    r = Raster.filled(g, 7.0)
    assert (r.values == 7.0).all()


def test_data_requires_single_band():
    g = GridGeometry(0.0, 2.0, 1.0, 2, 2)
    r = Raster(g, np.zeros((2, 2, 2)))
    with pytest.raises(ConfigError):
        r.data


def test_stack_auto_roles():
    g = GridGeometry(0.0, 2.0, 1.0, 2, 2)
    s = RasterStack(g, np.zeros((3, 2, 2)))
    assert s.band_roles == ("band_1", "band_2", "band_3")


def test_stack_role_count_must_match():
    g = GridGeometry(0.0, 2.0, 1.0, 2, 2)
    with pytest.raises(ConfigError):
        RasterStack(g, np.zeros((3, 2, 2)), band_roles=("a", "b"))


def test_patchset_subset_roundtrip():
    n, c, s = 5, 2, 8
    ps = PatchSet(
        inputs=np.arange(n * c * s * s, dtype=np.float32).reshape(n, c, s, s),
        tree_mask=np.zeros((n, s, s), np.float32),
        height=np.zeros((n, s, s), np.float32),
        aux_mask=np.zeros((n, s, s), np.float32),
        band_roles=("a", "b"),
    )
    sub = ps.subset(np.array([0, 3]))
    assert len(sub) == 2
    assert sub.in_bands == c
    assert sub.patch_size == s
    np.testing.assert_array_equal(sub.inputs[1], ps.inputs[3])


def test_nodata_constants():
    assert NODATA_FLOAT == -9999.0
    assert NODATA_BYTE == 255

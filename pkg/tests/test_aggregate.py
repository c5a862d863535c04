"""Tests for citywide and zonal canopy statistics."""

import numpy as np
import pytest

from canopymap.aggregate import (
    ZonePolygon,
    ZoneStats,
    canopy_height,
    citywide_cover,
    format_percent,
    read_zones,
    validate_zone,
    write_zones,
    zonal_stats,
    zone_membership,
    zone_stats_csv,
)
from canopymap.errors import AlignmentError, DataError
from canopymap.grid import NODATA_FLOAT, GridGeometry, Raster


def pnpoly(rings, x, y):
    """Textbook even-odd crossing test for a point against a list of rings."""
    inside = False
    for ring in rings:
        n = len(ring)
        j = n - 1
        for i in range(n):
            xi, yi = ring[i]
            xj, yj = ring[j]
            if (yi > y) != (yj > y) and x < xi + (y - yi) * (xj - xi) / (yj - yi):
                inside = not inside
            j = i
    return inside


# ---------------------------------------------------------------------------
# canopy height and citywide cover
# ---------------------------------------------------------------------------

def test_canopy_height_masks_and_zeroes(geom):
    mask = Raster(geom, np.zeros((geom.height, geom.width), dtype=np.float32), NODATA_FLOAT)
    height = Raster(geom, np.full((geom.height, geom.width), 7.5, dtype=np.float32), NODATA_FLOAT)
    mask.data[0, 0] = 1.0
    mask.data[0, 1] = 1.0
    height.data[0, 1] = NODATA_FLOAT
    out = canopy_height(mask, height)
    assert out.data[0, 0] == 7.5
    assert out.data[0, 1] == 0.0  # nodata height zeroed
    assert out.data[5, 5] == 0.0  # unmasked zeroed


def test_canopy_height_geometry_mismatch(geom):
    other = GridGeometry(geom.origin_x + 1, geom.origin_y, geom.pixel_size,
                         geom.width, geom.height, geom.crs_tag)
    a = Raster(geom, np.zeros((geom.height, geom.width), dtype=np.float32), NODATA_FLOAT)
    b = Raster(other, np.zeros((geom.height, geom.width), dtype=np.float32), NODATA_FLOAT)
    with pytest.raises(AlignmentError):
        canopy_height(a, b)


def test_format_percent():
    assert format_percent(59 / 1000) == "5.9%"
    assert format_percent(0.0) == "0.0%"
    assert format_percent(1.0) == "100.0%"
    assert format_percent(0.12345) == "12.3%"


def test_citywide_cover_counts_valid_ones(geom):
    data = np.zeros((geom.height, geom.width), dtype=np.float32)
    data[:10, :10] = 1.0
    data[0, :] = NODATA_FLOAT
    mask = Raster(geom, data, NODATA_FLOAT)
    valid = geom.width * geom.height - geom.width
    ones = 9 * 10
    assert abs(citywide_cover(mask) - ones / valid) < 1e-12


def test_citywide_cover_rejects_non_binary(geom):
    data = np.full((geom.height, geom.width), 0.5, dtype=np.float32)
    with pytest.raises(DataError, match="binary"):
        citywide_cover(Raster(geom, data, NODATA_FLOAT))


def test_citywide_cover_rejects_all_nodata(geom):
    data = np.full((geom.height, geom.width), NODATA_FLOAT, dtype=np.float32)
    with pytest.raises(DataError, match="valid"):
        citywide_cover(Raster(geom, data, NODATA_FLOAT))


# ---------------------------------------------------------------------------
# zone polygons
# ---------------------------------------------------------------------------

def square(x0, y0, side, zid="z"):
    return ZonePolygon(zid, [[x0, y0], [x0 + side, y0], [x0 + side, y0 + side], [x0, y0 + side]])


def test_ring_closure_is_stripped():
    zone = ZonePolygon("z", [[0, 0], [4, 0], [4, 4], [0, 4], [0, 0]])
    assert zone.exterior.shape == (4, 2)


def test_ring_shape_validation():
    with pytest.raises(DataError, match="ring"):
        ZonePolygon("z", [[0, 0, 0], [1, 1, 1]])


def test_validate_zone_accepts_square():
    validate_zone(square(0, 0, 4))


def test_validate_zone_rejects_bowtie():
    bowtie = ZonePolygon("b", [[0, 0], [4, 4], [4, 0], [0, 4]])
    with pytest.raises(DataError, match="self-intersect"):
        validate_zone(bowtie)


def test_validate_zone_rejects_degenerate():
    with pytest.raises(DataError, match="vertices"):
        validate_zone(ZonePolygon("d", [[0, 0], [1, 1]]))
    bad = ZonePolygon("n", [[0, 0], [np.nan, 1], [1, 0]])
    with pytest.raises(DataError, match="finite"):
        validate_zone(bad)


# ---------------------------------------------------------------------------
# membership vs a brute-force point-in-polygon oracle
# ---------------------------------------------------------------------------

def star_polygon(rng, cx, cy, n_verts, r_lo, r_hi):
    """Random star-shaped (hence simple) polygon around (cx, cy)."""
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_verts))
    radii = rng.uniform(r_lo, r_hi, size=n_verts)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def test_membership_matches_brute_force_oracle():
    geom = GridGeometry(0.0, 12.0, 1.0, 12, 12, "local")
    xs, ys = geom.center_coords()
    rng = np.random.default_rng(7)
    for k in range(10):
        ring = star_polygon(rng, rng.uniform(3, 9), rng.uniform(3, 9), 7, 1.5, 5.0)
        zone = ZonePolygon(f"s{k}", ring)
        got = zone_membership(zone, geom)
        for r in range(12):
            for c in range(12):
                assert got[r, c] == pnpoly([ring], xs[c], ys[r]), (k, r, c)


def test_membership_hole_is_excluded():
    geom = GridGeometry(0.0, 10.0, 1.0, 10, 10, "local")
    outer = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]]
    hole = [[3.0, 3.0], [7.0, 3.0], [7.0, 7.0], [3.0, 7.0]]
    donut = ZonePolygon("d", outer, (hole,))
    inside = zone_membership(donut, geom)
    assert inside.sum() == 100 - 16
    assert not inside[4, 4]
    assert inside[0, 0]


def test_quadrant_zones_partition_the_grid_exactly():
    geom = GridGeometry(0.0, 20.0, 1.0, 20, 20, "local")
    half = 10.0
    quads = [
        ZonePolygon("q0", [[0, half], [half, half], [half, 20.0], [0, 20.0]]),
        ZonePolygon("q1", [[half, half], [20.0, half], [20.0, 20.0], [half, 20.0]]),
        ZonePolygon("q2", [[0, 0], [half, 0], [half, half], [0, half]]),
        ZonePolygon("q3", [[half, 0], [20.0, 0], [20.0, half], [half, half]]),
    ]
    total = np.zeros((20, 20), dtype=int)
    for q in quads:
        total += zone_membership(q, geom).astype(int)
    # shared edges must not double-count or drop pixels
    np.testing.assert_array_equal(total, np.ones((20, 20), dtype=int))


# ---------------------------------------------------------------------------
# zonal statistics
# ---------------------------------------------------------------------------

def make_rasters():
    geom = GridGeometry(0.0, 10.0, 1.0, 10, 10, "local")
    mask = np.zeros((10, 10), dtype=np.float32)
    mask[0:2, 0:3] = 1.0  # 6 tree pixels in the top-left
    mask[9, 9] = NODATA_FLOAT
    height = np.zeros((10, 10), dtype=np.float32)
    height[0:2, 0:3] = 30.0
    height[0, 0] = 60.0
    return Raster(geom, mask, NODATA_FLOAT), Raster(geom, height, NODATA_FLOAT)


def test_zonal_stats_hand_case():
    mask, height = make_rasters()
    stats = zonal_stats(mask, height, [square(0.0, 5.0, 5.0, "tl")])
    (s,) = stats
    assert s.zone_id == "tl"
    assert s.pixel_count == 25
    assert abs(s.tree_cover - 6 / 25) < 1e-12
    assert abs(s.mean_canopy_height - (5 * 30.0 + 60.0) / 6) < 1e-6
    assert s.error is None


def test_zonal_stats_records_invalid_zone_and_continues():
    mask, height = make_rasters()
    bowtie = ZonePolygon("bad", [[0, 0], [4, 4], [4, 0], [0, 4]])
    stats = zonal_stats(mask, height, [bowtie, square(0.0, 5.0, 5.0, "ok")])
    assert stats[0].zone_id == "bad"
    assert stats[0].error is not None
    assert stats[0].tree_cover is None
    assert stats[1].zone_id == "ok"
    assert stats[1].error is None


def test_zonal_stats_zone_outside_grid():
    mask, height = make_rasters()
    (s,) = zonal_stats(mask, height, [square(100.0, 100.0, 5.0, "far")])
    assert s.pixel_count == 0
    assert s.tree_cover is None
    assert s.mean_canopy_height is None
    assert s.error is None


def test_zonal_stats_excludes_nodata_pixels():
    mask, height = make_rasters()
    (s,) = zonal_stats(mask, height, [square(5.0, 0.0, 5.0, "br")])
    assert s.pixel_count == 24  # one nodata pixel dropped
    assert s.tree_cover == 0.0
    assert s.mean_canopy_height is None


def test_zonal_stats_geometry_mismatch():
    mask, height = make_rasters()
    other = GridGeometry(1.0, 10.0, 1.0, 10, 10, "local")
    height2 = Raster(other, height.data.copy(), NODATA_FLOAT)
    with pytest.raises(AlignmentError):
        zonal_stats(mask, height2, [])


def test_zonal_stats_overlapping_zones_both_count():
    mask, height = make_rasters()
    stats = zonal_stats(mask, height, [square(0, 5, 5, "a"), square(0, 5, 5, "b")])
    assert stats[0].pixel_count == stats[1].pixel_count == 25


def test_zone_stats_csv_layout():
    rows = [
        ZoneStats("q0", 25, 6 / 25, 35.0),
        ZoneStats("empty", 0, None, None),
        ZoneStats("bad", 0, None, None, error="ring self-intersects"),
    ]
    text = zone_stats_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "zone_id,pixel_count,tree_cover,mean_canopy_height"
    assert lines[1] == f"q0,25,{6 / 25!r},35.0"
    assert lines[2] == "empty,0,,"


# ---------------------------------------------------------------------------
# GeoJSON round trip
# ---------------------------------------------------------------------------

def test_zones_round_trip(tmp_path):
    zones = [
        square(0, 0, 5, "a"),
        ZonePolygon("d", [[0, 0], [10, 0], [10, 10], [0, 10]],
                    ([[3, 3], [7, 3], [7, 7], [3, 7]],)),
    ]
    path = tmp_path / "zones.geojson"
    write_zones(path, zones)
    back = read_zones(path)
    assert [z.id for z in back] == ["a", "d"]
    np.testing.assert_array_equal(back[0].exterior, zones[0].exterior)
    assert len(back[1].holes) == 1
    np.testing.assert_array_equal(back[1].holes[0], zones[1].holes[0])


def test_read_zones_multipolygon_parts(tmp_path):
    doc = {
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature",
            "properties": {"id": "twin"},
            "geometry": {
                "type": "MultiPolygon",
                "coordinates": [
                    [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]],
                    [[[5, 5], [6, 5], [6, 6], [5, 6], [5, 5]]],
                ],
            },
        }],
    }
    path = tmp_path / "multi.geojson"
    path.write_text(__import__("json").dumps(doc))
    zones = read_zones(path)
    assert [z.id for z in zones] == ["twin:part0", "twin:part1"]


def test_read_zones_id_fallbacks(tmp_path):
    import json

    doc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "id": 7, "properties": {},
             "geometry": {"type": "Polygon",
                          "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 0]]]}},
            {"type": "Feature", "properties": {},
             "geometry": {"type": "Polygon",
                          "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 0]]]}},
        ],
    }
    path = tmp_path / "ids.geojson"
    path.write_text(json.dumps(doc))
    zones = read_zones(path)
    assert [z.id for z in zones] == ["7", "zone_1"]


def test_read_zones_rejects_bad_documents(tmp_path):
    path = tmp_path / "bad.geojson"
    path.write_text("{not json")
    with pytest.raises(DataError, match="invalid GeoJSON"):
        read_zones(path)
    path.write_text('{"type": "Feature"}')
    with pytest.raises(DataError, match="FeatureCollection"):
        read_zones(path)
    import json

    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"id": "p"},
         "geometry": {"type": "Point", "coordinates": [0, 0]}}]}
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="unsupported"):
        read_zones(path)
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {"id": "e"},
         "geometry": {"type": "Polygon", "coordinates": []}}]}
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="no rings"):
        read_zones(path)

"""Canopy statistics: masked canopy height, city-wide cover, and per-zone
(polygon) aggregation.

Zone membership uses the even-odd (ray crossing) rule on pixel centers: a
pixel belongs to a zone iff a ray from its center crosses the zone's rings an
odd number of times. Points exactly on a boundary land on exactly one side,
so a zone set that partitions the raster partitions its pixels exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AlignmentError, DataError
from .grid import NODATA_FLOAT, Raster


def canopy_height(pred_mask: Raster, pred_height: Raster) -> Raster:
    """Height where the mask is set, 0 elsewhere (and where height is nodata)."""
    if pred_mask.geometry != pred_height.geometry:
        raise AlignmentError("mask and height geometries differ")
    mask = (pred_mask.data != pred_mask.nodata) & (pred_mask.data != 0)
    heights = np.where(pred_height.valid_mask()[0], pred_height.data, 0.0)
    values = np.where(mask, heights, 0.0).astype(np.float32)
    return Raster(pred_mask.geometry, values, NODATA_FLOAT)


def format_percent(fraction: float) -> str:
    """0.059 -> "5.9%"."""
    return f"{fraction * 100:.1f}%"


def citywide_cover(mask: Raster) -> float:
    """Fraction of valid pixels that are ones."""
    valid = mask.valid_mask()[0]
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DataError("mask has no valid pixels")
    vals = mask.data[valid]
    if not np.isin(vals, (0, 1)).all():
        raise DataError("cover input must be a binary mask")
    return float((vals == 1).sum() / n_valid)


# ---------------------------------------------------------------------------
# Zones
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZonePolygon:
    """A single polygon zone: exterior ring plus optional holes, stored as
    open (n, 2) coordinate arrays in map units."""

    id: str
    exterior: np.ndarray
    holes: tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "exterior", _as_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in self.holes))

    @property
    def rings(self) -> tuple[np.ndarray, ...]:
        return (self.exterior, *self.holes)


def _as_ring(ring) -> np.ndarray:
    arr = np.asarray(ring, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"ring must be (n, 2) coordinates, got shape {arr.shape}")
    if arr.shape[0] >= 2 and np.array_equal(arr[0], arr[-1]):
        arr = arr[:-1]  # stored open; closure is implicit
    return arr


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_segment(a, b, c):
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_segment(p1, p2, p3):
        return True
    if o2 == 0 and on_segment(p1, p2, p4):
        return True
    if o3 == 0 and on_segment(p3, p4, p1):
        return True
    if o4 == 0 and on_segment(p3, p4, p2):
        return True
    return False


def validate_zone(zone: ZonePolygon) -> None:
    """Raise DataError when a ring is degenerate or self-intersecting.

    Non-adjacent edge pairs of each ring must not touch (pairwise O(n^2)
    orientation tests).
    """
    for ring in zone.rings:
        n = ring.shape[0]
        if n < 3:
            raise DataError(f"zone {zone.id!r}: ring has {n} vertices, need >= 3")
        if not np.isfinite(ring).all():
            raise DataError(f"zone {zone.id!r}: non-finite ring coordinates")
        edges = [(ring[i], ring[(i + 1) % n]) for i in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue  # adjacent edges share a vertex by construction
                if _segments_intersect(*edges[i], *edges[j]):
                    raise DataError(
                        f"zone {zone.id!r}: ring self-intersects (edges {i} and {j})"
                    )


def _ring_crossings(ring: np.ndarray, xs: np.ndarray, ys: np.ndarray, parity: np.ndarray) -> None:
    """XOR the even-odd parity grid with one ring's crossing pattern.

    For each edge and each row y in its half-open y-span, the columns whose
    center lies strictly left of the edge/row intersection are toggled.
    """
    n = ring.shape[0]
    for i in range(n):
        x1, y1 = ring[i]
        x2, y2 = ring[(i + 1) % n]
        if y1 == y2:
            continue
        rows = np.flatnonzero((y1 > ys) != (y2 > ys))
        if rows.size == 0:
            continue
        x_int = x1 + (ys[rows] - y1) * (x2 - x1) / (y2 - y1)
        parity[rows] ^= xs[None, :] < x_int[:, None]


def zone_membership(zone: ZonePolygon, geometry) -> np.ndarray:
    """Boolean (H, W) grid: True where the pixel center is inside the zone."""
    xs, ys = geometry.center_coords()
    parity = np.zeros((geometry.height, geometry.width), dtype=bool)
    for ring in zone.rings:
        _ring_crossings(ring, xs, ys, parity)
    return parity


@dataclass(frozen=True)
class ZoneStats:
    zone_id: str
    pixel_count: int
    tree_cover: float | None
    mean_canopy_height: float | None
    error: str | None = None


def zonal_stats(mask: Raster, height: Raster, zones: list[ZonePolygon]) -> list[ZoneStats]:
    """Per-zone pixel count, tree-cover fraction, and mean canopy height.

    Pixel counts cover valid mask pixels only; mean height averages the
    height raster over the zone's tree pixels. An invalid polygon produces a
    ZoneStats carrying its error message, and processing continues.
    Overlapping zones each count shared pixels.
    """
    if mask.geometry != height.geometry:
        raise AlignmentError("mask and height geometries differ")
    valid = mask.valid_mask()[0]
    tree = valid & (mask.data != 0)
    heights = height.data
    out: list[ZoneStats] = []
    for zone in zones:
        try:
            validate_zone(zone)
            inside = zone_membership(zone, mask.geometry)
        except DataError as exc:
            out.append(ZoneStats(zone.id, 0, None, None, error=str(exc)))
            continue
        count = int((inside & valid).sum())
        if count == 0:
            out.append(ZoneStats(zone.id, 0, None, None))
            continue
        tree_px = inside & tree
        n_tree = int(tree_px.sum())
        cover = n_tree / count
        mean_h = float(heights[tree_px].mean()) if n_tree else None
        out.append(ZoneStats(zone.id, count, cover, mean_h))
    return out


def zone_stats_csv(stats: list[ZoneStats]) -> str:
    lines = ["zone_id,pixel_count,tree_cover,mean_canopy_height"]
    for s in stats:
        cover = "" if s.tree_cover is None else repr(float(s.tree_cover))
        mean_h = "" if s.mean_canopy_height is None else repr(float(s.mean_canopy_height))
        lines.append(f"{s.zone_id},{s.pixel_count},{cover},{mean_h}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# GeoJSON zones
# ---------------------------------------------------------------------------

def read_zones(path: str | Path) -> list[ZonePolygon]:
    """Read Polygon/MultiPolygon features; the zone id comes from the feature
    `id` or its `id` property, falling back to the feature index. MultiPolygon
    parts become separate zones suffixed ``:part<k>``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid GeoJSON ({exc})") from exc
    features = doc.get("features")
    if doc.get("type") != "FeatureCollection" or features is None:
        raise DataError(f"{path}: expected a GeoJSON FeatureCollection")
    zones: list[ZonePolygon] = []
    for fi, feature in enumerate(features):
        geom = feature.get("geometry") or {}
        gtype = geom.get("type")
        props = feature.get("properties") or {}
        zone_id = str(feature.get("id", props.get("id", f"zone_{fi}")))
        if gtype == "Polygon":
            polys = [geom.get("coordinates", [])]
        elif gtype == "MultiPolygon":
            polys = geom.get("coordinates", [])
        else:
            raise DataError(f"{path}: feature {zone_id!r} has unsupported geometry {gtype!r}")
        multi = len(polys) > 1
        for pi, rings in enumerate(polys):
            if not rings:
                raise DataError(f"{path}: feature {zone_id!r} has no rings")
            pid = f"{zone_id}:part{pi}" if multi else zone_id
            zones.append(ZonePolygon(pid, rings[0], tuple(rings[1:])))
    return zones


def write_zones(path: str | Path, zones: list[ZonePolygon]) -> None:
    features = []
    for zone in zones:
        rings = [ring.tolist() + [ring[0].tolist()] for ring in zone.rings]
        features.append({
            "type": "Feature",
            "properties": {"id": zone.id},
            "geometry": {"type": "Polygon", "coordinates": rings},
        })
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

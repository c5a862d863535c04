"""LiDAR ground-truth pipeline: point masking and filtering, canopy height
models, treetop detection, crown segmentation, and truth rasterization.

Conventions: point z is height above ground in feet (the cloud is assumed
height-normalized); the grid and its map units are declared by the caller's
GridGeometry and no unit conversion is ever implied. Feet-valued defaults
(6 ft, 80 ft) and map-unit-valued defaults (window radii, edge lengths) are
therefore separate knobs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

from .errors import AlignmentError, ConfigError, DataError
from .grid import NODATA_FLOAT, GridGeometry, Raster

FT_PER_M = 1.0 / 0.3048

# Pit-free layer ladder: 0/2/5/10/15 m expressed in feet, since z is in feet.
DEFAULT_PITFREE_THRESHOLDS_FT = tuple(m * FT_PER_M for m in (0.0, 2.0, 5.0, 10.0, 15.0))
# Max triangle edge in map units: tighter for the ground layer than for the
# elevated layers.
DEFAULT_MAX_EDGE = (1.5, 5.0)


@dataclass(frozen=True)
class PointCloud:
    """Height-normalized points as an (n, 3) float64 array of x, y, z."""

    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"point cloud must be (n, 3), got {pts.shape}")
        if pts.size and not np.isfinite(pts).all():
            raise DataError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]


@dataclass(frozen=True)
class TreeTop:
    row: int
    col: int
    height: float
    id: int


@dataclass(frozen=True)
class CrownMap:
    """Per-pixel crown labels: 0 = no tree, k > 0 = crown of treetop k."""

    geometry: GridGeometry
    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.shape != self.geometry.shape:
            raise AlignmentError(
                f"labels shape {labels.shape} != geometry shape {self.geometry.shape}"
            )
        object.__setattr__(self, "labels", labels.astype(np.int32))


# ---------------------------------------------------------------------------
# Point filters
# ---------------------------------------------------------------------------

def mask_by_ndvi(cloud: PointCloud, ndvi: Raster, threshold: float = 0.05) -> PointCloud:
    """Keep points vertically aligned with NDVI strictly above the threshold.

    Points over nodata pixels or outside the raster extent are removed.
    """
    if ndvi.band_count != 1:
        raise ConfigError("ndvi raster must be single-band")
    if len(cloud) == 0:
        return cloud
    row, col = ndvi.geometry.rowcol_of(cloud.x, cloud.y)
    inside = ndvi.geometry.contains_rowcol(row, col)
    keep = np.zeros(len(cloud), dtype=bool)
    ri = row[inside]
    ci = col[inside]
    vals = ndvi.values[0][ri, ci]
    ok = ndvi.valid_mask()[0][ri, ci] & (vals > threshold)
    keep[np.flatnonzero(inside)[ok]] = True
    return PointCloud(cloud.points[keep])


def filter_height(cloud: PointCloud, zmin: float = 6.0, zmax: float = 80.0) -> PointCloud:
    """Keep points with zmin <= z <= zmax (bounds inclusive, in feet)."""
    if zmin > zmax:
        raise ConfigError(f"zmin {zmin} > zmax {zmax}")
    keep = (cloud.z >= zmin) & (cloud.z <= zmax)
    return PointCloud(cloud.points[keep])


# ---------------------------------------------------------------------------
# Canopy height models
# ---------------------------------------------------------------------------

def naive_chm(cloud: PointCloud, geometry: GridGeometry) -> Raster:
    """Per-pixel maximum z of the contained points; empty pixels are nodata."""
    out = np.full(geometry.shape, -np.inf, dtype=np.float64)
    if len(cloud):
        row, col = geometry.rowcol_of(cloud.x, cloud.y)
        inside = geometry.contains_rowcol(row, col)
        flat = row[inside] * geometry.width + col[inside]
        np.maximum.at(out.reshape(-1), flat, cloud.z[inside])
    values = np.where(np.isfinite(out), out, NODATA_FLOAT).astype(np.float32)
    return Raster(geometry, values, NODATA_FLOAT)


def _layer_max_edge(max_edge: float | tuple[float, float], layer_index: int) -> float:
    if np.isscalar(max_edge):
        return float(max_edge)
    first, rest = max_edge
    return float(first if layer_index == 0 else rest)


def pitfree_chm(
    cloud: PointCloud,
    geometry: GridGeometry,
    height_thresholds: tuple[float, ...] = DEFAULT_PITFREE_THRESHOLDS_FT,
    max_edge: float | tuple[float, float] = DEFAULT_MAX_EDGE,
) -> Raster:
    """Pit-free canopy height model.

    For each ascending height threshold t, the points with z >= t are
    Delaunay-triangulated, triangles with any edge longer than the layer's
    max_edge are dropped, and the linear interpolant is sampled at pixel
    centers. The output pixel is the maximum over all layers and over the
    per-pixel point maximum, so it is never below the naive CHM where both
    are defined. Pixels covered by nothing are nodata.
    """
    thresholds = tuple(float(t) for t in height_thresholds)
    if not thresholds:
        raise ConfigError("height_thresholds must be non-empty")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError(f"height_thresholds must be strictly ascending: {thresholds}")
    if len(cloud) < 3:
        raise DataError(f"pit-free CHM needs >= 3 points, got {len(cloud)}")

    xs, ys = geometry.center_coords()
    centers = np.stack(
        [np.repeat(xs[None, :], geometry.height, 0).ravel(),
         np.repeat(ys[:, None], geometry.width, 1).ravel()],
        axis=1,
    )
    out = np.full(geometry.height * geometry.width, -np.inf, dtype=np.float64)

    for li, t in enumerate(thresholds):
        sel = cloud.z >= t
        pts = cloud.points[sel]
        if pts.shape[0] < 3:
            if li == 0:
                raise DataError("ground layer has fewer than 3 points")
            continue
        try:
            tri = Delaunay(pts[:, :2])
        except QhullError as exc:
            if li == 0:
                raise DataError(f"ground layer is degenerate: {exc}") from exc
            continue

        edge_limit = _layer_max_edge(max_edge, li)
        verts = tri.points[tri.simplices]  # (nt, 3, 2)
        e = verts - np.roll(verts, 1, axis=1)
        edge_sq = (e ** 2).sum(axis=2)
        keep = (edge_sq <= edge_limit ** 2).all(axis=1)

        simplex = tri.find_simplex(centers)
        inside = simplex >= 0
        inside[inside] &= keep[simplex[inside]]
        if not inside.any():
            continue
        s = simplex[inside]
        # barycentric interpolation of z over each containing triangle
        transform = tri.transform[s]
        delta = centers[inside] - transform[:, 2]
        bary01 = np.einsum("nij,nj->ni", transform[:, :2], delta)
        bary = np.concatenate([bary01, 1.0 - bary01.sum(axis=1, keepdims=True)], axis=1)
        layer_z = (bary * pts[:, 2][tri.simplices[s]]).sum(axis=1)
        np.maximum.at(out, np.flatnonzero(inside), layer_z)

    naive = naive_chm(cloud, geometry)
    nv = naive.values[0].reshape(-1)
    defined = nv != NODATA_FLOAT
    out[defined] = np.maximum(out[defined], nv[defined])

    values = np.where(np.isfinite(out), out, NODATA_FLOAT).astype(np.float32)
    return Raster(geometry, values.reshape(geometry.shape), NODATA_FLOAT)


# ---------------------------------------------------------------------------
# Treetops and crowns
# ---------------------------------------------------------------------------

def _circular_offsets(radius: float, pixel_size: float) -> np.ndarray:
    k = int(np.floor(radius / pixel_size))
    dy, dx = np.mgrid[-k : k + 1, -k : k + 1]
    keep = (dy ** 2 + dx ** 2) * pixel_size ** 2 <= radius ** 2
    return np.stack([dy[keep], dx[keep]], axis=1)


def local_maxima(chm: Raster, window_radius: float = 3.0, min_height: float = 6.0) -> list[TreeTop]:
    """Detect treetops as local maxima of the CHM in a circular window.

    window_radius is in map units, min_height in feet. A pixel is a top iff
    its value is >= min_height and >= every value in the window; when two
    equal candidates share a window, the earlier one in row-major order wins
    and the later is suppressed.
    """
    g = chm.geometry
    if window_radius < g.pixel_size:
        raise ConfigError(
            f"window_radius {window_radius} is below the pixel size {g.pixel_size}"
        )
    vals = np.where(chm.valid_mask()[0], chm.values[0].astype(np.float64), -np.inf)
    offsets = _circular_offsets(window_radius, g.pixel_size)
    k = offsets[:, 0].max()
    fp = np.zeros((2 * k + 1, 2 * k + 1), dtype=bool)
    fp[offsets[:, 0] + k, offsets[:, 1] + k] = True
    win_max = ndimage.maximum_filter(vals, footprint=fp, mode="constant", cval=-np.inf)
    cand = (vals >= min_height) & (vals >= win_max)

    taken = np.zeros(g.shape, dtype=bool)
    tops: list[TreeTop] = []
    for r, c in np.argwhere(cand):
        rr = offsets[:, 0] + r
        cc = offsets[:, 1] + c
        ok = (rr >= 0) & (rr < g.height) & (cc >= 0) & (cc < g.width)
        if taken[rr[ok], cc[ok]].any():
            continue
        taken[r, c] = True
        tops.append(TreeTop(int(r), int(c), float(vals[r, c]), len(tops) + 1))
    return tops


def dalponte_segment(
    chm: Raster,
    tops: list[TreeTop],
    th_seed: float = 0.45,
    th_cr: float = 0.55,
    th_tree: float = 6.0,
    max_cr_pixels: float = 10.0,
) -> CrownMap:
    """Grow a crown around each treetop on the CHM.

    Crowns are processed whole, in descending seed height (ties by id). Each
    round collects the unlabeled 4-neighbors of the crown and admits those
    with height > th_seed * seed height, > th_cr * the crown's mean height at
    the start of the round, >= th_tree, and within max_cr_pixels (Euclidean
    pixel distance) of the seed. Contested pixels therefore go to the
    first-processed crown.
    """
    if not 0.0 < th_seed < 1.0:
        raise ConfigError(f"th_seed must be in (0, 1), got {th_seed}")
    if not 0.0 < th_cr < 1.0:
        raise ConfigError(f"th_cr must be in (0, 1), got {th_cr}")
    g = chm.geometry
    labels = np.zeros(g.shape, dtype=np.int32)
    if not tops:
        return CrownMap(g, labels)
    ids = {t.id for t in tops}
    if len(ids) != len(tops):
        raise DataError("treetop ids are not unique")

    vals = np.where(chm.valid_mask()[0], chm.values[0].astype(np.float64), -np.inf)
    order = sorted(tops, key=lambda t: (-t.height, t.id))
    for t in order:  # claim seeds before any growth
        labels[t.row, t.col] = t.id

    max_sq = float(max_cr_pixels) ** 2
    steps = np.array([[-1, 0], [1, 0], [0, -1], [0, 1]])
    for t in order:
        seed_h = vals[t.row, t.col]
        if not np.isfinite(seed_h):
            continue
        crown = np.array([[t.row, t.col]])
        sum_h = seed_h
        count = 1
        while True:
            mean_h = sum_h / count
            nbrs = (crown[:, None, :] + steps[None, :, :]).reshape(-1, 2)
            ok = (
                (nbrs[:, 0] >= 0) & (nbrs[:, 0] < g.height)
                & (nbrs[:, 1] >= 0) & (nbrs[:, 1] < g.width)
            )
            nbrs = np.unique(nbrs[ok], axis=0)
            nbrs = nbrs[labels[nbrs[:, 0], nbrs[:, 1]] == 0]
            if not nbrs.size:
                break
            h = vals[nbrs[:, 0], nbrs[:, 1]]
            dist_sq = (nbrs[:, 0] - t.row) ** 2 + (nbrs[:, 1] - t.col) ** 2
            join = (
                (h > th_seed * seed_h)
                & (h > th_cr * mean_h)
                & (h >= th_tree)
                & (dist_sq <= max_sq)
            )
            added = nbrs[join]
            if not added.size:
                break
            labels[added[:, 0], added[:, 1]] = t.id
            sum_h += h[join].sum()
            count += added.shape[0]
            crown = np.concatenate([crown, added])
    return CrownMap(g, labels)


def rasterize_truth(crowns: CrownMap, chm: Raster) -> tuple[Raster, Raster]:
    """Produce the binary tree mask and the dense pixel-height raster.

    tree_mask is 1 where a crown label is set; pixel_height carries the CHM
    value wherever defined and 0 elsewhere, so training targets have no
    holes.
    """
    if crowns.geometry != chm.geometry:
        raise AlignmentError("crown map and CHM geometries differ")
    mask = (crowns.labels > 0).astype(np.uint8)
    height = np.where(chm.valid_mask()[0], chm.values[0], 0.0).astype(np.float32)
    tree_mask = Raster(crowns.geometry, mask, nodata=255)
    pixel_height = Raster(chm.geometry, height, NODATA_FLOAT)
    return tree_mask, pixel_height

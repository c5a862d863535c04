"""Core raster operations: NDVI, resampling, mosaicking, stacking, patching,
and per-band normalization.

All functions are pure: they never mutate their inputs and always propagate
nodata (a nodata input pixel can only produce a nodata output pixel).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError, DataError
from .grid import NODATA_FLOAT, GridGeometry, Patch, Raster, RasterStack

log = logging.getLogger(__name__)

NAIP_ROLES = ("naip_red", "naip_green", "naip_blue", "naip_nir")
S2_10M_ROLES = ("s2_10m_1", "s2_10m_2", "s2_10m_3", "s2_10m_4")
S2_20M_ROLES = ("s2_20m_1", "s2_20m_2", "s2_20m_3", "s2_20m_4", "s2_20m_5", "s2_20m_6")


def ndvi(nir: Raster, red: Raster) -> Raster:
    """Normalized difference vegetation index (NIR - Red) / (NIR + Red).

    Args:
        nir: single-band near-infrared reflectance (non-negative).
        red: single-band red reflectance on the same geometry.

    Returns:
        Single-band raster in [-1, 1]; pixels where NIR + Red == 0, or where
        either input is nodata, are nodata.
    """
    if nir.geometry != red.geometry:
        raise AlignmentError("ndvi inputs must share a geometry")
    n = nir.data.astype(np.float64)
    r = red.data.astype(np.float64)
    denom = n + r
    valid = nir.valid_mask()[0] & red.valid_mask()[0] & (denom != 0)
    out = np.full(n.shape, NODATA_FLOAT, dtype=np.float32)
    out[valid] = ((n - r)[valid] / denom[valid]).astype(np.float32)
    return Raster(nir.geometry, out, NODATA_FLOAT)


def resample_to(src: Raster, target: GridGeometry, method: str = "nearest") -> Raster:
    """Resample ``src`` onto ``target`` by sampling at target pixel centers.

    ``nearest`` copies the value of the source pixel containing each target
    center. ``bilinear`` interpolates the four surrounding source pixel
    centers (edge-replicated inside the source extent); it goes to nodata when
    any contributing source pixel is nodata. Target centers outside the source
    extent are nodata either way.
    """
    if method not in ("nearest", "bilinear"):
        raise ConfigError(f"unknown resampling method {method!r}")
    if not src.geometry.alignable_with(target):
        raise AlignmentError(
            f"crs mismatch: {src.geometry.crs_tag!r} vs {target.crs_tag!r}"
        )
    g = src.geometry
    xs, ys = target.center_coords()
    # Fractional source indices of the target centers, in pixel-center coords.
    fc = (xs - g.origin_x) / g.pixel_size - 0.5
    fr = (g.origin_y - ys) / g.pixel_size - 0.5
    min_x, min_y, max_x, max_y = g.bounds
    in_x = (xs >= min_x) & (xs <= max_x)
    in_y = (ys >= min_y) & (ys <= max_y)
    inside = in_y[:, None] & in_x[None, :]

    out = np.full((src.band_count, target.height, target.width), NODATA_FLOAT, dtype=np.float32)
    src_valid = src.valid_mask()

    if method == "nearest":
        row, col = g.rowcol_of(xs[None, :].repeat(target.height, 0),
                               ys[:, None].repeat(target.width, 1))
        row = np.clip(row, 0, g.height - 1)
        col = np.clip(col, 0, g.width - 1)
        for b in range(src.band_count):
            vals = src.values[b][row, col]
            ok = inside & src_valid[b][row, col]
            out[b][ok] = vals[ok].astype(np.float32)
    else:
        r0 = np.floor(fr).astype(np.int64)
        c0 = np.floor(fc).astype(np.int64)
        wr = (fr - r0)[:, None]
        wc = (fc - c0)[None, :]
        r0c = np.clip(r0, 0, g.height - 1)[:, None]
        r1c = np.clip(r0 + 1, 0, g.height - 1)[:, None]
        c0c = np.clip(c0, 0, g.width - 1)[None, :]
        c1c = np.clip(c0 + 1, 0, g.width - 1)[None, :]
        for b in range(src.band_count):
            band = src.values[b].astype(np.float64)
            v00 = band[r0c, c0c]
            v01 = band[r0c, c1c]
            v10 = band[r1c, c0c]
            v11 = band[r1c, c1c]
            interp = (
                v00 * (1 - wr) * (1 - wc)
                + v01 * (1 - wr) * wc
                + v10 * wr * (1 - wc)
                + v11 * wr * wc
            )
            vb = src_valid[b]
            ok = (
                inside
                & vb[r0c, c0c] & vb[r0c, c1c] & vb[r1c, c0c] & vb[r1c, c1c]
            )
            out[b][ok] = interp[ok].astype(np.float32)

    return Raster(target, out, NODATA_FLOAT)


def mosaic(tiles: list[Raster], reducer: str = "first") -> Raster:
    """Combine grid-aligned tiles into one raster covering their union extent.

    Overlapping pixels are resolved by ``reducer``: ``first`` keeps the value
    of the earliest tile that covers the pixel, ``max`` keeps the maximum
    valid value. Pixels covered by no tile are nodata.
    """
    if reducer not in ("first", "max"):
        raise ConfigError(f"unknown mosaic reducer {reducer!r}")
    if not tiles:
        raise DataError("mosaic requires at least one tile")
    ref = tiles[0]
    ps = ref.geometry.pixel_size
    for t in tiles[1:]:
        if not t.geometry.alignable_with(ref.geometry):
            raise AlignmentError("mosaic tiles must share a crs_tag")
        if not math.isclose(t.geometry.pixel_size, ps, rel_tol=1e-9):
            raise AlignmentError("mosaic tiles must share a pixel size")
        if t.band_count != ref.band_count:
            raise AlignmentError("mosaic tiles must share a band count")

    origin_x = min(t.geometry.origin_x for t in tiles)
    origin_y = max(t.geometry.origin_y for t in tiles)
    width = 0
    height = 0
    offsets = []
    for t in tiles:
        oc = round((t.geometry.origin_x - origin_x) / ps)
        orow = round((origin_y - t.geometry.origin_y) / ps)
        offsets.append((orow, oc))
        width = max(width, oc + t.geometry.width)
        height = max(height, orow + t.geometry.height)
    geom = GridGeometry(origin_x, origin_y, ps, width, height, ref.geometry.crs_tag)

    out = np.full((ref.band_count, height, width), NODATA_FLOAT, dtype=np.float32)
    for t, (orow, oc) in zip(tiles, offsets):
        h, w = t.geometry.shape
        window = out[:, orow : orow + h, oc : oc + w]
        tvalid = t.valid_mask()
        tvals = t.values.astype(np.float32)
        if reducer == "first":
            fill = (window == NODATA_FLOAT) & tvalid
            window[fill] = tvals[fill]
        else:
            empty = (window == NODATA_FLOAT) & tvalid
            window[empty] = tvals[empty]
            both = (window != NODATA_FLOAT) & tvalid
            window[both] = np.maximum(window[both], tvals[both])
    return Raster(geom, out, NODATA_FLOAT)


def stack(rasters: list[Raster], roles: tuple[str, ...] | None = None) -> RasterStack:
    """Concatenate bands of co-registered rasters into one stack.

    All inputs must share the exact geometry (resample first). Nodata pixels
    in any input band stay nodata in the output band.
    """
    if not rasters:
        raise DataError("stack requires at least one raster")
    geom = rasters[0].geometry
    for r in rasters[1:]:
        if r.geometry != geom:
            raise AlignmentError("stack inputs must share the exact geometry")
    bands = []
    for r in rasters:
        vals = r.values.astype(np.float32).copy()
        vals[~r.valid_mask()] = NODATA_FLOAT
        bands.append(vals)
    values = np.concatenate(bands, axis=0)
    if roles is not None and len(roles) != values.shape[0]:
        raise ConfigError(f"{len(roles)} roles for {values.shape[0]} bands")
    return RasterStack(geom, values, NODATA_FLOAT, tuple(roles) if roles else ())


def extract_patches(
    stack: RasterStack,
    tree_mask: Raster,
    height: Raster,
    aux_mask: Raster,
    size: int = 240,
    stride: int | None = None,
) -> list[Patch]:
    """Cut the stack and its three target rasters into square windows.

    Windows tile the grid row-major from the top-left at the given stride
    (default: non-overlapping). Partial windows at the right/bottom edges are
    dropped, so a grid smaller than ``size`` yields an empty list.
    """
    if size < 1:
        raise ConfigError(f"patch size must be >= 1, got {size}")
    stride = size if stride is None else stride
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    for name, r in (("tree_mask", tree_mask), ("height", height), ("aux_mask", aux_mask)):
        if r.geometry != stack.geometry:
            raise AlignmentError(f"target {name} does not share the stack geometry")
    h, w = stack.geometry.shape
    patches = []
    for r0 in range(0, h - size + 1, stride):
        for c0 in range(0, w - size + 1, stride):
            win = np.s_[r0 : r0 + size, c0 : c0 + size]
            patches.append(
                Patch(
                    r0,
                    c0,
                    size,
                    stack.values[(slice(None),) + win].astype(np.float32),
                    tree_mask.values[0][win].astype(np.float32),
                    height.values[0][win].astype(np.float32),
                    aux_mask.values[0][win].astype(np.float32),
                )
            )
    return patches


@dataclass(frozen=True)
class BandStats:
    """Per-band min/max, computed on the training data and reused everywhere."""

    minima: tuple[float, ...]
    maxima: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.minima) != len(self.maxima):
            raise ConfigError("minima and maxima lengths differ")
        for lo, hi in zip(self.minima, self.maxima):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ConfigError("band stats must be finite")


def band_stats(stack: RasterStack) -> BandStats:
    """Min/max per band over valid pixels."""
    minima = []
    maxima = []
    valid = stack.valid_mask()
    for b in range(stack.band_count):
        v = stack.values[b][valid[b]]
        if v.size == 0:
            raise DataError(f"band {b} ({stack.band_roles[b]}) has no valid pixels")
        minima.append(float(v.min()))
        maxima.append(float(v.max()))
    return BandStats(tuple(minima), tuple(maxima))


def normalize(stack: RasterStack, stats: BandStats) -> RasterStack:
    """Affine-map each band into [0, 1] using the given stats, clipping values
    that fall outside the training range. A degenerate band (max == min) is
    set to 0 and logged. Nodata pixels are preserved."""
    if len(stats.minima) != stack.band_count:
        raise ConfigError(
            f"stats cover {len(stats.minima)} bands, stack has {stack.band_count}"
        )
    out = np.full_like(stack.values, NODATA_FLOAT, dtype=np.float32)
    valid = stack.valid_mask()
    for b in range(stack.band_count):
        lo, hi = stats.minima[b], stats.maxima[b]
        v = valid[b]
        if hi <= lo:
            log.warning(
                "band %d (%s) has degenerate stats (min=%g max=%g); set to 0",
                b, stack.band_roles[b], lo, hi,
            )
            out[b][v] = 0.0
            continue
        scaled = (stack.values[b][v] - lo) / (hi - lo)
        out[b][v] = np.clip(scaled, 0.0, 1.0).astype(np.float32)
    return RasterStack(stack.geometry, out, NODATA_FLOAT, stack.band_roles)


def normalize_height(height: Raster, height_max: float = 80.0) -> Raster:
    """Divide heights by the detection ceiling so targets lie in [0, 1]."""
    if height_max <= 0:
        raise ConfigError(f"height_max must be > 0, got {height_max}")
    out = np.full_like(height.values, NODATA_FLOAT, dtype=np.float32)
    valid = height.valid_mask()
    out[valid] = (height.values[valid] / height_max).astype(np.float32)
    return Raster(height.geometry, out, NODATA_FLOAT)

"""End-to-end pipeline steps shared by the CLI subcommands.

Each function here is the substance of one subcommand: LiDAR to ground-truth
rasters, imagery to normalized training patches, and tiled prediction over
arbitrary rasters. The CLI module only parses flags and wires files to these.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .geo import (
    NAIP_ROLES,
    S2_10M_ROLES,
    S2_20M_ROLES,
    BandStats,
    band_stats,
    extract_patches,
    mosaic,
    ndvi,
    normalize,
    normalize_height,
    resample_to,
    stack,
)
from .grid import NODATA_FLOAT, GridGeometry, PatchSet, Raster, RasterStack
from .lidar import (
    CrownMap,
    PointCloud,
    TreeTop,
    dalponte_segment,
    filter_height,
    local_maxima,
    mask_by_ndvi,
    naive_chm,
    pitfree_chm,
    rasterize_truth,
)
from .train import RGB_ROLES
from .unet import UNetModel, forward

log = logging.getLogger(__name__)

HEIGHT_NORMALIZER_FT = 80.0
INPUT_ROLES = NAIP_ROLES + S2_10M_ROLES + S2_20M_ROLES


@dataclass(frozen=True)
class GroundTruthParams:
    ndvi_threshold: float = 0.05
    zmin: float = 6.0
    zmax: float = 80.0
    window_radius: float = 3.0
    th_seed: float = 0.45
    th_cr: float = 0.55
    max_cr_pixels: float = 10.0


def naip_ndvi(naip: RasterStack) -> Raster:
    """NDVI from a 4-band NAIP stack (red, green, blue, nir roles)."""
    roles = naip.band_roles
    try:
        red_i = roles.index("naip_red")
        nir_i = roles.index("naip_nir")
    except ValueError:
        if naip.band_count != 4:
            raise DataError(
                f"need a 4-band NAIP stack or naip_red/naip_nir roles, got {roles}"
            ) from None
        red_i, nir_i = 0, 3  # conventional NAIP band order
    red = Raster(naip.geometry, naip.values[red_i], naip.nodata)
    nir = Raster(naip.geometry, naip.values[nir_i], naip.nodata)
    return ndvi(nir, red)


def _tile_geometry(cloud: PointCloud, reference: GridGeometry) -> GridGeometry | None:
    """Sub-grid of `reference` covering the cloud's bounding box."""
    if len(cloud) == 0:
        return None
    ps = reference.pixel_size
    col0 = int(np.floor((cloud.x.min() - reference.origin_x) / ps))
    col1 = int(np.floor((cloud.x.max() - reference.origin_x) / ps))
    row0 = int(np.floor((reference.origin_y - cloud.y.max()) / ps))
    row1 = int(np.floor((reference.origin_y - cloud.y.min()) / ps))
    col0 = max(col0, 0)
    row0 = max(row0, 0)
    col1 = min(col1, reference.width - 1)
    row1 = min(row1, reference.height - 1)
    if col1 < col0 or row1 < row0:
        return None
    return GridGeometry(
        reference.origin_x + col0 * ps,
        reference.origin_y - row0 * ps,
        ps,
        col1 - col0 + 1,
        row1 - row0 + 1,
        reference.crs_tag,
    )


def tile_chm(
    cloud: PointCloud, ndvi_raster: Raster, geometry: GridGeometry, params: GroundTruthParams
) -> Raster | None:
    """Masked, filtered, pit-free CHM for one LiDAR tile on its sub-grid.

    Returns None when too few points survive to triangulate.
    """
    kept = filter_height(
        mask_by_ndvi(cloud, ndvi_raster, params.ndvi_threshold), params.zmin, params.zmax
    )
    tile_geom = _tile_geometry(kept, geometry)
    if tile_geom is None or len(kept) < 3:
        return None
    try:
        return pitfree_chm(kept, tile_geom)
    except DataError:
        log.warning("tile with %d points is degenerate; falling back to per-pixel max", len(kept))
        return naive_chm(kept, tile_geom)


def ground_truth(
    clouds: list[PointCloud],
    naip: RasterStack,
    params: GroundTruthParams = GroundTruthParams(),
) -> tuple[Raster, Raster, Raster, list[TreeTop], CrownMap]:
    """LiDAR tiles + NAIP -> (tree_mask, pixel_height, chm, tops, crowns).

    Each tile is masked by NDVI, height-filtered, and turned into a pit-free
    CHM on its own sub-grid; tiles are then max-mosaicked onto the NAIP grid,
    treetops detected, crowns grown, and the truth rasters rasterized.
    """
    geometry = naip.geometry
    ndvi_raster = naip_ndvi(naip)
    tiles = [t for t in (tile_chm(c, ndvi_raster, geometry, params) for c in clouds) if t]
    if tiles:
        merged = mosaic(tiles, reducer="max")
        chm = resample_to(merged, geometry, method="nearest")
    else:
        chm = Raster.filled(geometry, NODATA_FLOAT)
    tops = local_maxima(chm, params.window_radius, params.zmin)
    crowns = dalponte_segment(
        chm, tops, params.th_seed, params.th_cr, params.zmin, params.max_cr_pixels
    )
    tree_mask, pixel_height = rasterize_truth(crowns, chm)
    return tree_mask, pixel_height, chm, tops, crowns


def build_input_stack(naip: RasterStack, s2_10m: RasterStack, s2_20m: RasterStack) -> RasterStack:
    """Fuse NAIP (4 bands, target grid) with Sentinel 10 m (4) and 20 m (6)
    into the 14-band input stack, bilinear-resampling the coarse bands."""
    if naip.band_count != 4:
        raise DataError(f"NAIP stack must have 4 bands, got {naip.band_count}")
    if s2_10m.band_count != 4:
        raise DataError(f"10 m stack must have 4 bands, got {s2_10m.band_count}")
    if s2_20m.band_count != 6:
        raise DataError(f"20 m stack must have 6 bands, got {s2_20m.band_count}")
    r10 = resample_to(s2_10m, naip.geometry, method="bilinear")
    r20 = resample_to(s2_20m, naip.geometry, method="bilinear")
    return stack([naip, r10, r20], roles=INPUT_ROLES)


def prepare_patches(
    inputs: RasterStack,
    tree_mask: Raster,
    pixel_height: Raster,
    aux_mask: Raster,
    patch_size: int = 240,
    stats: BandStats | None = None,
) -> tuple[PatchSet, BandStats]:
    """Normalize the stack and targets and cut everything into patches.

    Band stats are computed from the stack when not supplied (training), or
    reused (inference consistency). Heights are divided by the 80 ft ceiling.
    """
    if stats is None:
        stats = band_stats(inputs)
    normed = normalize(inputs, stats)
    height_n = normalize_height(pixel_height, HEIGHT_NORMALIZER_FT)
    mask_f = Raster(
        tree_mask.geometry,
        (tree_mask.data == 1).astype(np.float32),
        NODATA_FLOAT,
    )
    aux_f = Raster(
        aux_mask.geometry,
        (aux_mask.data == 1).astype(np.float32),
        NODATA_FLOAT,
    )
    patches = extract_patches(normed, mask_f, height_n, aux_f, size=patch_size)
    if not patches:
        raise DataError(
            f"scene {inputs.geometry.shape} yields no {patch_size}x{patch_size} patches"
        )
    return PatchSet.from_patches(patches, normed.band_roles), stats


def aux_target(naip: RasterStack) -> Raster:
    """Impervious-surface mask: NDVI below zero."""
    nd = naip_ndvi(naip)
    vals = (nd.valid_mask()[0] & (nd.values[0] < 0.0)).astype(np.uint8)
    return Raster(naip.geometry, vals, nodata=255)


def _model_band_indices(model: UNetModel, roles: tuple[str, ...]) -> list[int]:
    if model.config.in_bands == len(roles):
        return list(range(len(roles)))
    if model.config.in_bands == 3:
        try:
            return [roles.index(r) for r in RGB_ROLES]
        except ValueError:
            raise DataError(
                f"model wants the 3 NAIP visible bands but stack roles are {roles}"
            ) from None
    raise DataError(
        f"model expects {model.config.in_bands} bands; stack has {len(roles)} ({roles})"
    )


def predict_raster(
    model: UNetModel,
    inputs: RasterStack,
    stats: BandStats,
    patch_size: int = 240,
) -> dict[str, Raster]:
    """Predict every configured task over a full raster.

    The normalized stack is tiled into non-overlapping patch_size windows
    (edge windows are zero-padded to size, predicted, and cropped back), so a
    scene that is exactly one window reproduces forward() bit for bit.
    """
    step = 2 ** model.config.depth
    if patch_size % step:
        raise ConfigError(f"patch_size {patch_size} not divisible by 2**depth = {step}")
    normed = normalize(inputs, stats)
    idx = _model_band_indices(model, normed.band_roles)
    data = normed.values[idx].astype(np.float32)
    nodata_px = ~normed.valid_mask()[idx].all(axis=0)
    data[:, nodata_px] = 0.0

    h, w = inputs.geometry.shape
    outputs = {
        t: np.zeros((h, w), dtype=np.float32) for t in model.config.tasks
    }
    for r0 in range(0, h, patch_size):
        for c0 in range(0, w, patch_size):
            rh = min(patch_size, h - r0)
            cw = min(patch_size, w - c0)
            window = np.zeros((len(idx), patch_size, patch_size), dtype=np.float32)
            window[:, :rh, :cw] = data[:, r0 : r0 + rh, c0 : c0 + cw]
            preds = forward(model, window[None])
            for task, arr in preds.items():
                outputs[task][r0 : r0 + rh, c0 : c0 + cw] = arr[0, 0, :rh, :cw]
    return {
        task: Raster(inputs.geometry, vals, NODATA_FLOAT) for task, vals in outputs.items()
    }

"""Synthetic desk-scale scenes: cone-shaped trees over a grass/pavement
landscape, with a LiDAR cloud, correlated 14-band imagery, analytic truth
rasters, quadrant zones, and a manifest of everything planted.

The generator is the acceptance harness's ground truth, so its geometry is
chosen to be analyzable: crowns are ideal cones, the apex return is written
into the cloud exactly, and the expected segmented crown of a cone is a disk
whose radius follows from the region-growing thresholds:

    r_expected = r * min(1 - th_seed, 1 - th_tree / apex_height), capped at
    the max crown distance.

For the default thresholds the 1 - th_seed term binds, so crowns segment to
0.55 r disks. Truth masks are built from these expected disks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .geo import NAIP_ROLES, S2_10M_ROLES, S2_20M_ROLES
from .grid import NODATA_FLOAT, GridGeometry, PatchSet, Raster, RasterStack
from .lidar import PointCloud
from .pipeline import build_input_stack, prepare_patches
from .aggregate import ZonePolygon, write_zones
from .las_io import write_las
from .raster_io import write_geotiff

CRS_TAG = "synthetic-local"

# per-class reflectance (red, green, blue, nir); NDVI approx 0.76 / 0.21 / -0.48
_CROWN_RGBN = (0.06, 0.10, 0.05, 0.45)
_GRASS_RGBN = (0.22, 0.28, 0.12, 0.34)
_PAVED_RGBN = (0.40, 0.40, 0.38, 0.14)


@dataclass(frozen=True)
class SynthParams:
    extent_x: float = 240.0
    extent_y: float = 240.0
    pixel_size: float = 1.0
    n_trees: int = 5
    seed: int = 0
    spacing: float = 0.7
    radius_range: tuple[float, float] = (7.0, 10.0)
    apex_range: tuple[float, float] = (25.0, 70.0)
    min_separation: float = 30.0
    n_paved: int = 6
    noise_z: float = 0.1
    pit_fraction: float = 0.01
    noise_reflectance: float = 0.01
    th_seed: float = 0.45
    th_tree: float = 6.0
    max_cr_pixels: float = 10.0

    def __post_init__(self) -> None:
        if self.n_trees < 0:
            raise ConfigError(f"n_trees must be >= 0, got {self.n_trees}")
        if self.extent_x % 20 or self.extent_y % 20:
            raise ConfigError(
                f"extent must be a multiple of 20 map units, got {self.extent_x}x{self.extent_y}"
            )
        if self.spacing <= 0:
            raise ConfigError(f"spacing must be > 0, got {self.spacing}")
        if not self.radius_range[0] <= self.radius_range[1]:
            raise ConfigError(f"bad radius_range {self.radius_range}")
        if not self.apex_range[0] <= self.apex_range[1]:
            raise ConfigError(f"bad apex_range {self.apex_range}")
        if not 0.0 <= self.pit_fraction <= 1.0:
            raise ConfigError(f"pit_fraction must be in [0, 1], got {self.pit_fraction}")
        if self.noise_z < 0 or self.noise_reflectance < 0:
            raise ConfigError("noise levels must be >= 0")


@dataclass(frozen=True)
class PlantedTree:
    x: float
    y: float
    apex_height_ft: float
    radius_m: float
    expected_crown_radius_m: float
    row: int
    col: int


@dataclass
class SyntheticScene:
    params: SynthParams
    geometry: GridGeometry
    trees: list[PlantedTree]
    naip: RasterStack
    s2_10m: RasterStack
    s2_20m: RasterStack
    truth_mask: Raster
    truth_height: Raster
    truth_aux: Raster
    zones: list[ZonePolygon]
    cloud: PointCloud | None = None
    manifest: dict = field(default_factory=dict)


def _expected_crown_radius(p: SynthParams, radius: float, apex: float) -> float:
    shrink = min(1.0 - p.th_seed, 1.0 - p.th_tree / apex)
    return min(radius * shrink, p.max_cr_pixels * p.pixel_size)


def _place_trees(p: SynthParams, geometry: GridGeometry, rng: np.random.Generator) -> list[PlantedTree]:
    margin = p.radius_range[1] + 2.0
    if p.extent_x <= 2 * margin or p.extent_y <= 2 * margin:
        raise ConfigError(f"extent too small to hold crowns with margin {margin}")
    trees: list[PlantedTree] = []
    attempts = 0
    while len(trees) < p.n_trees:
        attempts += 1
        if attempts > 1000 * max(p.n_trees, 1):
            raise DataError(
                f"could not place {p.n_trees} trees with separation {p.min_separation}"
            )
        x = rng.uniform(margin, p.extent_x - margin)
        y = rng.uniform(margin, p.extent_y - margin)
        if any((t.x - x) ** 2 + (t.y - y) ** 2 < p.min_separation ** 2 for t in trees):
            continue
        radius = rng.uniform(*p.radius_range)
        apex = rng.uniform(*p.apex_range)
        row, col = geometry.rowcol_of(np.array(x), np.array(y))
        trees.append(
            PlantedTree(
                float(x), float(y), float(apex), float(radius),
                _expected_crown_radius(p, radius, apex), int(row), int(col),
            )
        )
    return trees


def _surface_at(trees: list[PlantedTree], x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Canopy surface height (ft) at arbitrary coordinates: max over cones."""
    z = np.zeros(x.shape, dtype=np.float64)
    for t in trees:
        d = np.sqrt((x - t.x) ** 2 + (y - t.y) ** 2)
        np.maximum(z, t.apex_height_ft * np.clip(1.0 - d / t.radius_m, 0.0, None), out=z)
    return z


def _center_grids(geometry: GridGeometry) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = geometry.center_coords()
    return np.repeat(xs[None, :], geometry.height, 0), np.repeat(ys[:, None], geometry.width, 1)


def _build_cloud(p: SynthParams, trees: list[PlantedTree], rng: np.random.Generator) -> PointCloud:
    nx = int(np.floor(p.extent_x / p.spacing))
    ny = int(np.floor(p.extent_y / p.spacing))
    gx = (np.arange(nx) + 0.5) * p.spacing
    gy = (np.arange(ny) + 0.5) * p.spacing
    x = np.repeat(gx[None, :], ny, 0).ravel()
    y = np.repeat(gy[:, None], nx, 1).ravel()
    x = x + rng.uniform(-0.5, 0.5, x.shape) * p.spacing
    y = y + rng.uniform(-0.5, 0.5, y.shape) * p.spacing
    x = np.clip(x, 0.0, p.extent_x - 1e-9)
    y = np.clip(y, 0.0, p.extent_y - 1e-9)

    surface = _surface_at(trees, x, y)
    z = np.where(
        surface > 0,
        np.clip(surface + rng.normal(0.0, p.noise_z, x.shape), 0.0, None),
        np.abs(rng.normal(0.0, 0.05, x.shape)),
    )
    pits = (surface > 0) & (rng.uniform(0.0, 1.0, x.shape) < p.pit_fraction)
    z = np.where(pits, surface * rng.uniform(0.3, 0.6, x.shape), z)

    apexes = np.array([[t.x, t.y, t.apex_height_ft] for t in trees]).reshape(-1, 3)
    points = np.concatenate([np.stack([x, y, z], axis=1), apexes], axis=0)
    return PointCloud(points)


def _class_maps(
    p: SynthParams, geometry: GridGeometry, trees: list[PlantedTree], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """(crown, paved) boolean maps at the scene grid; grass is the remainder.
    Crown wins over paved (canopy hides what it overhangs)."""
    cx, cy = _center_grids(geometry)
    crown = np.zeros(geometry.shape, dtype=bool)
    for t in trees:
        crown |= (cx - t.x) ** 2 + (cy - t.y) ** 2 <= t.radius_m ** 2
    paved = np.zeros(geometry.shape, dtype=bool)
    for _ in range(p.n_paved):
        w = rng.uniform(10.0, min(60.0, p.extent_x))
        h = rng.uniform(10.0, min(60.0, p.extent_y))
        x0 = rng.uniform(0.0, p.extent_x - w)
        y0 = rng.uniform(0.0, p.extent_y - h)
        paved |= (cx >= x0) & (cx <= x0 + w) & (cy >= y0) & (cy <= y0 + h)
    return crown, paved & ~crown


def _reflectance(
    p: SynthParams, crown: np.ndarray, paved: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """(4, H, W) float32 NAIP-like bands from the class maps."""
    h, w = crown.shape
    bands = np.empty((4, h, w), dtype=np.float64)
    for bi in range(4):
        base = np.full((h, w), _GRASS_RGBN[bi])
        base[paved] = _PAVED_RGBN[bi]
        base[crown] = _CROWN_RGBN[bi]
        bands[bi] = base + rng.normal(0.0, p.noise_reflectance, (h, w))
    return np.clip(bands, 0.005, 0.995).astype(np.float32)


def _block_mean(arr: np.ndarray, k: int) -> np.ndarray:
    c, h, w = arr.shape
    return arr.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def _sentinel_stacks(
    p: SynthParams, geometry: GridGeometry, naip_bands: np.ndarray, rng: np.random.Generator
) -> tuple[RasterStack, RasterStack]:
    red, green, _blue, nir = naip_bands
    extra1 = 0.5 * (red + green)           # red-edge stand-in
    extra2 = 0.7 * nir + 0.3 * red         # swir stand-in
    six = np.stack([*naip_bands, extra1, extra2])

    k10 = int(round(10.0 / geometry.pixel_size))
    k20 = int(round(20.0 / geometry.pixel_size))
    b10 = _block_mean(naip_bands, k10)
    b20 = _block_mean(six, k20)
    b10 = b10 + rng.normal(0.0, 0.005, b10.shape)
    b20 = b20 + rng.normal(0.0, 0.005, b20.shape)

    g10 = GridGeometry(
        geometry.origin_x, geometry.origin_y, 10.0,
        b10.shape[2], b10.shape[1], geometry.crs_tag,
    )
    g20 = GridGeometry(
        geometry.origin_x, geometry.origin_y, 20.0,
        b20.shape[2], b20.shape[1], geometry.crs_tag,
    )
    s10 = RasterStack(g10, np.clip(b10, 0.001, 1.0).astype(np.float32), NODATA_FLOAT, S2_10M_ROLES)
    s20 = RasterStack(g20, np.clip(b20, 0.001, 1.0).astype(np.float32), NODATA_FLOAT, S2_20M_ROLES)
    return s10, s20


def _truth_rasters(
    p: SynthParams, geometry: GridGeometry, trees: list[PlantedTree], naip: RasterStack
) -> tuple[Raster, Raster, Raster]:
    cx, cy = _center_grids(geometry)
    mask = np.zeros(geometry.shape, dtype=bool)
    for t in trees:
        mask |= (cx - t.x) ** 2 + (cy - t.y) ** 2 <= t.expected_crown_radius_m ** 2
    surface = _surface_at(trees, cx, cy)
    height = np.where(surface >= p.th_tree, surface, 0.0).astype(np.float32)

    red = naip.values[0].astype(np.float64)
    nir = naip.values[3].astype(np.float64)
    nd = (nir - red) / (nir + red)
    aux = (nd < 0.0).astype(np.uint8)

    return (
        Raster(geometry, mask.astype(np.uint8), nodata=255),
        Raster(geometry, height, NODATA_FLOAT),
        Raster(geometry, aux, nodata=255),
    )


def _quadrant_zones(p: SynthParams) -> list[ZonePolygon]:
    mx, my = p.extent_x / 2.0, p.extent_y / 2.0
    boxes = {
        "q0": (0.0, my, mx, p.extent_y),
        "q1": (mx, my, p.extent_x, p.extent_y),
        "q2": (0.0, 0.0, mx, my),
        "q3": (mx, 0.0, p.extent_x, my),
    }
    return [
        ZonePolygon(zid, [(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
        for zid, (x0, y0, x1, y1) in boxes.items()
    ]


def generate_scene(params: SynthParams = SynthParams(), with_cloud: bool = True) -> SyntheticScene:
    """Build the full synthetic scene in memory, deterministically from
    params.seed."""
    p = params
    width = int(round(p.extent_x / p.pixel_size))
    height = int(round(p.extent_y / p.pixel_size))
    geometry = GridGeometry(0.0, p.extent_y, p.pixel_size, width, height, CRS_TAG)
    rng = np.random.default_rng(p.seed)

    trees = _place_trees(p, geometry, rng)
    cloud = _build_cloud(p, trees, rng) if with_cloud else None
    crown, paved = _class_maps(p, geometry, trees, rng)
    naip_bands = _reflectance(p, crown, paved, rng)
    naip = RasterStack(geometry, naip_bands, NODATA_FLOAT, NAIP_ROLES)
    s2_10m, s2_20m = _sentinel_stacks(p, geometry, naip_bands, rng)
    truth_mask, truth_height, truth_aux = _truth_rasters(p, geometry, trees, naip)
    zones = _quadrant_zones(p)

    cover = float(truth_mask.data.astype(np.int64).sum() / truth_mask.data.size)
    manifest = {
        "seed": p.seed,
        "extent": [p.extent_x, p.extent_y],
        "pixel_size": p.pixel_size,
        "n_trees": p.n_trees,
        "point_count": 0 if cloud is None else len(cloud),
        "planted_cover_fraction": cover,
        "trees": [
            {
                "x": t.x,
                "y": t.y,
                "apex_height_ft": t.apex_height_ft,
                "radius_m": t.radius_m,
                "expected_crown_radius_m": t.expected_crown_radius_m,
                "row": t.row,
                "col": t.col,
            }
            for t in trees
        ],
    }
    return SyntheticScene(
        p, geometry, trees, naip, s2_10m, s2_20m,
        truth_mask, truth_height, truth_aux, zones, cloud, manifest,
    )


def write_scene(scene: SyntheticScene, out_dir: str | Path) -> dict[str, Path]:
    """Write every scene artifact into out_dir; returns the path map."""
    if scene.cloud is None:
        raise ConfigError("scene was generated without a cloud; nothing to write to .las")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "cloud": out / "cloud.las",
        "naip": out / "naip.tif",
        "s2_10m": out / "s2_10m.tif",
        "s2_20m": out / "s2_20m.tif",
        "truth_mask": out / "truth_mask.tif",
        "truth_height": out / "truth_height.tif",
        "truth_aux": out / "truth_aux.tif",
        "zones": out / "zones.geojson",
        "manifest": out / "manifest.json",
    }
    write_las(paths["cloud"], scene.cloud)
    write_geotiff(paths["naip"], scene.naip)
    write_geotiff(paths["s2_10m"], scene.s2_10m)
    write_geotiff(paths["s2_20m"], scene.s2_20m)
    write_geotiff(paths["truth_mask"], scene.truth_mask)
    write_geotiff(paths["truth_height"], scene.truth_height)
    write_geotiff(paths["truth_aux"], scene.truth_aux)
    write_zones(paths["zones"], scene.zones)
    paths["manifest"].write_text(json.dumps(scene.manifest, indent=2) + "\n", encoding="ascii")
    return paths


def make_patch_set(n_patches: int = 8, seed: int = 0, patch_size: int = 240) -> PatchSet:
    """In-memory training patch set from a synthetic scene sized to yield
    exactly n_patches, with analytic targets (no LiDAR pass needed)."""
    if n_patches < 1:
        raise ConfigError(f"n_patches must be >= 1, got {n_patches}")
    cols = min(2, n_patches)
    rows = (n_patches + cols - 1) // cols
    tiles = cols * rows
    params = SynthParams(
        extent_x=cols * float(patch_size),
        extent_y=rows * float(patch_size),
        n_trees=max(1, int(round(tiles * patch_size * patch_size * 8e-4))),
        seed=seed,
        min_separation=6.0,
        n_paved=6 * tiles,
    )
    scene = generate_scene(params, with_cloud=False)
    inputs = build_input_stack(scene.naip, scene.s2_10m, scene.s2_20m)
    patches, _stats = prepare_patches(
        inputs, scene.truth_mask, scene.truth_height, scene.truth_aux, patch_size
    )
    return patches.subset(np.arange(n_patches))

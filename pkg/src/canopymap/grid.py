"""Grid geometry and raster containers.

All grids are north-up with square pixels. ``(origin_x, origin_y)`` is the
outer corner of the top-left pixel, so the center of pixel ``(row, col)`` sits
at ``(origin_x + (col + 0.5) * pixel_size, origin_y - (row + 0.5) * pixel_size)``.
Rotated grids are unsupported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError

NODATA_FLOAT = -9999.0
NODATA_BYTE = 255


@dataclass(frozen=True)
class GridGeometry:
    """Placement of a pixel grid in map coordinates (meters)."""

    origin_x: float
    origin_y: float
    pixel_size: float
    width: int
    height: int
    crs_tag: str = ""

    def __post_init__(self) -> None:
        # normalize numpy scalars so reprs and comparisons are plain Python
        object.__setattr__(self, "origin_x", float(self.origin_x))
        object.__setattr__(self, "origin_y", float(self.origin_y))
        object.__setattr__(self, "pixel_size", float(self.pixel_size))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.pixel_size <= 0:
            raise ConfigError(f"pixel_size must be > 0, got {self.pixel_size}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(
                f"grid must be at least 1x1, got {self.width}x{self.height}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(min_x, min_y, max_x, max_y) outer extent."""
        return (
            self.origin_x,
            self.origin_y - self.height * self.pixel_size,
            self.origin_x + self.width * self.pixel_size,
            self.origin_y,
        )

    def alignable_with(self, other: "GridGeometry") -> bool:
        return self.crs_tag == other.crs_tag

    def center_of(self, row: int, col: int) -> tuple[float, float]:
        return (
            self.origin_x + (col + 0.5) * self.pixel_size,
            self.origin_y - (row + 0.5) * self.pixel_size,
        )

    def center_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates as 1-D arrays (xs of length width, ys of length height)."""
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.pixel_size
        ys = self.origin_y - (np.arange(self.height) + 0.5) * self.pixel_size
        return xs, ys

    def rowcol_of(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Containing pixel index for map coordinates; may fall outside the grid."""
        col = np.floor((np.asarray(x) - self.origin_x) / self.pixel_size).astype(np.int64)
        row = np.floor((self.origin_y - np.asarray(y)) / self.pixel_size).astype(np.int64)
        return row, col

    def contains_rowcol(self, row: np.ndarray, col: np.ndarray) -> np.ndarray:
        return (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)


def _as_band_array(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[np.newaxis, ...]
    if arr.ndim != 3:
        raise ConfigError(f"raster values must be 2-D or (bands, H, W), got ndim={arr.ndim}")
    return arr


@dataclass
class Raster:
    """Gridded band values. ``values`` is (bands, height, width); a 2-D array
    passed in is promoted to a single band."""

    geometry: GridGeometry
    values: np.ndarray
    nodata: float = NODATA_FLOAT

    def __post_init__(self) -> None:
        self.values = _as_band_array(self.values)
        if self.values.shape[1:] != self.geometry.shape:
            raise AlignmentError(
                f"value grid {self.values.shape[1:]} does not match geometry "
                f"{self.geometry.shape}"
            )

    @property
    def band_count(self) -> int:
        return self.values.shape[0]

    def band(self, i: int) -> np.ndarray:
        return self.values[i]

    @property
    def data(self) -> np.ndarray:
        """The single band of a one-band raster."""
        if self.band_count != 1:
            raise ConfigError(f"raster has {self.band_count} bands, expected 1")
        return self.values[0]

    def valid_mask(self) -> np.ndarray:
        """Elementwise validity: not the nodata sentinel and not NaN."""
        valid = self.values != self.nodata
        if np.issubdtype(self.values.dtype, np.floating):
            valid &= ~np.isnan(self.values)
        return valid

    @classmethod
    def filled(
        cls,
        geometry: GridGeometry,
        fill: float,
        bands: int = 1,
        nodata: float = NODATA_FLOAT,
        dtype=np.float32,
    ) -> "Raster":
        return cls(geometry, np.full((bands, geometry.height, geometry.width), fill, dtype=dtype), nodata)


def default_roles(n: int) -> tuple[str, ...]:
    return tuple(f"band_{i + 1}" for i in range(n))


@dataclass
class RasterStack(Raster):
    """Multi-band raster with a role label per band (e.g. ``naip_red``)."""

    band_roles: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.band_roles:
            self.band_roles = default_roles(self.band_count)
        self.band_roles = tuple(self.band_roles)
        if len(self.band_roles) != self.band_count:
            raise ConfigError(
                f"{len(self.band_roles)} roles for {self.band_count} bands"
            )


@dataclass
class Patch:
    """One training window cut from a stack: inputs plus the three targets."""

    row0: int
    col0: int
    size: int
    inputs: np.ndarray      # (bands, size, size)
    tree_mask: np.ndarray   # (size, size), {0, 1}
    height: np.ndarray      # (size, size), normalized
    aux_mask: np.ndarray    # (size, size), {0, 1}


@dataclass
class PatchSet:
    """A batch of patches as dense arrays, the unit of training data.

    ``inputs`` is (N, bands, H, W); each target is (N, H, W). All float32.
    """

    inputs: np.ndarray
    tree_mask: np.ndarray
    height: np.ndarray
    aux_mask: np.ndarray
    band_roles: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n, _, h, w = self.inputs.shape
        for name in ("tree_mask", "height", "aux_mask"):
            t = getattr(self, name)
            if t.shape != (n, h, w):
                raise ConfigError(
                    f"target {name} shape {t.shape} does not match inputs {(n, h, w)}"
                )

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def in_bands(self) -> int:
        return self.inputs.shape[1]

    @property
    def patch_size(self) -> int:
        return self.inputs.shape[2]

    def subset(self, indices) -> "PatchSet":
        idx = np.asarray(indices)
        return PatchSet(
            self.inputs[idx],
            self.tree_mask[idx],
            self.height[idx],
            self.aux_mask[idx],
            self.band_roles,
        )

    @classmethod
    def from_patches(cls, patches: list[Patch], band_roles: tuple[str, ...] = ()) -> "PatchSet":
        if not patches:
            raise ConfigError("cannot build a PatchSet from zero patches")
        return cls(
            np.stack([p.inputs for p in patches]).astype(np.float32),
            np.stack([p.tree_mask for p in patches]).astype(np.float32),
            np.stack([p.height for p in patches]).astype(np.float32),
            np.stack([p.aux_mask for p in patches]).astype(np.float32),
            band_roles,
        )

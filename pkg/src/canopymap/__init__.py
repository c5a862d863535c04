"""Tree canopy mapping from LiDAR and multi-resolution aerial imagery.

The package covers the full workflow: pit-free canopy height models and crown
segmentation from LiDAR (``lidar``), imagery fusion and patch extraction
(``geo``, ``pipeline``), a from-scratch multi-task UNet with training loop
(``nn_ops``, ``unet``, ``train``), evaluation (``metrics``), canopy
statistics over city zones (``aggregate``), self-contained raster and point
cloud file formats (``raster_io``, ``las_io``), and a synthetic scene
generator used by the acceptance tests (``synth``).
"""

from .errors import (
    AlignmentError,
    CanopyError,
    ConfigError,
    DataError,
    NumericalError,
)
from .grid import (
    NODATA_BYTE,
    NODATA_FLOAT,
    GridGeometry,
    Patch,
    PatchSet,
    Raster,
    RasterStack,
)

__version__ = "1.0.0"

__all__ = [
    "AlignmentError",
    "CanopyError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "GridGeometry",
    "Raster",
    "RasterStack",
    "Patch",
    "PatchSet",
    "NODATA_BYTE",
    "NODATA_FLOAT",
    "__version__",
]

"""Exception hierarchy shared by the whole package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class CanopyError(Exception):
    """Base class for all canopymap errors."""


class ConfigError(CanopyError):
    """A parameter or configuration value is out of its documented range."""


class AlignmentError(CanopyError):
    """Rasters do not share a geometry or CRS tag where they must."""


class DataError(CanopyError):
    """Input data is unreadable, malformed, or degenerate."""


class NumericalError(CanopyError):
    """A computation produced non-finite values."""

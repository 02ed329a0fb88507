"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data/format problems with 3, numerical failures with 4.
"""


class IcocnnError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(IcocnnError):
    """Invalid parameters, levels, or model configuration."""


class ShapeError(ConfigError):
    """Tensor or index-map shape mismatch."""


class DataError(IcocnnError):
    """Invalid data content (empty masks, degenerate statistics input)."""


class FormatError(DataError):
    """Unreadable or corrupt file (bad magic, truncation, checksum)."""


class GeometryError(DataError):
    """Mesh geometry failure, e.g. no containing triangle during resampling."""


class NumericError(IcocnnError):
    """Non-finite values encountered where finite arithmetic is required."""

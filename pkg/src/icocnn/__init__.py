"""Convolutional neural networks for scalar data on icosahedral spherical meshes."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    FormatError,
    GeometryError,
    IcocnnError,
    NumericError,
    ShapeError,
)
from .icosphere import (
    IcosphereHierarchy,
    IcosphereLevel,
    PoolingGroups,
    build_hierarchy,
    neighbor_ring,
    node_count,
    pooling_groups,
)

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "GeometryError",
    "IcocnnError",
    "NumericError",
    "ShapeError",
    "IcosphereHierarchy",
    "IcosphereLevel",
    "PoolingGroups",
    "build_hierarchy",
    "neighbor_ring",
    "node_count",
    "pooling_groups",
]

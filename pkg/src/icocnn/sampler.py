"""Filter-point patches and per-node sample-index maps for mesh convolution.

Every mesh node owns a small patch of filter points (rectangular grid,
concentric circles, or its neighbor ring).  Replacing each geometric
filter point by the index of its nearest mesh node yields an N x P index
matrix; gathering node values through it produces the matrix that a
convolution multiplies with a filter vector.  Index maps depend only on
the mesh geometry and the patch, so they are built once per
(level, patch) and reused.

Patch orientation uses one global tangent frame per node: east is the
normalized cross product of the global z axis with the node direction,
north completes the right-handed frame.  At the poles (where that cross
product vanishes) east falls back to the global x axis.  A shared frame
convention is what makes filter weights comparable across nodes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, ShapeError
from .icosphere import IcosphereHierarchy, IcosphereLevel, all_neighbor_rings

_POLE_EPS = 1e-9


@dataclass(frozen=True)
class RectangularPatch:
    """Sx x Sy grid of filter points at regular angular spacing.

    ``spacing`` is in radians; None means "use the mean edge length of
    the level the map is built for".
    """

    sx: int
    sy: int
    spacing: float | None = None

    def __post_init__(self):
        if self.sx < 1 or self.sy < 1:
            raise ConfigError(f"patch grid must be at least 1x1, got {self.sx}x{self.sy}")
        if self.spacing is not None and self.spacing <= 0:
            raise ConfigError(f"patch spacing must be positive, got {self.spacing}")

    @property
    def n_points(self) -> int:
        return self.sx * self.sy


@dataclass(frozen=True)
class CircularPatch:
    """Concentric rings of filter points around each node.

    Ring r (1-based) lies at angular radius r * ring_step; points are
    equally spaced in azimuth starting at the east direction.  None for
    ``ring_step`` resolves to the level's mean edge length.
    """

    rings: int
    points_per_ring: int
    ring_step: float | None = None
    include_center: bool = True

    def __post_init__(self):
        if self.rings < 1:
            raise ConfigError(f"need at least one ring, got {self.rings}")
        if self.points_per_ring < 3:
            raise ConfigError(
                f"need at least 3 points per ring, got {self.points_per_ring}"
            )
        if self.ring_step is not None and self.ring_step <= 0:
            raise ConfigError(f"ring step must be positive, got {self.ring_step}")

    @property
    def n_points(self) -> int:
        return self.rings * self.points_per_ring + (1 if self.include_center else 0)


@dataclass(frozen=True)
class PolygonalPatch:
    """Filter points are the node's neighbor ring of the given order."""

    order: int

    def __post_init__(self):
        if self.order < 1:
            raise ConfigError(f"polygonal patch order must be >= 1, got {self.order}")


PatchSpec = RectangularPatch | CircularPatch | PolygonalPatch


@dataclass(frozen=True)
class SamplerIndexMap:
    """Per-node nearest-node indices of every filter point (N x P)."""

    level: int
    patch: PatchSpec
    indices: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.indices.shape[0]

    @property
    def n_points(self) -> int:
        return self.indices.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.level, self.patch)).encode())
        h.update(np.ascontiguousarray(self.indices).tobytes())
        return h.hexdigest()


def tangent_frame(positions: np.ndarray):
    """East/north unit vectors of the global tangent frame at unit points."""
    pos = np.atleast_2d(positions)
    east = np.zeros_like(pos)
    east[:, 0] = -pos[:, 1]  # z-hat cross n
    east[:, 1] = pos[:, 0]
    norms = np.linalg.norm(east, axis=1)
    polar = norms < _POLE_EPS
    east[polar] = (1.0, 0.0, 0.0)
    norms[polar] = 1.0
    east /= norms[:, None]
    north = np.cross(pos, east)
    return east, north


def _resolve_spacing(value: float | None, level: IcosphereLevel) -> float:
    return level.mean_edge_length if value is None else value


def _rect_points(positions: np.ndarray, sx: int, sy: int, spacing: float) -> np.ndarray:
    """Gnomonic Sx x Sy grid per position, row-major with y outer, x inner.

    Grid lines sit at plane coordinates tan(k * spacing) so points along
    the frame axes lie at exact angular multiples of the spacing.
    """
    half_x, half_y = (sx - 1) / 2.0, (sy - 1) / 2.0
    if max(half_x, half_y) * spacing >= np.pi / 2:
        raise ConfigError(
            f"patch spans {max(half_x, half_y) * spacing:.3f} rad from center; "
            "gnomonic projection requires < pi/2"
        )
    u = np.tan((np.arange(sx) - half_x) * spacing)
    v = np.tan((np.arange(sy) - half_y) * spacing)
    east, north = tangent_frame(positions)
    pos = np.atleast_2d(positions)
    pts = (
        pos[:, None, None, :]
        + u[None, None, :, None] * east[:, None, None, :]
        + v[None, :, None, None] * north[:, None, None, :]
    )
    pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
    return pts.reshape(pos.shape[0], sx * sy, 3)


def _circ_points(
    positions: np.ndarray,
    rings: int,
    points_per_ring: int,
    ring_step: float,
    include_center: bool,
) -> np.ndarray:
    if rings * ring_step >= np.pi:
        raise ConfigError(
            f"outer ring radius {rings * ring_step:.3f} rad wraps past the antipode"
        )
    pos = np.atleast_2d(positions)
    east, north = tangent_frame(pos)
    az = 2.0 * np.pi * np.arange(points_per_ring) / points_per_ring
    radial = (
        np.cos(az)[:, None, None] * east[None] + np.sin(az)[:, None, None] * north[None]
    )  # (ppr, M, 3)
    chunks = []
    if include_center:
        chunks.append(pos[:, None, :])
    for r in range(1, rings + 1):
        theta = r * ring_step
        ring = np.cos(theta) * pos[None] + np.sin(theta) * radial
        chunks.append(np.moveaxis(ring, 0, 1))  # (M, ppr, 3)
    return np.concatenate(chunks, axis=1)


def rectangular_patch_points(
    level: IcosphereLevel, node: int, sx: int, sy: int, spacing: float | None = None
) -> np.ndarray:
    """Filter points of one node's rectangular patch, shape (Sx*Sy, 3)."""
    level._check_node(node)
    spacing = _resolve_spacing(spacing, level)
    RectangularPatch(sx, sy, spacing)  # validates
    return _rect_points(level.positions[node : node + 1], sx, sy, spacing)[0]


def circular_patch_points(
    level: IcosphereLevel,
    node: int,
    rings: int,
    points_per_ring: int,
    ring_step: float | None = None,
    include_center: bool = True,
) -> np.ndarray:
    """Filter points of one node's circular patch, center first if included."""
    level._check_node(node)
    ring_step = _resolve_spacing(ring_step, level)
    CircularPatch(rings, points_per_ring, ring_step, include_center)
    return _circ_points(
        level.positions[node : node + 1], rings, points_per_ring, ring_step, include_center
    )[0]


def polygonal_patch_points(
    level: IcosphereLevel, node: int, order: int, width: int | None = None
) -> np.ndarray:
    """Node indices of one node's neighbor-ring patch, padded with the node
    itself.  ``width`` defaults to the level's maximum ring size (computed
    over all nodes, so prefer build_index_map when mapping a whole level)."""
    PolygonalPatch(order)
    level._check_node(node)
    if width is None:
        width = all_neighbor_rings(level, order).shape[1]
    from .icosphere import neighbor_ring

    ring = neighbor_ring(level, node, order)
    if ring.size > width:
        raise ConfigError(f"ring size {ring.size} exceeds requested width {width}")
    return np.concatenate([ring, np.full(width - ring.size, node, dtype=np.int64)])


def nearest_node_index(level: IcosphereLevel, points: np.ndarray) -> np.ndarray:
    """Nearest mesh node per query point, ties broken by lowest index."""
    pts = points.reshape(-1, 3)
    tree = cKDTree(level.positions)
    k = min(4, level.n_nodes)
    dist, idx = tree.query(pts, k=k)
    if k == 1:
        return idx.reshape(points.shape[:-1])
    best = dist[:, :1]
    tied = dist <= best * (1.0 + 1e-12) + 1e-15
    lowest = np.where(tied, idx, level.n_nodes).min(axis=1)
    return lowest.reshape(points.shape[:-1]).astype(np.int64)


def build_index_map(
    hierarchy: IcosphereHierarchy, level: int, patch: PatchSpec
) -> SamplerIndexMap:
    """Build the N x P filter-point index matrix for one level and patch.

    Geometric patches are resolved to nearest mesh nodes (Euclidean
    distance, ties to the lowest index); polygonal patches pass mesh node
    indices straight through.  The result is a pure function of the mesh
    geometry and patch, so two builds are identical.
    """
    geom = hierarchy.level(level)
    if isinstance(patch, RectangularPatch):
        spacing = _resolve_spacing(patch.spacing, geom)
        concrete = RectangularPatch(patch.sx, patch.sy, spacing)
        pts = _rect_points(geom.positions, patch.sx, patch.sy, spacing)
        indices = nearest_node_index(geom, pts)
    elif isinstance(patch, CircularPatch):
        step = _resolve_spacing(patch.ring_step, geom)
        concrete = CircularPatch(patch.rings, patch.points_per_ring, step, patch.include_center)
        pts = _circ_points(
            geom.positions, patch.rings, patch.points_per_ring, step, patch.include_center
        )
        indices = nearest_node_index(geom, pts)
    elif isinstance(patch, PolygonalPatch):
        concrete = patch
        indices = all_neighbor_rings(geom, patch.order)
    else:
        raise ConfigError(f"unknown patch spec {patch!r}")
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    indices.setflags(write=False)
    return SamplerIndexMap(level=level, patch=concrete, indices=indices)


def gather(values: np.ndarray, index_map: SamplerIndexMap) -> np.ndarray:
    """Sample one channel plane through the index map: out[n, p] = values[idx[n, p]]."""
    values = np.asarray(values)
    if values.ndim != 1 or values.shape[0] != index_map.n_nodes:
        raise ShapeError(
            f"expected a flat array of {index_map.n_nodes} node values, "
            f"got shape {values.shape}"
        )
    return values[index_map.indices]

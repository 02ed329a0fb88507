"""Icosahedron subdivision hierarchy and mesh topology queries.

The unit sphere is discretized by recursively subdividing a regular
icosahedron: each subdivision step inserts one node at the normalized
midpoint of every edge and splits every triangle into four children.
Level k therefore has 10 * 4**k + 2 nodes (12, 42, 162, 642, 2562, 10242,
40962, ...), 20 * 4**k faces and 30 * 4**k edges.

Node ordering is parent-first: the first N_k nodes of level k+1 are the
level-k nodes with bit-identical positions, and the midpoint nodes are
appended in ascending order of their (min endpoint, max endpoint) edge
key.  This keeps node indices stable across runs and machines and lets
pooling address a parent node by its own index at the finer level.

All structures are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

MAX_LEVEL = 7

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

# Regular icosahedron on the golden-ratio vertex set
# {(+-1, +-phi, 0), (0, +-1, +-phi), (+-phi, 0, +-1)}, in a fixed vertex
# order so that node indexing is reproducible everywhere.
_BASE_VERTICES = np.array(
    [
        [-1.0, _PHI, 0.0],
        [1.0, _PHI, 0.0],
        [-1.0, -_PHI, 0.0],
        [1.0, -_PHI, 0.0],
        [0.0, -1.0, _PHI],
        [0.0, 1.0, _PHI],
        [0.0, -1.0, -_PHI],
        [0.0, 1.0, -_PHI],
        [_PHI, 0.0, -1.0],
        [_PHI, 0.0, 1.0],
        [-_PHI, 0.0, -1.0],
        [-_PHI, 0.0, 1.0],
    ]
)

_BASE_FACES = np.array(
    [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ],
    dtype=np.int64,
)


def node_count(level: int) -> int:
    """Number of nodes of the subdivision at the given level."""
    return 10 * 4**level + 2


@dataclass(frozen=True)
class IcosphereLevel:
    """One level of the subdivision hierarchy.

    ``positions`` are unit vectors, ``faces`` index triples with a
    consistent outward orientation.  Adjacency is stored in CSR layout
    with the neighbor list of every node sorted ascending.
    """

    level: int
    positions: np.ndarray  # (N, 3) float64 unit vectors
    faces: np.ndarray  # (F, 3) int64
    neighbor_indptr: np.ndarray  # (N + 1,) int64
    neighbor_indices: np.ndarray  # (2 * E,) int64
    mean_edge_length: float  # mean geodesic edge length, radians

    @property
    def n_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_edges(self) -> int:
        return self.neighbor_indices.size // 2

    def neighbors(self, node: int) -> np.ndarray:
        """Sorted neighbor indices of ``node`` (a read-only view)."""
        self._check_node(node)
        return self.neighbor_indices[
            self.neighbor_indptr[node] : self.neighbor_indptr[node + 1]
        ]

    def degrees(self) -> np.ndarray:
        return np.diff(self.neighbor_indptr)

    def adjacency(self) -> list[np.ndarray]:
        """Per-node sorted neighbor lists."""
        return [self.neighbors(i) for i in range(self.n_nodes)]

    def _check_node(self, node: int) -> None:
        if not 0 <= node < self.n_nodes:
            raise IndexError(
                f"node {node} out of range for level {self.level} "
                f"({self.n_nodes} nodes)"
            )


@dataclass(frozen=True)
class PoolingGroups:
    """Averaging groups that map a fine level onto its parent level.

    Group i consists of coarse node i itself (its fine-level index is
    also i, by parent-first ordering) plus the fine-level neighbors of i,
    all of which are edge midpoints.  Sizes are 6 for the 12 original
    icosahedron vertices and 7 everywhere else.

    ``member_index``/``member_weight`` are the groups padded to width 7
    for vectorized kernels; padding entries repeat the parent index and
    carry weight 0.
    """

    coarse_level: int
    fine_level: int
    groups: list[np.ndarray]
    member_index: np.ndarray  # (N_coarse, 7) int64
    member_weight: np.ndarray  # (N_coarse, 7) float64, rows sum to 1

    @property
    def n_coarse(self) -> int:
        return self.member_index.shape[0]

    def sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=np.int64)


class IcosphereHierarchy:
    """Nested icosphere levels 0..max_level plus their pooling groups."""

    def __init__(self, levels: list[IcosphereLevel]):
        self.levels = levels
        self._pooling: dict[int, PoolingGroups] = {}

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1

    def level(self, k: int) -> IcosphereLevel:
        if not 0 <= k <= self.max_level:
            raise IndexError(f"level {k} not built (max level {self.max_level})")
        return self.levels[k]

    def pooling_groups(self, coarse_level: int) -> PoolingGroups:
        if not 0 <= coarse_level < self.max_level:
            raise IndexError(
                f"pooling groups need level {coarse_level + 1}; "
                f"hierarchy stops at {self.max_level}"
            )
        if coarse_level not in self._pooling:
            self._pooling[coarse_level] = _build_pooling_groups(
                self.level(coarse_level), self.level(coarse_level + 1)
            )
        return self._pooling[coarse_level]


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _adjacency_from_faces(n_nodes: int, faces: np.ndarray):
    """CSR adjacency (indptr, indices) with sorted neighbor lists."""
    e = faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    und = np.unique(np.sort(e, axis=1), axis=0)
    both = np.concatenate([und, und[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, both[:, 0] + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, np.ascontiguousarray(both[:, 1])


def _mean_edge_length(positions: np.ndarray, indptr, indices) -> float:
    src = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    mask = src < indices  # each undirected edge once
    dots = np.einsum("ij,ij->i", positions[src[mask]], positions[indices[mask]])
    return float(np.mean(np.arccos(np.clip(dots, -1.0, 1.0))))


def _make_level(level: int, positions: np.ndarray, faces: np.ndarray) -> IcosphereLevel:
    indptr, indices = _adjacency_from_faces(positions.shape[0], faces)
    mel = _mean_edge_length(positions, indptr, indices)
    for arr in (positions, faces, indptr, indices):
        arr.setflags(write=False)
    return IcosphereLevel(level, positions, faces, indptr, indices, mel)


def _subdivide(positions: np.ndarray, faces: np.ndarray):
    """One subdivision step: midpoint nodes appended, 4 faces per face."""
    n = positions.shape[0]
    e = np.sort(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    keys = e[:, 0] * np.int64(n) + e[:, 1]
    unique_keys = np.unique(keys)  # ascending (min, max) edge-key order
    mid_of = n + np.searchsorted(unique_keys, keys).reshape(-1, 3)

    lo = unique_keys // n
    hi = unique_keys % n
    mids = _normalize_rows(positions[lo] + positions[hi])
    new_positions = np.concatenate([positions, mids])

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab, mbc, mca = mid_of[:, 0], mid_of[:, 1], mid_of[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([a, mab, mca], axis=1),
            np.stack([b, mbc, mab], axis=1),
            np.stack([c, mca, mbc], axis=1),
            np.stack([mab, mbc, mca], axis=1),
        ]
    )
    return new_positions, new_faces


def build_hierarchy(max_level: int) -> IcosphereHierarchy:
    """Build nested icosphere levels 0..max_level.

    Raises ConfigError for levels outside [0, 7]; level 7 already has
    163842 nodes and finer levels serve no purpose here.
    """
    if not isinstance(max_level, (int, np.integer)) or not 0 <= max_level <= MAX_LEVEL:
        raise ConfigError(f"max_level must be an integer in [0, {MAX_LEVEL}], got {max_level!r}")
    positions = _normalize_rows(_BASE_VERTICES.copy())
    faces = _BASE_FACES.copy()
    levels = [_make_level(0, positions, faces)]
    for k in range(1, max_level + 1):
        positions, faces = _subdivide(levels[-1].positions, levels[-1].faces)
        levels.append(_make_level(k, positions, faces))
    return IcosphereHierarchy(levels)


def neighbor_ring(level: IcosphereLevel, node: int, order: int) -> np.ndarray:
    """All nodes within graph distance ``order`` of ``node``, self included.

    Returned sorted ascending; order 0 is the node itself.
    """
    level._check_node(node)
    if order < 0:
        raise ConfigError(f"ring order must be >= 0, got {order}")
    indptr, indices = level.neighbor_indptr, level.neighbor_indices
    visited = np.zeros(level.n_nodes, dtype=bool)
    visited[node] = True
    frontier = np.array([node], dtype=np.int64)
    for _ in range(order):
        candidates = np.concatenate(
            [indices[indptr[i] : indptr[i + 1]] for i in frontier]
        )
        frontier = np.unique(candidates[~visited[candidates]])
        if frontier.size == 0:
            break
        visited[frontier] = True
    return np.flatnonzero(visited).astype(np.int64)


def all_neighbor_rings(level: IcosphereLevel, order: int) -> np.ndarray:
    """Neighbor rings of every node at once, padded to equal width.

    Row n holds the sorted members of node n's order-R ring followed by
    copies of n itself up to the level's maximum ring size.  Built by
    repeated one-hop expansion on a padded adjacency table.
    """
    if order < 0:
        raise ConfigError(f"ring order must be >= 0, got {order}")
    n = level.n_nodes
    self_col = np.arange(n, dtype=np.int64)
    degs = level.degrees()
    width = int(degs.max())
    adj = np.repeat(self_col[:, None], width, axis=1)
    for i in range(n):  # small fixed width (<= 6), cheap even at level 7
        adj[i, : degs[i]] = level.neighbors(i)
    ring = self_col[:, None]
    for _ in range(order):
        expanded = adj[ring].reshape(n, -1)
        ring = np.concatenate([ring, expanded], axis=1)
        ring = _dedupe_rows_pad_self(np.sort(ring, axis=1), self_col)
    return ring


def _dedupe_rows_pad_self(sorted_rows: np.ndarray, self_col: np.ndarray) -> np.ndarray:
    n, w = sorted_rows.shape
    keep = np.ones((n, w), dtype=bool)
    keep[:, 1:] = sorted_rows[:, 1:] != sorted_rows[:, :-1]
    counts = keep.sum(axis=1)
    width = int(counts.max())
    out = np.repeat(self_col[:, None], width, axis=1)
    rows = np.repeat(np.arange(n), counts)
    cols = np.concatenate([np.arange(c) for c in counts])
    out[rows, cols] = sorted_rows[keep]
    return out


def pooling_groups(hierarchy: IcosphereHierarchy, coarse_level: int) -> PoolingGroups:
    """Averaging groups mapping level ``coarse_level + 1`` onto ``coarse_level``."""
    return hierarchy.pooling_groups(coarse_level)


def _build_pooling_groups(coarse: IcosphereLevel, fine: IcosphereLevel) -> PoolingGroups:
    n_coarse = coarse.n_nodes
    groups = []
    member_index = np.repeat(np.arange(n_coarse, dtype=np.int64)[:, None], 7, axis=1)
    member_weight = np.zeros((n_coarse, 7))
    for i in range(n_coarse):
        # fine-level neighbors of a parent are all midpoints, so the
        # self-first group is already sorted ascending
        g = np.concatenate([[i], fine.neighbors(i)])
        groups.append(g)
        member_index[i, : g.size] = g
        member_weight[i, : g.size] = 1.0 / g.size
    member_index.setflags(write=False)
    member_weight.setflags(write=False)
    return PoolingGroups(coarse.level, fine.level, groups, member_index, member_weight)


def export_obj(level: IcosphereLevel, path) -> None:
    """Write the mesh as plain-text OBJ (1-based face indices)."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in level.positions:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for i, j, k in level.faces + 1:
            fh.write(f"f {i} {j} {k}\n")

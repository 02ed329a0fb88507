"""Surface-valued sample handling.

A sample is a per-node scalar map over one icosphere level with one or
more channels (the study that motivated this package pairs the two
hemispheres as channels), a validity mask for nodes without data, an
optional class label, and an id.  This module covers resampling an
arbitrary spherical source mesh onto an icosphere, per-sample demeaning,
global rotation, equirectangular projection for the image baseline, a
synthetic dataset generator, and the dataset file format.
"""

from __future__ import annotations

import csv as _csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError, FormatError, GeometryError
from .icosphere import IcosphereLevel, node_count
from .sampler import nearest_node_index


@dataclass
class NodeMap:
    """One sample: (N, C) node values plus mask, label and id.

    Masked-out nodes always store 0; the mask keeps zero unambiguous.
    """

    level: int
    values: np.ndarray  # (N, C) float64
    mask: np.ndarray  # (N,) bool
    label: int | None = None
    sample_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        n = node_count(self.level)
        if self.values.shape[0] != n:
            raise DataError(
                f"level {self.level} has {n} nodes, values carry {self.values.shape[0]}"
            )
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (n,):
            raise DataError(f"mask shape {self.mask.shape} does not match {n} nodes")
        self.values = np.where(self.mask[:, None], self.values, 0.0)

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SourceMesh:
    """An arbitrary closed triangulated sphere mesh with per-node values."""

    positions: np.ndarray  # (M, 3) unit vectors
    faces: np.ndarray  # (F, 3) int
    values: np.ndarray  # (M, C)
    mask: np.ndarray | None = None

    def __post_init__(self):
        edges = np.unique(
            np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0
        )
        euler = self.positions.shape[0] - edges.shape[0] + self.faces.shape[0]
        if euler != 2:
            raise GeometryError(
                f"source mesh is not a closed sphere (Euler characteristic {euler})"
            )


@dataclass(frozen=True)
class Rotation:
    """A proper rotation of the sphere."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ConfigError(f"rotation matrix must be 3x3, got {m.shape}")
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-10:
            raise ConfigError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > 1e-10:
            raise ConfigError("rotation matrix must have determinant 1")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, axis, degrees: float) -> "Rotation":
        """Rodrigues rotation about ``axis`` ('x', 'y', 'z' or a 3-vector)."""
        if isinstance(axis, str):
            try:
                u = {"x": (1.0, 0, 0), "y": (0, 1.0, 0), "z": (0, 0, 1.0)}[axis.lower()]
            except KeyError:
                raise ConfigError(f"axis must be x, y, z or a 3-vector, got {axis!r}")
            u = np.array(u)
        else:
            u = np.asarray(axis, dtype=np.float64)
            norm = np.linalg.norm(u)
            if u.shape != (3,) or norm == 0:
                raise ConfigError(f"axis must be a nonzero 3-vector, got {axis!r}")
            u = u / norm
        theta = np.deg2rad(degrees)
        k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
        m = np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)
        return cls(m)

    @property
    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)


# ---------------------------------------------------------------------------
# resampling


def resample_to_icosphere(src: SourceMesh, target: IcosphereLevel) -> NodeMap:
    """Interpolate source-mesh values onto icosphere nodes.

    Each target node is located inside one source triangle (by radial
    projection) and interpolated with barycentric weights.  A target node
    that coincides with a source node (distance < 1e-9) copies its value.
    A target node is masked out if any source node contributing weight is
    masked out.
    """
    pos, faces, values = src.positions, src.faces, np.atleast_2d(src.values.T).T
    src_mask = np.ones(pos.shape[0], dtype=bool) if src.mask is None else src.mask
    tree = cKDTree(pos)

    incident = [[] for _ in range(pos.shape[0])]
    for f, (a, b, c) in enumerate(faces):
        incident[a].append(f)
        incident[b].append(f)
        incident[c].append(f)

    n = target.n_nodes
    out = np.zeros((n, values.shape[1]))
    out_mask = np.ones(n, dtype=bool)
    dists, nearest = tree.query(target.positions)
    for t in range(n):
        point = target.positions[t]
        if dists[t] < 1e-9:
            out[t] = values[nearest[t]]
            out_mask[t] = src_mask[nearest[t]]
            continue
        candidates = list(incident[nearest[t]])
        face, weights = _locate(point, pos, faces, candidates)
        if face is None:
            # widen to the faces around the nearest vertex's triangle fan
            fan = {v for f in candidates for v in faces[f]}
            wider = sorted({f for v in fan for f in incident[v]})
            face, weights = _locate(point, pos, faces, wider)
        if face is None:  # degenerate source mesh; try everything
            face, weights = _locate(point, pos, faces, range(faces.shape[0]))
        if face is None:
            raise GeometryError(f"no source triangle contains target node {t}")
        idx = faces[face]
        out[t] = weights @ values[idx]
        contributing = idx[weights > 1e-12]
        out_mask[t] = bool(src_mask[contributing].all())
    out = np.where(out_mask[:, None], out, 0.0)
    return NodeMap(level=target.level, values=out, mask=out_mask)


def _locate(point, pos, faces, candidates):
    """Face containing the radial projection of ``point`` plus its
    normalized barycentric weights; (None, None) if no candidate does."""
    best, best_margin, best_w = None, -np.inf, None
    for f in candidates:
        a, b, c = pos[faces[f]]
        d = np.linalg.det(np.array([a, b, c]))
        if abs(d) < 1e-300:
            continue
        alpha = np.linalg.det(np.array([point, b, c])) / d
        beta = np.linalg.det(np.array([a, point, c])) / d
        gamma = np.linalg.det(np.array([a, b, point])) / d
        margin = min(alpha, beta, gamma)
        if margin > best_margin:
            best, best_margin = f, margin
            best_w = np.array([alpha, beta, gamma])
    if best is None or best_margin < -1e-10:
        return None, None
    w = np.clip(best_w, 0.0, None)
    return best, w / w.sum()


def source_from_level(level: IcosphereLevel, values, mask=None) -> SourceMesh:
    """Wrap an icosphere level as a resampling source."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    return SourceMesh(level.positions, level.faces, vals, mask)


# ---------------------------------------------------------------------------
# per-sample transforms


def demean(node_map: NodeMap) -> NodeMap:
    """Subtract the sample's mean over masked-in nodes, all channels jointly.

    One scalar per sample, so per-sample global offsets vanish; masked-out
    nodes remain 0.
    """
    if not node_map.mask.any():
        raise DataError(f"sample {node_map.sample_id!r} has an empty mask")
    mean = node_map.values[node_map.mask].mean()
    values = np.where(node_map.mask[:, None], node_map.values - mean, 0.0)
    return replace(node_map, values=values)


def rotation_index(level: IcosphereLevel, rotation: Rotation) -> np.ndarray:
    """Pull-back index: entry n is the node nearest to R^T . position(n)."""
    return nearest_node_index(level, level.positions @ rotation.matrix)


def rotate_map(level: IcosphereLevel, node_map: NodeMap, rotation: Rotation) -> NodeMap:
    """Rotate the map by nearest-node resampling (mask rotates identically)."""
    if node_map.level != level.level:
        raise ConfigError(
            f"map is at level {node_map.level}, geometry at {level.level}"
        )
    idx = rotation_index(level, rotation)
    return replace(node_map, values=node_map.values[idx], mask=node_map.mask[idx])


# ---------------------------------------------------------------------------
# equirectangular projection


def projection_index(level: IcosphereLevel, width: int, height: int, pad: int) -> np.ndarray:
    """Pixel -> node index table of the padded equirectangular image.

    Interior pixel (u, v) looks along longitude 2*pi*(u+0.5)/width - pi
    and latitude pi/2 - pi*(v+0.5)/height.  Horizontal padding wraps in
    longitude; vertical padding continues across the pole, i.e. copies the
    row mirrored at the pole and shifted by half the image width.
    """
    if width < 4 or height < 4:
        raise ConfigError(f"projection needs width, height >= 4, got {width}x{height}")
    if pad < 0:
        raise ConfigError(f"padding must be >= 0, got {pad}")
    if pad > height:
        raise ConfigError(f"padding {pad} exceeds image height {height}")
    lon = 2.0 * np.pi * (np.arange(width) + 0.5) / width - np.pi
    lat = np.pi / 2.0 - np.pi * (np.arange(height) + 0.5) / height
    directions = np.stack(
        [
            np.cos(lat)[:, None] * np.cos(lon)[None, :],
            np.cos(lat)[:, None] * np.sin(lon)[None, :],
            np.broadcast_to(np.sin(lat)[:, None], (height, width)),
        ],
        axis=-1,
    )
    interior = nearest_node_index(level, directions.reshape(-1, 3)).reshape(height, width)
    if pad == 0:
        return interior

    shift = width // 2
    u = np.arange(-pad, width + pad)
    v = np.arange(-pad, height + pad)
    uu, vv = np.meshgrid(u, v)
    over_north = vv < 0
    over_south = vv >= height
    vv = np.where(over_north, -1 - vv, vv)
    vv = np.where(over_south, 2 * height - 1 - vv, vv)
    uu = np.where(over_north | over_south, uu + shift, uu)
    return interior[vv, np.mod(uu, width)]


def project_equirectangular(
    level: IcosphereLevel, node_map: NodeMap, width: int, height: int, pad: int
) -> np.ndarray:
    """Project one sample to a (height + 2*pad, width + 2*pad, C) image.

    Pixels covering masked-out nodes are set to 0.
    """
    if node_map.level != level.level:
        raise ConfigError(
            f"map is at level {node_map.level}, geometry at {level.level}"
        )
    idx = projection_index(level, width, height, pad)
    image = node_map.values[idx]
    image[~node_map.mask[idx]] = 0.0
    return image


def project_dataset(
    level: IcosphereLevel, maps: list[NodeMap], width: int, height: int, pad: int
):
    """Project a whole dataset through one shared pixel index table.

    Returns (images (B, H+2p, W+2p, C) float64, labels (B,) int).
    """
    idx = projection_index(level, width, height, pad)
    images = np.stack(
        [np.where(m.mask[idx][..., None], m.values[idx], 0.0) for m in maps]
    )
    labels = np.array([-1 if m.label is None else m.label for m in maps])
    return images, labels


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Bump:
    """One Gaussian bump on the sphere: amplitude * exp(-theta^2 / 2 width^2)."""

    center: tuple[float, float, float]
    amplitude: float
    width: float  # angular sigma, radians
    channel: int = 0


@dataclass(frozen=True)
class ClassSpec:
    """Per-class bump patterns plus a common baseline value."""

    bumps_per_class: tuple[tuple[Bump, ...], ...]
    base: float = 0.0

    def __post_init__(self):
        if len(self.bumps_per_class) < 2:
            raise ConfigError("need at least two classes")
        for bumps in self.bumps_per_class:
            for b in bumps:
                if b.width <= 0:
                    raise ConfigError(f"bump width must be positive, got {b.width}")


@dataclass(frozen=True)
class NoiseSpec:
    """Smooth per-sample nuisance structure.

    ``smooth_amplitude`` scales a sum of random great-circle cosine waves
    (a cheap stand-in for low-order spherical harmonics), ``offset_range``
    bounds a per-sample global offset (what demeaning removes), and
    ``amplitude_jitter`` scales multiplicative bump-amplitude noise.
    """

    smooth_amplitude: float = 0.0
    n_waves: int = 4
    max_wave_order: float = 3.0
    offset_range: float = 0.0
    amplitude_jitter: float = 0.0

    def __post_init__(self):
        if self.smooth_amplitude < 0 or self.offset_range < 0 or self.amplitude_jitter < 0:
            raise ConfigError("noise magnitudes must be non-negative")
        if self.n_waves < 0:
            raise ConfigError(f"n_waves must be >= 0, got {self.n_waves}")


def _sph(lat_deg: float, lon_deg: float) -> tuple[float, float, float]:
    lat, lon = np.deg2rad(lat_deg), np.deg2rad(lon_deg)
    return (
        float(np.cos(lat) * np.cos(lon)),
        float(np.cos(lat) * np.sin(lon)),
        float(np.sin(lat)),
    )


def default_class_spec() -> ClassSpec:
    """Two classes told apart by which mid-latitude sites carry bumps.

    The sites sit in the longitude band around 90 degrees so that a
    90-degree rotation about z moves them onto the projection seam at
    +-180 degrees; channel 1 mirrors the pattern in the south.
    """
    a = 1.0
    w = 0.22
    sites = {
        "A": _sph(32.0, 68.0),
        "B": _sph(10.0, 95.0),
        "C": _sph(38.0, 118.0),
        "D": _sph(-25.0, 82.0),
        "E": _sph(-42.0, 108.0),
    }
    class0 = (
        Bump(sites["A"], a, w, 0),
        Bump(sites["C"], -a, w, 0),
        Bump(sites["D"], a, w, 1),
    )
    class1 = (
        Bump(sites["B"], a, w, 0),
        Bump(sites["C"], a, w, 0),
        Bump(sites["E"], -a, w, 1),
    )
    return ClassSpec((class0, class1))


def default_noise_spec() -> NoiseSpec:
    return NoiseSpec(
        smooth_amplitude=0.85,
        n_waves=4,
        max_wave_order=3.0,
        offset_range=1.0,
        amplitude_jitter=0.5,
    )


def synthesize_dataset(
    level: IcosphereLevel,
    n_samples: int,
    class_spec: ClassSpec | None = None,
    noise_spec: NoiseSpec | None = None,
    seed: int = 0,
    channels: int = 2,
) -> list[NodeMap]:
    """Generate labeled synthetic samples on one icosphere level.

    Labels cycle through the classes, so counts are balanced to within
    one sample.  Each sample draws from an independent child seed of
    ``(seed, index)``; the dataset is bit-reproducible and per-sample
    generation is order-independent.
    """
    class_spec = default_class_spec() if class_spec is None else class_spec
    noise_spec = default_noise_spec() if noise_spec is None else noise_spec
    if n_samples < 0:
        raise ConfigError(f"n_samples must be >= 0, got {n_samples}")
    for bumps in class_spec.bumps_per_class:
        for b in bumps:
            if b.channel >= channels:
                raise ConfigError(
                    f"bump channel {b.channel} outside {channels} channels"
                )
    pos = level.positions
    n = level.n_nodes
    k = len(class_spec.bumps_per_class)
    maps = []
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        label = i % k
        values = np.full((n, channels), class_spec.base)
        for bump in class_spec.bumps_per_class[label]:
            theta = np.arccos(np.clip(pos @ np.asarray(bump.center), -1.0, 1.0))
            amp = bump.amplitude * (
                1.0 + noise_spec.amplitude_jitter * rng.uniform(-1.0, 1.0)
            )
            values[:, bump.channel] += amp * np.exp(-(theta**2) / (2.0 * bump.width**2))
        for c in range(channels):
            for _ in range(noise_spec.n_waves):
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                omega = rng.uniform(1.0, noise_spec.max_wave_order)
                phase = rng.uniform(0.0, 2.0 * np.pi)
                amp = noise_spec.smooth_amplitude * rng.uniform(0.5, 1.0)
                values[:, c] += amp * np.cos(omega * (pos @ axis) + phase)
        values += rng.uniform(-noise_spec.offset_range, noise_spec.offset_range)
        maps.append(
            NodeMap(
                level=level.level,
                values=values,
                mask=np.ones(n, dtype=bool),
                label=label,
                sample_id=f"synth-{seed}-{i:05d}",
            )
        )
    return maps


def stack_dataset(maps: list[NodeMap]):
    """Stack samples into (B, N, C) values and (B,) labels."""
    if not maps:
        raise DataError("empty dataset")
    levels = {m.level for m in maps}
    if len(levels) != 1:
        raise DataError(f"mixed levels in dataset: {sorted(levels)}")
    if any(m.label is None for m in maps):
        raise DataError("dataset contains unlabeled samples")
    x = np.stack([m.values for m in maps])
    y = np.array([m.label for m in maps], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# file formats

_MAGIC = b"GSRF"
_VERSION = 1
_NO_LABEL = 0xFFFFFFFF


def save_node_maps(path, maps: list[NodeMap]) -> None:
    """Write a dataset: magic "GSRF", u32 version, u32 level, u32 channels,
    u32 sample count, then per sample u32 label (0xFFFFFFFF if absent),
    u32 id length + UTF-8 id, the mask as a little-endian bitmap of
    ceil(N/8) bytes, and N*C float32 values interleaved per node.  All
    integers little-endian."""
    if maps:
        levels = {m.level for m in maps}
        chans = {m.channels for m in maps}
        if len(levels) != 1 or len(chans) != 1:
            raise DataError(
                f"dataset not homogeneous: levels {sorted(levels)}, channels {sorted(chans)}"
            )
        level, channels = maps[0].level, maps[0].channels
    else:
        level, channels = 0, 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _VERSION, level, channels, len(maps)))
        for m in maps:
            label = _NO_LABEL if m.label is None else int(m.label)
            sid = m.sample_id.encode("utf-8")
            fh.write(struct.pack("<II", label, len(sid)))
            fh.write(sid)
            fh.write(np.packbits(m.mask, bitorder="little").tobytes())
            fh.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def load_node_maps(path) -> list[NodeMap]:
    """Read a dataset file; ``.csv`` paths go through the CSV importer."""
    if str(path).lower().endswith(".csv"):
        return [load_node_map_csv(path)]
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise FormatError(f"dataset file too short ({len(blob)} bytes) for a header")
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, level, channels, count = struct.unpack_from("<IIII", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if count == 0:
        return []
    n = node_count(level)
    mask_bytes = (n + 7) // 8
    offset = 20
    maps = []
    for s in range(count):
        if offset + 8 > len(blob):
            raise FormatError(f"sample {s}: truncated header at offset {offset}")
        label, id_len = struct.unpack_from("<II", blob, offset)
        offset += 8
        need = id_len + mask_bytes + n * channels * 4
        if offset + need > len(blob):
            raise FormatError(
                f"sample {s}: needs {need} bytes at offset {offset} "
                f"(level {level} implies {n} nodes); file has {len(blob) - offset}"
            )
        sid = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        mask = np.unpackbits(
            np.frombuffer(blob, dtype=np.uint8, count=mask_bytes, offset=offset),
            bitorder="little",
        )[:n].astype(bool)
        offset += mask_bytes
        values = (
            np.frombuffer(blob, dtype="<f4", count=n * channels, offset=offset)
            .astype(np.float64)
            .reshape(n, channels)
        )
        offset += n * channels * 4
        maps.append(
            NodeMap(
                level=level,
                values=values,
                mask=mask,
                label=None if label == _NO_LABEL else int(label),
                sample_id=sid,
            )
        )
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after the last sample")
    return maps


def load_node_map_csv(path) -> NodeMap:
    """Import one sample from CSV rows of node_index, ch0 [, ch1, ...], mask."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(_csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if lineno == 1:
                    continue  # header line
                raise FormatError(f"{path}: unparseable row {lineno}: {row!r}")
    if not rows:
        raise FormatError(f"{path}: no data rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1 or min(widths) < 3:
        raise FormatError(
            f"{path}: rows must be node_index, channels..., mask; widths seen {sorted(widths)}"
        )
    arr = np.array(rows)
    n = arr.shape[0]
    level = next((k for k in range(8) if node_count(k) == n), None)
    if level is None:
        raise FormatError(f"{path}: {n} rows is not an icosphere node count")
    order = arr[:, 0].astype(int)
    if sorted(order.tolist()) != list(range(n)):
        raise FormatError(f"{path}: node_index column must enumerate 0..{n - 1}")
    values = np.zeros((n, arr.shape[1] - 2))
    values[order] = arr[:, 1:-1]
    mask = np.zeros(n, dtype=bool)
    mask[order] = arr[:, -1] != 0
    import os

    return NodeMap(
        level=level,
        values=values,
        mask=mask,
        sample_id=os.path.splitext(os.path.basename(str(path)))[0],
    )

"""Layer stacks for the mesh network and the projection baseline.

A model is an ordered list of layer rows mirroring its architecture
table, so "freeze the first 20 rows" and per-row parameter audits mean
exactly what the table says.  Rows own their parameters and gradient
buffers; the kernels live in :mod:`icocnn.engine`.

The default mesh network is five blocks of
(mesh convolution -> batch norm -> ReLU -> mesh mean pool) walking the
icosphere from 40962 down to 42 nodes, followed by a 50-unit hidden
layer and a 2-way softmax (25 rows).  The default projection baseline is
the 19-row stack of six convolutions adapted from ImageNet-VGG-F.
Miniatures (shorter level chains, fewer filters, smaller images) use the
same machinery.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import ConfigError, FormatError, ShapeError
from .icosphere import IcosphereHierarchy, build_hierarchy
from .sampler import (
    CircularPatch,
    PatchSpec,
    PolygonalPatch,
    RectangularPatch,
    SamplerIndexMap,
    build_index_map,
)

BYTES_PER_VALUE = 4  # audit convention: float32 storage


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# layer rows


class Layer:
    """Base row: parameter-free, shape-preserving."""

    kind = "identity"
    frozen = False

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def out_shape(self, in_shape):
        return in_shape

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def descriptor(self) -> dict:
        return {"kind": self.kind}


class MeshConv(Layer):
    kind = "mesh_conv"

    def __init__(self, index_map: SamplerIndexMap, c_in: int, c_out: int, rng):
        p = index_map.n_points
        self.index_map = index_map
        self.c_in, self.c_out = c_in, c_out
        self.w = _glorot(rng, (p, c_in, c_out), p * c_in, p * c_out)
        self.b = np.zeros(c_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train):
        self._x = x
        return engine.mesh_conv(x, self.index_map, self.w, self.b)

    def backward(self, grad):
        gx, self.gw, self.gb = engine.mesh_conv_backward(self._x, self.index_map, self.w, grad)
        return gx

    def out_shape(self, in_shape):
        b, n, c = in_shape
        if n != self.index_map.n_nodes or c != self.c_in:
            raise ConfigError(
                f"mesh conv expects ({self.index_map.n_nodes} nodes, {self.c_in} ch), "
                f"got {in_shape}"
            )
        return (b, n, self.c_out)

    def params(self):
        return {"weights": self.w, "bias": self.b}

    def grads(self):
        return {"weights": self.gw, "bias": self.gb}

    def descriptor(self):
        return {
            "kind": self.kind,
            "level": self.index_map.level,
            "patch": _patch_to_json(self.index_map.patch),
            "in": self.c_in,
            "out": self.c_out,
        }


class MeshPool(Layer):
    kind = "mesh_pool"

    def __init__(self, groups, n_fine: int, n_coarse: int):
        self.groups = groups
        self.n_fine, self.n_coarse = n_fine, n_coarse

    def forward(self, x, train):
        if x.shape[1] != self.n_fine:
            raise ShapeError(f"pool expects {self.n_fine} nodes, got {x.shape[1]}")
        return engine.mesh_mean_pool(x, self.groups)

    def backward(self, grad):
        return engine.mesh_mean_pool_backward(grad, self.groups, self.n_fine)

    def out_shape(self, in_shape):
        b, n, c = in_shape
        if n != self.n_fine:
            raise ConfigError(f"pool expects {self.n_fine} nodes, got {in_shape}")
        return (b, self.n_coarse, c)

    def descriptor(self):
        return {
            "kind": self.kind,
            "fine_level": self.groups.fine_level,
            "coarse_level": self.groups.coarse_level,
        }


class BatchNorm(Layer):
    kind = "batch_norm"

    def __init__(self, channels: int, epsilon: float = 1e-5, momentum: float = 0.9):
        self.state = engine.BatchNormState.create(channels, epsilon, momentum)
        self.gscale = np.zeros(channels)
        self.gshift = np.zeros(channels)
        self._cache = None

    def forward(self, x, train):
        # frozen batch norm behaves like eval mode: running statistics are
        # used and left untouched, so frozen-prefix outputs are per-sample
        # deterministic
        mode_train = train and not self.frozen
        out, self._cache = engine.batch_norm_forward(
            x, self.state, train=mode_train, update_running=mode_train
        )
        return out

    def backward(self, grad):
        gx, self.gscale, self.gshift = engine.batch_norm_backward(self._cache, grad)
        return gx

    def params(self):
        s = self.state
        return {
            "scale": s.scale,
            "shift": s.shift,
            "running_mean": s.running_mean,
            "running_var": s.running_var,
        }

    def grads(self):
        z = np.zeros_like(self.state.running_mean)
        return {"scale": self.gscale, "shift": self.gshift, "running_mean": z, "running_var": z}

    def trainable(self):
        return {"scale": self.state.scale, "shift": self.state.shift}

    def load(self, values):
        s = self.state
        s.scale = values["scale"]
        s.shift = values["shift"]
        s.running_mean = values["running_mean"]
        s.running_var = values["running_var"]

    def descriptor(self):
        return {
            "kind": self.kind,
            "channels": int(self.state.scale.shape[0]),
            "epsilon": self.state.epsilon,
            "momentum": self.state.momentum,
        }


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x, train):
        out, self._mask = engine.relu(x)
        return out

    def backward(self, grad):
        return engine.relu_backward(self._mask, grad)


class Dense(Layer):
    """Affine row; flattens any (B, ...) input to (B, D) first."""

    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng):
        self.d_in, self.d_out = d_in, d_out
        self.w = _glorot(rng, (d_in, d_out), d_in, d_out)
        self.b = np.zeros(d_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None
        self._in_shape = None

    def forward(self, x, train):
        self._in_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.d_in:
            raise ShapeError(f"dense expects {self.d_in} features, got {flat.shape[1]}")
        self._x = flat
        return engine.dense(flat, self.w, self.b)

    def backward(self, grad):
        gx, self.gw, self.gb = engine.dense_backward(self._x, self.w, grad)
        return gx.reshape(self._in_shape)

    def out_shape(self, in_shape):
        d = int(np.prod(in_shape[1:]))
        if d != self.d_in:
            raise ConfigError(f"dense expects {self.d_in} features, got {in_shape}")
        return (in_shape[0], self.d_out)

    def params(self):
        return {"weights": self.w, "bias": self.b}

    def grads(self):
        return {"weights": self.gw, "bias": self.gb}

    def descriptor(self):
        return {"kind": self.kind, "in": self.d_in, "out": self.d_out}


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, kernel: int, stride: int, pad: int, c_in: int, c_out: int, rng):
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.c_in, self.c_out = c_in, c_out
        fan = kernel * kernel
        self.w = _glorot(rng, (kernel, kernel, c_in, c_out), fan * c_in, fan * c_out)
        self.b = np.zeros(c_out)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train):
        self._x = x
        return engine.image_conv2d(x, self.w, self.b, self.stride, self.pad)

    def backward(self, grad):
        gx, self.gw, self.gb = engine.image_conv2d_backward(
            self._x, self.w, self.stride, self.pad, grad
        )
        return gx

    def out_shape(self, in_shape):
        b, h, w, c = in_shape
        if c != self.c_in:
            raise ConfigError(f"conv2d expects {self.c_in} channels, got {in_shape}")
        ho, wo = engine._conv2d_geometry(h, w, self.kernel, self.stride, self.pad)
        return (b, ho, wo, self.c_out)

    def params(self):
        return {"weights": self.w, "bias": self.b}

    def grads(self):
        return {"weights": self.gw, "bias": self.gb}

    def descriptor(self):
        return {
            "kind": self.kind,
            "kernel": self.kernel,
            "stride": self.stride,
            "pad": self.pad,
            "in": self.c_in,
            "out": self.c_out,
        }


class MeanPool2d(Layer):
    kind = "mean_pool2d"

    def __init__(self, kernel: int, stride: int):
        self.kernel, self.stride = kernel, stride
        self._in_shape = None

    def forward(self, x, train):
        self._in_shape = x.shape
        return engine.image_mean_pool2d(x, self.kernel, self.stride)

    def backward(self, grad):
        return engine.image_mean_pool2d_backward(self._in_shape, self.kernel, self.stride, grad)

    def out_shape(self, in_shape):
        b, h, w, c = in_shape
        ho, wo = engine._conv2d_geometry(h, w, self.kernel, self.stride, 0)
        return (b, ho, wo, c)

    def descriptor(self):
        return {"kind": self.kind, "kernel": self.kernel, "stride": self.stride}


class Softmax(Layer):
    """Classifier row.  During training the loss consumes the logits that
    feed this row; forward here only turns them into probabilities."""

    kind = "softmax"

    def forward(self, x, train):
        return engine.softmax(x)

    def backward(self, grad):  # pragma: no cover - training bypasses this row
        raise ConfigError("softmax row has no standalone backward; use the loss gradient")


# ---------------------------------------------------------------------------
# the model


@dataclass(frozen=True)
class RowReport:
    row: int
    name: str
    weight_values: int
    weight_bytes: int
    bias_values: int
    bias_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.weight_bytes + self.bias_bytes


class Model:
    """Ordered layer rows plus the metadata needed to rebuild them."""

    def __init__(self, kind: str, rows: list[Layer], meta: dict):
        self.kind = kind
        self.rows = rows
        self.meta = meta
        self.validate_shapes()

    # -- shape bookkeeping ---------------------------------------------------

    def input_shape(self, batch: int = 1):
        m = self.meta
        if self.kind == "gcnn":
            return (batch, m["n_nodes"], m["in_channels"])
        return (batch, m["height"], m["width"], m["in_channels"])

    def shape_chain(self, batch: int = 1):
        shapes = [self.input_shape(batch)]
        for row in self.rows:
            shapes.append(row.out_shape(shapes[-1]))
        return shapes

    def validate_shapes(self):
        self.shape_chain()

    # -- forward / backward ---------------------------------------------------

    def forward(self, x, train: bool = False):
        for row in self.rows:
            x = row.forward(x, train)
        return x

    def logits(self, x, train: bool = False):
        for row in self.rows[:-1]:
            x = row.forward(x, train)
        return x

    def loss_and_gradients(self, x, labels, train: bool = True):
        """One forward/backward pass; gradients land in the rows.

        Returns (mean loss, predicted labels)."""
        z = self.logits(x, train)
        loss, grad = engine.softmax_cross_entropy(z, labels)
        for row in reversed(self.rows[:-1]):
            grad = row.backward(grad)
        return loss, np.argmax(z, axis=1)

    def predict(self, x, batch_size: int = 256):
        out = []
        for start in range(0, x.shape[0], batch_size):
            out.append(np.argmax(self.logits(x[start : start + batch_size]), axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def forward_rows(self, x, n_rows: int, batch_size: int = 256):
        """Eval-mode output of the first ``n_rows`` rows, batched."""
        out = []
        for start in range(0, x.shape[0], batch_size):
            chunk = x[start : start + batch_size]
            for row in self.rows[:n_rows]:
                chunk = row.forward(chunk, train=False)
            out.append(chunk)
        return np.concatenate(out)

    # -- parameters ------------------------------------------------------------

    def sgd_step(self, learning_rate: float):
        params, grads = [], []
        for row in self.rows:
            if row.frozen:
                continue
            trainable = row.trainable() if isinstance(row, BatchNorm) else row.params()
            g = row.grads()
            for name, p in trainable.items():
                params.append(p)
                grads.append(g[name])
        engine.sgd_step(params, grads, learning_rate)

    def freeze_prefix(self, layer_count: int):
        if not 0 <= layer_count <= len(self.rows):
            raise ConfigError(
                f"freeze count {layer_count} outside [0, {len(self.rows)}]"
            )
        for i, row in enumerate(self.rows):
            row.frozen = i < layer_count

    def snapshot(self):
        return [
            {name: arr.copy() for name, arr in row.params().items()} for row in self.rows
        ]

    def restore(self, snap):
        for row, values in zip(self.rows, snap):
            if not values:
                continue
            if isinstance(row, BatchNorm):
                row.load({k: v.copy() for k, v in values.items()})
            else:
                for name, arr in row.params().items():
                    arr[...] = values[name]

    def parameter_report(self) -> list[RowReport]:
        """Per-row value counts and byte sizes at 4 bytes per value.

        Batch-norm rows count all four per-feature arrays as "weights"
        (scale, shift and the two running moments), matching how the
        architecture tables account for them.
        """
        reports = []
        for i, row in enumerate(self.rows, start=1):
            p = row.params()
            if not p:
                continue
            if isinstance(row, BatchNorm):
                wv = sum(a.size for a in p.values())
                bv = 0
            else:
                wv = p["weights"].size
                bv = p["bias"].size
            reports.append(
                RowReport(
                    row=i,
                    name=f"{row.kind}",
                    weight_values=wv,
                    weight_bytes=wv * BYTES_PER_VALUE,
                    bias_values=bv,
                    bias_bytes=bv * BYTES_PER_VALUE,
                )
            )
        return reports


# ---------------------------------------------------------------------------
# builders


def _patch_to_json(patch: PatchSpec) -> dict:
    if isinstance(patch, RectangularPatch):
        return {"type": "rectangular", "sx": patch.sx, "sy": patch.sy, "spacing": patch.spacing}
    if isinstance(patch, CircularPatch):
        return {
            "type": "circular",
            "rings": patch.rings,
            "points_per_ring": patch.points_per_ring,
            "ring_step": patch.ring_step,
            "include_center": patch.include_center,
        }
    return {"type": "polygonal", "order": patch.order}


def _patch_from_json(data: dict) -> PatchSpec:
    kind = data["type"]
    if kind == "rectangular":
        return RectangularPatch(data["sx"], data["sy"], data["spacing"])
    if kind == "circular":
        return CircularPatch(
            data["rings"], data["points_per_ring"], data["ring_step"], data["include_center"]
        )
    if kind == "polygonal":
        return PolygonalPatch(data["order"])
    raise FormatError(f"unknown patch type {kind!r}")


def build_gcnn(
    hierarchy: IcosphereHierarchy,
    channels: int = 2,
    patch: PatchSpec = RectangularPatch(5, 5),
    filters_per_conv: int = 36,
    hidden: int = 50,
    classes: int = 2,
    seed: int = 0,
    start_level: int | None = None,
    end_level: int = 1,
) -> Model:
    """Assemble the mesh network.

    The default walks levels 6 -> 1 (40962 -> 42 nodes) with 36 filters,
    a 50-unit hidden layer and 2 classes.  Miniatures pick any contiguous
    level chain and filter count.  Weights are Glorot-uniform from
    ``seed``; two builds from the same seed are bit-identical.
    """
    start = hierarchy.max_level if start_level is None else start_level
    if not 0 <= end_level < start <= hierarchy.max_level:
        raise ConfigError(
            f"level chain {start}..{end_level} not available in a hierarchy "
            f"with max level {hierarchy.max_level}"
        )
    rng = np.random.default_rng(seed)
    rows: list[Layer] = []
    c_in = channels
    for k, level in enumerate(range(start, end_level, -1)):
        imap = build_index_map(hierarchy, level, patch)
        rows.append(MeshConv(imap, c_in, filters_per_conv, rng))
        rows.append(BatchNorm(filters_per_conv))
        rows.append(ReLU())
        groups = hierarchy.pooling_groups(level - 1)
        rows.append(
            MeshPool(groups, hierarchy.level(level).n_nodes, hierarchy.level(level - 1).n_nodes)
        )
        c_in = filters_per_conv
    flat = hierarchy.level(end_level).n_nodes * filters_per_conv
    rows.append(Dense(flat, hidden, rng))
    rows.append(BatchNorm(hidden))
    rows.append(ReLU())
    rows.append(Dense(hidden, classes, rng))
    rows.append(Softmax())
    meta = {
        "n_nodes": hierarchy.level(start).n_nodes,
        "in_channels": channels,
        "classes": classes,
        "filters": filters_per_conv,
        "hidden": hidden,
        "seed": seed,
        "max_level": hierarchy.max_level,
        "start_level": start,
        "end_level": end_level,
        "patch": _patch_to_json(patch),
    }
    return Model("gcnn", rows, meta)


def build_pcnn(
    width: int = 224,
    height: int = 224,
    channels: int = 2,
    classes: int = 2,
    seed: int = 0,
    filters: int = 64,
    hidden: int = 100,
) -> Model:
    """Assemble the projection baseline (six convolutions, 19 rows).

    Arbitrary image sizes are allowed as long as the stride chain leaves
    at least one pixel everywhere; the hidden layer width adapts to the
    traced output size.  The two inconsistent output-size entries in the
    source table (normalization 2 and ReLU 5) are treated as typos; the
    stack is built with the self-consistent sizes.
    """
    rng = np.random.default_rng(seed)
    rows: list[Layer] = [
        Conv2d(11, 4, 1, channels, filters, rng),
        ReLU(),
        BatchNorm(filters),
        MeanPool2d(2, 2),
        Conv2d(5, 1, 2, filters, filters, rng),
        ReLU(),
        BatchNorm(filters),
        MeanPool2d(2, 2),
        Conv2d(3, 1, 1, filters, filters, rng),
        ReLU(),
        Conv2d(3, 1, 1, filters, filters, rng),
        ReLU(),
        Conv2d(3, 1, 1, filters, filters, rng),
        ReLU(),
        MeanPool2d(2, 2),
    ]
    shape = (1, height, width, channels)
    for row in rows:
        shape = row.out_shape(shape)
    flat = int(np.prod(shape[1:]))
    rows.append(Dense(flat, hidden, rng))
    rows.append(ReLU())
    rows.append(Dense(hidden, classes, rng))
    rows.append(Softmax())
    meta = {
        "width": width,
        "height": height,
        "in_channels": channels,
        "classes": classes,
        "filters": filters,
        "hidden": hidden,
        "seed": seed,
    }
    return Model("pcnn", rows, meta)


def build_mini_pcnn(
    width: int = 16,
    height: int = 16,
    channels: int = 2,
    classes: int = 2,
    seed: int = 0,
    filters: int = 6,
    hidden: int = 8,
) -> Model:
    """Small image stack with the same row types as the full baseline,
    sized for gradient checking and desk-scale experiments."""
    rng = np.random.default_rng(seed)
    rows: list[Layer] = [
        Conv2d(5, 2, 1, channels, filters, rng),
        ReLU(),
        BatchNorm(filters),
        MeanPool2d(2, 2),
        Conv2d(3, 1, 1, filters, filters, rng),
        ReLU(),
        MeanPool2d(2, 2),
    ]
    shape = (1, height, width, channels)
    for row in rows:
        shape = row.out_shape(shape)
    flat = int(np.prod(shape[1:]))
    rows.append(Dense(flat, hidden, rng))
    rows.append(ReLU())
    rows.append(Dense(hidden, classes, rng))
    rows.append(Softmax())
    meta = {
        "width": width,
        "height": height,
        "in_channels": channels,
        "classes": classes,
        "filters": filters,
        "hidden": hidden,
        "seed": seed,
        "mini": True,
    }
    return Model("pcnn", rows, meta)


def default_freeze_count(model: Model) -> int:
    """Rows to freeze for head-retraining: everything below the classifier
    head.  The mesh network's head includes its hidden-layer batch norm
    (5 rows), the projection baseline's does not (4 rows)."""
    head = 5 if model.kind == "gcnn" else 4
    return len(model.rows) - head


# ---------------------------------------------------------------------------
# table expectations (audit comparison)

GCNN_TABLE_BYTES = {
    1: 7200,  # conv1 weights
    5: 129600,
    9: 129600,
    13: 129600,
    17: 129600,
    21: 302400,  # hidden dense weights
    24: 408,  # output dense, weights plus bias as printed in the table
    2: 576,
    6: 576,
    10: 576,
    14: 576,
    18: 576,
    22: 800,
}
GCNN_TABLE_TOTAL = 1.63e6

PCNN_TABLE_BYTES = {
    1: 61952,
    5: 409600,
    9: 147456,
    11: 147456,
    13: 147456,
    16: 921600,
    # row 18 prints 408 B although the layer is 100 -> 2; audited as a known
    # discrepancy, not enforced
}
PCNN_TABLE_TOTAL = 1.79e6


def compare_to_table(model: Model):
    """Audit the default build against its architecture table.

    Returns (per-row list of (row, expected bytes, actual bytes, ok),
    total bytes, table total).  Row 24 of the mesh network is compared
    with bias included, matching the table's 408 B; all other rows are
    weights-only.
    """
    expected = GCNN_TABLE_BYTES if model.kind == "gcnn" else PCNN_TABLE_BYTES
    table_total = GCNN_TABLE_TOTAL if model.kind == "gcnn" else PCNN_TABLE_TOTAL
    rows = []
    total = 0
    for rep in model.parameter_report():
        actual = rep.weight_bytes
        if model.kind == "gcnn" and rep.row == 24:
            actual = rep.total_bytes
        total += actual
        if rep.row in expected:
            rows.append((rep.row, expected[rep.row], actual, expected[rep.row] == actual))
    return rows, total, table_total


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"GCNN"
_VERSION = 1
_PARAM_ORDER = {
    "mesh_conv": ("weights", "bias"),
    "conv2d": ("weights", "bias"),
    "dense": ("weights", "bias"),
    "batch_norm": ("scale", "shift", "running_mean", "running_var"),
}


def _spec_block(model: Model) -> dict:
    return {
        "kind": model.kind,
        "meta": model.meta,
        "rows": [row.descriptor() for row in model.rows],
        "frozen": [bool(row.frozen) for row in model.rows],
        "index_map_hashes": [
            row.index_map.content_hash() for row in model.rows if isinstance(row, MeshConv)
        ],
    }


def save_checkpoint(model: Model, path) -> None:
    """Write the model to the binary checkpoint container.

    Layout, all little-endian: magic "GCNN", u32 version, u32 JSON spec
    length, the UTF-8 JSON spec, then per row (table order) one blob per
    parameter array (u64 value count + raw float32 values), and a trailing
    u32 CRC32 over everything after the version field.  Geometry is not
    stored; the spec block carries index-map content hashes and the load
    path rebuilds and verifies them.
    """
    spec = json.dumps(_spec_block(model)).encode("utf-8")
    payload = bytearray()
    payload += struct.pack("<I", len(spec))
    payload += spec
    for row in model.rows:
        order = _PARAM_ORDER.get(row.kind, ())
        p = row.params()
        for name in order:
            arr = np.ascontiguousarray(p[name], dtype="<f4")
            payload += struct.pack("<Q", arr.size)
            payload += arr.tobytes()
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def _rebuild_from_spec(spec: dict, hierarchy: IcosphereHierarchy | None) -> Model:
    meta = spec["meta"]
    if spec["kind"] == "gcnn":
        if hierarchy is None:
            hierarchy = build_hierarchy(meta["max_level"])
        model = build_gcnn(
            hierarchy,
            channels=meta["in_channels"],
            patch=_patch_from_json(meta["patch"]),
            filters_per_conv=meta["filters"],
            hidden=meta["hidden"],
            classes=meta["classes"],
            seed=meta["seed"],
            start_level=meta["start_level"],
            end_level=meta["end_level"],
        )
        hashes = [
            row.index_map.content_hash() for row in model.rows if isinstance(row, MeshConv)
        ]
        if hashes != spec["index_map_hashes"]:
            raise FormatError(
                "checkpoint geometry mismatch: rebuilt sampler index maps do not "
                "hash to the stored values"
            )
        model.meta = dict(meta)  # keep caller-added keys (e.g. projection setup)
        return model
    builder = build_mini_pcnn if meta.get("mini") else build_pcnn
    model = builder(
        width=meta["width"],
        height=meta["height"],
        channels=meta["in_channels"],
        classes=meta["classes"],
        seed=meta["seed"],
        filters=meta["filters"],
        hidden=meta["hidden"],
    )
    model.meta = dict(meta)
    return model


def load_checkpoint(path, hierarchy: IcosphereHierarchy | None = None) -> Model:
    """Read a checkpoint; raises FormatError (with the failing offset) on
    corruption and never returns a partial model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise FormatError(f"checkpoint truncated: {len(blob)} bytes, header needs 12")
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at offset 0, expected {_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    payload = blob[8:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise FormatError(f"CRC mismatch over payload bytes 8..{len(blob) - 4}")

    offset = 0

    def need(n: int, what: str):
        if offset + n > len(payload):
            raise FormatError(
                f"checkpoint truncated at offset {8 + offset}: {what} needs {n} bytes"
            )

    need(4, "spec length")
    (spec_len,) = struct.unpack_from("<I", payload, offset)
    offset += 4
    need(spec_len, "spec block")
    try:
        spec = json.loads(payload[offset : offset + spec_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable spec block at offset {8 + offset}: {exc}") from exc
    offset += spec_len

    model = _rebuild_from_spec(spec, hierarchy)
    for row, frozen in zip(model.rows, spec["frozen"]):
        row.frozen = frozen
    for row in model.rows:
        order = _PARAM_ORDER.get(row.kind, ())
        if not order:
            continue
        loaded = {}
        p = row.params()
        for name in order:
            need(8, f"{row.kind}.{name} count")
            (count,) = struct.unpack_from("<Q", payload, offset)
            offset += 8
            if count != p[name].size:
                raise FormatError(
                    f"{row.kind}.{name} stores {count} values, model expects {p[name].size}"
                )
            need(count * 4, f"{row.kind}.{name} values")
            values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            offset += count * 4
            loaded[name] = values.astype(np.float64).reshape(p[name].shape)
        if isinstance(row, BatchNorm):
            row.load(loaded)
        else:
            for name in order:
                p[name][...] = loaded[name]
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes after parameters")
    return model

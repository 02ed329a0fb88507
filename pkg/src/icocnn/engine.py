"""Numerical layer kernels: forward and backward passes.

Every kernel is a pure function over float64 arrays (float32 appears only
at serialization boundaries).  Backward passes are exact transposes of
their forward linearizations; scatter-style accumulations go through
``np.bincount``, which sums in a fixed order, so single-threaded runs are
bit-reproducible.

Mesh tensors are laid out (batch, node, channel); image tensors
(batch, height, width, channel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .icosphere import PoolingGroups
from .sampler import SamplerIndexMap


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeError(message)


# ---------------------------------------------------------------------------
# mesh convolution


def mesh_conv(x: np.ndarray, index_map: SamplerIndexMap, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """out[b, n, f] = sum_{p, c} x[b, idx[n, p], c] * w[p, c, f] + b[f]."""
    idx = index_map.indices
    _require(x.ndim == 3, f"mesh input must be (batch, node, channel), got {x.shape}")
    _require(
        x.shape[1] == idx.shape[0],
        f"input has {x.shape[1]} nodes but index map covers {idx.shape[0]}",
    )
    _require(
        w.shape == (idx.shape[1], x.shape[2], b.shape[0]),
        f"weights {w.shape} do not match (points={idx.shape[1]}, "
        f"in={x.shape[2]}, out={b.shape[0]})",
    )
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in mesh convolution input")
    batch, n_nodes, c_in = x.shape
    p = idx.shape[1]
    gathered = x[:, idx, :].reshape(batch * n_nodes, p * c_in)
    out = gathered @ w.reshape(p * c_in, -1) + b
    return out.reshape(batch, n_nodes, -1)


def mesh_conv_backward(
    x: np.ndarray, index_map: SamplerIndexMap, w: np.ndarray, grad_out: np.ndarray
):
    """Gradients of mesh_conv w.r.t. input, weights, and bias."""
    idx = index_map.indices
    batch, n_nodes, c_in = x.shape
    p, _, c_out = w.shape
    gathered = x[:, idx, :].reshape(batch * n_nodes, p * c_in)
    grad_flat = grad_out.reshape(batch * n_nodes, c_out)
    grad_w = (gathered.T @ grad_flat).reshape(p, c_in, c_out)
    grad_b = grad_out.sum(axis=(0, 1))
    # scatter w . grad_out back through the index map; a node accumulates
    # one term for every (n, p) slot that sampled it
    t = grad_flat @ w.reshape(p * c_in, c_out).T  # (B*N, P*C)
    flat = (idx.reshape(-1, 1) * c_in + np.arange(c_in)).reshape(-1)  # (N*P*C,)
    offsets = np.arange(batch, dtype=np.int64)[:, None] * (n_nodes * c_in)
    ids = (offsets + flat).ravel()
    grad_x = np.bincount(ids, weights=t.reshape(batch, -1).ravel(), minlength=batch * n_nodes * c_in)
    return grad_x.reshape(batch, n_nodes, c_in), grad_w, grad_b


# ---------------------------------------------------------------------------
# mesh mean pooling


def mesh_mean_pool(x: np.ndarray, groups: PoolingGroups) -> np.ndarray:
    """Average each pooling group onto its parent node."""
    _require(x.ndim == 3, f"mesh input must be (batch, node, channel), got {x.shape}")
    gathered = x[:, groups.member_index, :]  # (B, Nc, 7, C)
    return np.einsum("bkgc,kg->bkc", gathered, groups.member_weight, optimize=True)


def mesh_mean_pool_backward(
    grad_out: np.ndarray, groups: PoolingGroups, n_fine: int
) -> np.ndarray:
    """Distribute parent gradients equally over group members (exact
    transpose of the forward averaging; midpoint nodes accumulate from
    their two parents)."""
    batch, n_coarse, c = grad_out.shape
    t = grad_out[:, :, None, :] * groups.member_weight[None, :, :, None]  # (B,Nc,7,C)
    flat = (groups.member_index.reshape(-1, 1) * c + np.arange(c)).reshape(-1)
    offsets = np.arange(batch, dtype=np.int64)[:, None] * (n_fine * c)
    ids = (offsets + flat).ravel()
    grad_x = np.bincount(ids, weights=t.reshape(batch, -1).ravel(), minlength=batch * n_fine * c)
    return grad_x.reshape(batch, n_fine, c)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one feature axis."""

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.9):
        return cls(
            scale=np.ones(channels),
            shift=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            epsilon=epsilon,
            momentum=momentum,
        )


def batch_norm_forward(
    x: np.ndarray, state: BatchNormState, train: bool, update_running: bool = True
):
    """Normalize per feature (last axis) over all other axes.

    Train mode uses biased batch statistics and, unless ``update_running``
    is False, folds them into the running statistics with the state's
    momentum.  Eval mode normalizes with the running statistics.
    Returns (output, cache) where the cache feeds the backward pass.
    """
    c = x.shape[-1]
    _require(
        state.scale.shape == (c,),
        f"batch norm has {state.scale.shape[0]} features, input has {c}",
    )
    axes = tuple(range(x.ndim - 1))
    if train:
        if x.shape[0] < 2:
            raise ConfigError(
                f"batch normalization needs at least 2 samples in train mode, got {x.shape[0]}"
            )
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)  # biased, matching the normalization below
        if update_running:
            m = state.momentum
            state.running_mean = m * state.running_mean + (1.0 - m) * mean
            state.running_var = m * state.running_var + (1.0 - m) * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean) * inv_std
    out = state.scale * x_hat + state.shift
    count = int(np.prod([x.shape[a] for a in axes]))
    cache = (x_hat, inv_std, state.scale, count, train)
    return out, cache


def batch_norm_backward(cache, grad_out: np.ndarray):
    """Gradients w.r.t. input, scale, and shift."""
    x_hat, inv_std, scale, count, train = cache
    axes = tuple(range(grad_out.ndim - 1))
    grad_shift = grad_out.sum(axis=axes)
    grad_scale = (grad_out * x_hat).sum(axis=axes)
    if not train:
        # running statistics are constants in eval mode
        return grad_out * (scale * inv_std), grad_scale, grad_shift
    grad_x = (scale * inv_std / count) * (
        count * grad_out - grad_shift - x_hat * grad_scale
    )
    return grad_x, grad_scale, grad_shift


# ---------------------------------------------------------------------------
# elementwise / dense / loss


def relu(x: np.ndarray):
    """max(0, x); returns (output, mask) with subgradient 0 at 0."""
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(mask: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(mask, grad_out, 0.0)


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map on (batch, features) input."""
    _require(x.ndim == 2, f"dense input must be (batch, features), got {x.shape}")
    _require(
        w.shape[0] == x.shape[1] and w.shape[1] == b.shape[0],
        f"dense weights {w.shape} do not match input {x.shape} / bias {b.shape}",
    )
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ w.T
    return grad_x, grad_w, grad_b


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    _require(logits.ndim == 2, f"logits must be (batch, classes), got {logits.shape}")
    labels = np.asarray(labels)
    batch, k = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise IndexError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(batch), labels]))
    grad = softmax(logits)
    grad[np.arange(batch), labels] -= 1.0
    return loss, grad / batch


# ---------------------------------------------------------------------------
# 2-D image kernels (projection baseline)


def _conv2d_geometry(h: int, w: int, k: int, stride: int, pad: int):
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ConfigError(
            f"image {h}x{w} too small for kernel {k}, stride {stride}, pad {pad}"
        )
    return h_out, w_out


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]  # (B, Ho, Wo, C, k, k)


def image_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation on (batch, height, width, channel) input with a
    (k, k, C_in, C_out) kernel."""
    _require(x.ndim == 4, f"image input must be (B, H, W, C), got {x.shape}")
    k = w.shape[0]
    _require(
        w.shape[:3] == (k, k, x.shape[3]) and w.shape[3] == b.shape[0],
        f"kernel {w.shape} does not match input channels {x.shape[3]} / bias {b.shape}",
    )
    _conv2d_geometry(x.shape[1], x.shape[2], k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = _windows(xp, k, stride)
    return np.einsum("bhwckl,klcf->bhwf", win, w, optimize=True) + b


def image_conv2d_backward(
    x: np.ndarray, w: np.ndarray, stride: int, pad: int, grad_out: np.ndarray
):
    k = w.shape[0]
    batch, h, width, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = _windows(xp, k, stride)
    grad_w = np.einsum("bhwckl,bhwf->klcf", win, grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(0, 1, 2))

    t = np.einsum("bhwf,klcf->bhwklc", grad_out, w, optimize=True)
    h_out, w_out = grad_out.shape[1:3]
    hp, wp = xp.shape[1:3]
    rows = (np.arange(h_out) * stride)[:, None] + np.arange(k)  # (Ho, k)
    cols = (np.arange(w_out) * stride)[:, None] + np.arange(k)  # (Wo, k)
    cell = rows[:, None, :, None] * wp + cols[None, :, None, :]  # (Ho, Wo, k, k)
    ids = (
        np.arange(batch, dtype=np.int64)[:, None, None, None, None, None] * (hp * wp * c)
        + cell[None, ..., None] * c
        + np.arange(c)
    )
    grad_xp = np.bincount(ids.ravel(), weights=t.ravel(), minlength=batch * hp * wp * c)
    grad_xp = grad_xp.reshape(batch, hp, wp, c)
    if pad:
        return grad_xp[:, pad:-pad, pad:-pad, :], grad_w, grad_b
    return grad_xp, grad_w, grad_b


def image_mean_pool2d(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Mean pooling over k x k windows."""
    _require(x.ndim == 4, f"image input must be (B, H, W, C), got {x.shape}")
    _conv2d_geometry(x.shape[1], x.shape[2], k, stride, 0)
    return _windows(x, k, stride).mean(axis=(-2, -1))


def image_mean_pool2d_backward(x_shape, k: int, stride: int, grad_out: np.ndarray) -> np.ndarray:
    batch, h, w, c = x_shape
    h_out, w_out = grad_out.shape[1:3]
    t = np.broadcast_to(
        (grad_out / (k * k))[:, :, :, None, None, :], (batch, h_out, w_out, k, k, c)
    )
    rows = (np.arange(h_out) * stride)[:, None] + np.arange(k)
    cols = (np.arange(w_out) * stride)[:, None] + np.arange(k)
    cell = rows[:, None, :, None] * w + cols[None, :, None, :]
    ids = (
        np.arange(batch, dtype=np.int64)[:, None, None, None, None, None] * (h * w * c)
        + cell[None, ..., None] * c
        + np.arange(c)
    )
    grad_x = np.bincount(ids.ravel(), weights=np.ascontiguousarray(t).ravel(), minlength=batch * h * w * c)
    return grad_x.reshape(batch, h, w, c)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], learning_rate: float) -> None:
    """In-place p <- p - lr * g.  Raises NumericError on non-finite gradients."""
    for p, g in zip(params, grads):
        _require(p.shape == g.shape, f"parameter {p.shape} vs gradient {g.shape}")
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient in SGD update")
        p -= learning_rate * g

"""Differentiable operations on :class:`~paam.tensor.Tensor`.

Every function records a local gradient closure on the tape. Shapes follow the
batched convention ``N x C x H x W`` for images; ``conv2d`` and
``pointwise_mul_broadcast`` also accept a single unbatched ``C x H x W`` map.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return make_result(out, (a, b), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = max(a.size, 1)

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.data.dtype),)

    return make_result(np.asarray(a.data.mean() if a.size else 0.0), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return make_result(out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def backward(g):
        return (g.T,)

    return make_result(a.data.T, (a,), backward)


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1) if a.ndim > 1 else (a.shape[0],))


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return make_result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out_features, in_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, parents, backward)


def reduce_mean_rows(m: Tensor) -> Tensor:
    if m.ndim != 2:
        raise ShapeError(f"reduce_mean_rows expects a 2-D tensor, got rank {m.ndim}")
    rows, cols = m.shape
    out = m.data.mean(axis=1) if cols else np.zeros(rows, dtype=m.data.dtype)

    def backward(g):
        return (np.repeat(g[:, None] / max(cols, 1), cols, axis=1),)

    return make_result(out, (m,), backward)


# ----------------------------------------------------------------------------
# convolution and feature-map ops
# ----------------------------------------------------------------------------


def conv2d(x: Tensor, filters: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct convolution (cross-correlation) via patch extraction.

    ``x`` is ``N x C x H x W`` (or unbatched ``C x H x W``); ``filters`` is
    ``F x C x K x K``. Zero-sized F or C are allowed.
    """
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or filters.ndim != 4:
        raise ShapeError(f"conv2d expects input (N,)C,H,W and filters F,C,K,K; got {x.shape}, {filters.shape}")
    n, c, h, w = xd.shape
    f, fc, k, k2 = filters.shape
    if fc != c or k != k2:
        raise ShapeError(f"conv2d channel/kernel mismatch: input {x.shape}, filters {filters.shape}")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = _kernels.out_size(h, k, stride, padding)
    wo = _kernels.out_size(w, k, stride, padding)

    cols = _kernels.im2col(xd, k, stride, padding)  # (N*Ho*Wo, C*K*K)
    wmat = filters.data.reshape(f, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def backward(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dw = (g2.T @ cols).reshape(filters.shape) if filters.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = _kernels.col2im(g2 @ wmat, (n, c, h, w), k, stride, padding)
            if unbatched:
                dx = dx[0]
        return dx, dw

    return make_result(out, (x, filters), backward)


def pointwise_mul_broadcast(scores: Tensor, maps: Tensor) -> Tensor:
    """Scale channel ``f`` of ``maps`` by ``scores[f]``.

    ``maps`` is ``F x H x W`` or batched ``N x F x H x W``.
    """
    scores, maps = as_tensor(scores), as_tensor(maps)
    axis = maps.ndim - 3
    if scores.ndim != 1 or maps.ndim not in (3, 4) or scores.shape[0] != maps.shape[axis]:
        raise ShapeError(f"score length {scores.shape} does not match feature maps {maps.shape}")
    s = scores.data.reshape((-1, 1, 1) if axis == 0 else (1, -1, 1, 1))
    out = s * maps.data

    def backward(g):
        red = (1, 2) if axis == 0 else (0, 2, 3)
        return (g * maps.data).sum(axis=red), g * s

    return make_result(out, (scores, maps), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    # np.maximum keeps NaN visible, so divergence is not masked by the nonlinearity.
    return make_result(np.maximum(x.data, 0.0).astype(x.data.dtype, copy=False), (x,), backward)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalization with fixed (non-batch) statistics.

    ``y = gamma * (x - mean) / sqrt(var + eps) + beta`` where ``mean`` and
    ``var`` are plain arrays, so the output of one sample never depends on the
    rest of the batch.
    """
    inv = 1.0 / np.sqrt(var + eps)
    shape = (1, -1, 1, 1)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def backward(g):
        return (
            g * (gamma.data * inv).reshape(shape),
            (g * xhat).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return make_result(out, (x, gamma, beta), backward)


def global_average_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return make_result(x.data.mean(axis=(2, 3)) if c else np.zeros((n, 0), x.data.dtype), (x,), backward)


def shortcut_pad(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free residual shortcut: spatial subsampling then zero channel padding."""
    n, c, h, w = x.shape
    if out_channels < c:
        raise ShapeError(f"shortcut cannot shrink channels {c} -> {out_channels}")
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.data.dtype)
    out[:, :c] = sub

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, :, ::stride, ::stride] = g[:, :c]
        return (dx,)

    return make_result(out, (x,), backward)


# ----------------------------------------------------------------------------
# losses and reductions
# ----------------------------------------------------------------------------


def l1_norm(v: Tensor) -> Tensor:
    v = as_tensor(v)
    sign = np.sign(v.data)

    def backward(g):
        return (g * sign,)

    return make_result(np.asarray(np.abs(v.data).sum()), (v,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy. ``logits`` is ``N x K`` (or a single ``K`` row)."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} out of range for {k} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        d = p * (g / n)
        return (d[0] if single else d,)

    return make_result(np.asarray(loss), (logits,), backward)


# ----------------------------------------------------------------------------
# score activations
# ----------------------------------------------------------------------------


def leaky_expo(x: Tensor, a: float = 0.01) -> Tensor:
    """``exp(x)`` for ``x < 0``, ``1 + a*x`` for ``x >= 0``."""
    neg = x.data < 0
    ex = np.exp(np.minimum(x.data, 0.0))
    out = np.where(neg, ex, 1.0 + a * x.data)

    def backward(g):
        return (g * np.where(neg, ex, a),)

    return make_result(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def leaky_2sigmoid(x: Tensor, a: float = 0.01) -> Tensor:
    """``2*sigmoid(x)`` for ``x < 0``, ``1 + a*x`` for ``x >= 0``."""
    neg = x.data < 0
    s = _sigmoid(x.data)
    out = np.where(neg, 2.0 * s, 1.0 + a * x.data)

    def backward(g):
        return (g * np.where(neg, 2.0 * s * (1.0 - s), a),)

    return make_result(out, (x,), backward)


def sigmoid(x: Tensor, temperature: float = 1.0) -> Tensor:
    s = _sigmoid(temperature * x.data)

    def backward(g):
        return (g * temperature * s * (1.0 - s),)

    return make_result(s, (x,), backward)

"""Neural-network operations built on :mod:`shapecpc.tensor`.

Convolution, pooling, softmax and log-sum-exp carry fused backward rules;
attention, layer normalization and L2 normalization are compositions of
primitives and inherit their gradients.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, _wrap, matmul, swapaxes, take

__all__ = [
    "attention",
    "conv2d",
    "embedding",
    "l2_normalize",
    "layer_norm",
    "linear",
    "log_softmax",
    "logsumexp",
    "mean_pool_global",
    "pad2d",
    "softmax",
]


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C×H×W or N×C×H×W) with O×C×kh×kw kernels."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    squeeze = x.ndim == 3
    data = x.data[None] if squeeze else x.data
    if data.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects C×H×W or N×C×H×W input, got {x.shape}")
    n, c, h, w = data.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"kernel expects {kc} input channels, input has {c}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    padded = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else data
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: N, Ho, Wo, C*kh*kw
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    flat_k = kernels.data.reshape(o, -1)
    out = np.matmul(cols, flat_k.T).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g_cols = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        g_kernel = (g_cols.T @ cols.reshape(-1, c * kh * kw)).reshape(kernels.shape)
        d_cols = (g_cols @ flat_k).reshape(n, ho, wo, c, kh, kw)
        d_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                d_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        d_x = d_padded[:, :, padding:padding + h, padding:padding + w]
        if squeeze:
            d_x = d_x[0]
        return d_x, g_kernel

    return Tensor._make(out, (x, kernels), backward, "conv2d")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out = np.pad(x.data, widths)
    h, w = x.shape[-2:]

    def backward(g):
        return (g[..., top:top + h, left:left + w],)

    return Tensor._make(out, (x,), backward, "pad2d")


def mean_pool_global(x: Tensor) -> Tensor:
    """Average each channel over the two trailing spatial axes."""
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise DimensionError(f"mean_pool_global expects (..., C, H, W), got {x.shape}")
    count = x.shape[-1] * x.shape[-2]
    # float64 accumulation keeps constant inputs exact
    out = x.data.mean(axis=(-2, -1), dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        return (np.broadcast_to((g / count)[..., None, None], x.shape).copy(),)

    return Tensor._make(out, (x,), backward, "mean_pool_global")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (logits,), backward, "softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    peak = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - peak)
    total = e.sum(axis=axis, keepdims=True)
    out = (np.log(total) + peak).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / total),)

    return Tensor._make(out, (x,), backward, "logsumexp")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    lse = logsumexp(logits, axis=axis)
    return logits - lse.reshape(np.expand_dims(lse.data, axis).shape)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gain + bias


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors to unit length; the zero vector maps to zero."""
    sq = (x * x).sum(axis=axis, keepdims=True)
    return x * (sq + eps * eps) ** -0.5


def embedding(table: Tensor, index) -> Tensor:
    return take(table, np.asarray(index, dtype=np.int64))


def attention(queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    queries, keys, values = _wrap(queries), _wrap(keys), _wrap(values)
    d = queries.shape[-1]
    if keys.shape[-1] != d:
        raise DimensionError(f"query width {d} differs from key width {keys.shape[-1]}")
    if keys.shape[-2] != values.shape[-2]:
        raise DimensionError(f"{keys.shape[-2]} keys but {values.shape[-2]} values")
    scores = matmul(queries, swapaxes(keys, -1, -2)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), values)

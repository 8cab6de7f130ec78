"""
    batseg.nn
    ~~~~~~~~~

    Differentiable building blocks written directly in numpy.

    Each forward function has a ``*_backward`` companion taking the upstream
    gradient and whatever the forward pass needs to remember, and returning
    the gradients with respect to its inputs and parameters.

    Feature maps are channels-last, ``(N, H, W, C)``; sequences are
    ``(..., L, C)``.
"""

from __future__ import annotations

import math
from functools import cache
from typing import Iterator, NamedTuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, ndtr

Array = NDArray[np.float64]

_INV_SQRT_2PI = 1 / math.sqrt(2 * math.pi)


def sigmoid(x: Array) -> Array:
    return expit(x)


def gelu(x: Array) -> Array:
    """Exact GELU, x·Φ(x)."""
    return x * ndtr(x)


def gelu_grad(x: Array) -> Array:
    return ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def softmax(x: Array, axis: int = -1) -> Array:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: Array, y: Array, axis: int = -1) -> Array:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def linear(x: Array, w: Array, b: Array) -> Array:
    return x @ w + b


def linear_backward(dy: Array, x: Array, w: Array) -> tuple[Array, Array, Array]:
    """Returns (dx, dw, db)."""
    dx = dy @ w.T
    flat_x = x.reshape(-1, x.shape[-1])
    flat_dy = dy.reshape(-1, dy.shape[-1])
    return dx, flat_x.T @ flat_dy, flat_dy.sum(axis=0)


class NormCache(NamedTuple):
    xhat: Array
    rstd: Array


def layer_norm(
    x: Array, gamma: Array, beta: Array, eps: float = 1e-5
) -> tuple[Array, NormCache]:
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    rstd = 1 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    return xhat * gamma + beta, NormCache(xhat, rstd)


def layer_norm_backward(
    dy: Array, cache: NormCache, gamma: Array
) -> tuple[Array, Array, Array]:
    """Returns (dx, dgamma, dbeta)."""
    xhat, rstd = cache
    dxhat = dy * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def split_heads(x: Array, heads: int) -> Array:
    """(..., L, C) -> (..., heads, L, C/heads)"""
    *lead, length, channels = x.shape
    return x.reshape(*lead, length, heads, channels // heads).swapaxes(-2, -3)


def merge_heads(x: Array) -> Array:
    """(..., heads, L, d) -> (..., L, heads·d)"""
    *lead, heads, length, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * d)


class ConvGeometry(NamedTuple):
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def output_size(self, size: int, kernel: int) -> int:
        span = self.dilation * (kernel - 1) + 1
        return (size + 2 * self.padding - span) // self.stride + 1

    def taps(
        self, height: int, width: int, kernel: tuple[int, int]
    ) -> Iterator[tuple[int, int, slice, slice]]:
        """Kernel tap (i, j) and the slices of the padded input it reads."""
        ho = self.output_size(height, kernel[0])
        wo = self.output_size(width, kernel[1])
        s, d = self.stride, self.dilation
        for i in range(kernel[0]):
            for j in range(kernel[1]):
                yield (
                    i,
                    j,
                    slice(i * d, i * d + s * (ho - 1) + 1, s),
                    slice(j * d, j * d + s * (wo - 1) + 1, s),
                )


def _pad(x: Array, padding: int) -> Array:
    if not padding:
        return x
    p = padding
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x: Array, w: Array, b: Array, geometry: ConvGeometry) -> Array:
    """Zero-padded 2D convolution (cross-correlation).

    x: (N, H, W, Cin), w: (kh, kw, Cin, Cout), b: (Cout,)
    """
    n, h, wd, _ = x.shape
    kh, kw, _, cout = w.shape
    xp = _pad(x, geometry.padding)
    out = np.zeros(
        (n, geometry.output_size(h, kh), geometry.output_size(wd, kw), cout)
    )
    for i, j, rows, cols in geometry.taps(h, wd, (kh, kw)):
        out += xp[:, rows, cols, :] @ w[i, j]
    return out + b


def conv2d_backward(
    dy: Array, x: Array, w: Array, geometry: ConvGeometry
) -> tuple[Array, Array, Array]:
    """Returns (dx, dw, db)."""
    n, h, wd, _ = x.shape
    kh, kw = w.shape[:2]
    p = geometry.padding
    xp = _pad(x, p)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i, j, rows, cols in geometry.taps(h, wd, (kh, kw)):
        dw[i, j] = np.tensordot(xp[:, rows, cols, :], dy, axes=([0, 1, 2], [0, 1, 2]))
        dxp[:, rows, cols, :] += dy @ w[i, j].T
    return dxp[:, p : p + h, p : p + wd, :], dw, dy.sum(axis=(0, 1, 2))


@cache
def bilinear_matrix(size: int, scale: int) -> Array:
    """(size·scale, size) interpolation matrix, half-pixel centres,
    edge-clamped."""
    out = np.zeros((size * scale, size))
    src = (np.arange(size * scale) + 0.5) / scale - 0.5
    src = np.clip(src, 0, size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = src - lo
    rows = np.arange(size * scale)
    np.add.at(out, (rows, lo), 1 - frac)
    np.add.at(out, (rows, hi), frac)
    out.setflags(write=False)
    return out


def upsample(x: Array, scale: int) -> Array:
    """Bilinear upsampling of (N, h, w) maps to (N, h·scale, w·scale)."""
    rows = bilinear_matrix(x.shape[-2], scale)
    cols = bilinear_matrix(x.shape[-1], scale)
    return rows @ x @ cols.T


def upsample_backward(dy: Array, scale: int) -> Array:
    rows = bilinear_matrix(dy.shape[-2] // scale, scale)
    cols = bilinear_matrix(dy.shape[-1] // scale, scale)
    return rows.T @ dy @ cols

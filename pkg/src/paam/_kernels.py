"""Hot convolution kernels: patch extraction (im2col) and its adjoint (col2im).

Both kernels exist twice: a numba ``@njit`` version and a pure-numpy version.
The numba path is used when numba imports and ``PAAM_DISABLE_NUMBA`` is unset
(or ``0``). Set ``PAAM_DISABLE_NUMBA=1`` before importing :mod:`paam` to force
the numpy path. The two paths agree exactly for im2col and up to summation
order for col2im.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("PAAM_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by PAAM_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


# ----------------------------------------------------------------------------
# numpy path
# ----------------------------------------------------------------------------


def im2col_numpy(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*k*k), rows ordered (n, i, j), cols (c, ki, kj)."""
    n, c, h, w = x.shape
    ho = out_size(h, k, stride, padding)
    wo = out_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, k, k) -> (N, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im_numpy(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = shape
    ho = out_size(h, k, stride, padding)
    wo = out_size(w, k, stride, padding)
    cols6 = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = cols6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += patch
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


# ----------------------------------------------------------------------------
# numba path
# ----------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, k, stride, padding, ho, wo):
        n, c, h, w = x.shape
        cols = np.zeros((n * ho * wo, c * k * k), dtype=x.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    for ch in range(c):
                        for ki in range(k):
                            y = i * stride + ki - padding
                            if y < 0 or y >= h:
                                continue
                            for kj in range(k):
                                xx = j * stride + kj - padding
                                if xx < 0 or xx >= w:
                                    continue
                                cols[row, (ch * k + ki) * k + kj] = x[b, ch, y, xx]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, n, c, h, w, k, stride, padding, ho, wo):
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    for ch in range(c):
                        for ki in range(k):
                            y = i * stride + ki - padding
                            if y < 0 or y >= h:
                                continue
                            for kj in range(k):
                                xx = j * stride + kj - padding
                                if xx < 0 or xx >= w:
                                    continue
                                out[b, ch, y, xx] += cols[row, (ch * k + ki) * k + kj]
        return out

    def im2col_numba(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
        _, _, h, w = x.shape
        return _im2col_nb(
            np.ascontiguousarray(x), k, stride, padding,
            out_size(h, k, stride, padding), out_size(w, k, stride, padding),
        )

    def col2im_numba(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
        n, c, h, w = shape
        return _col2im_nb(
            np.ascontiguousarray(cols), n, c, h, w, k, stride, padding,
            out_size(h, k, stride, padding), out_size(w, k, stride, padding),
        )

    im2col = im2col_numba
    col2im = col2im_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"

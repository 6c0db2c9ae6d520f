"""Separable resampling matrices shared by the flow and model code."""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear (triangle-filter) resampling matrix of shape [n_out, n_in].

    Pixel centres are aligned (half-pixel convention).  When shrinking, the
    triangle support widens by the scale factor so the result is area-aware;
    when enlarging, this is ordinary bilinear interpolation with edge clamping.
    Rows sum to one, so constants are preserved.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be positive")
    scale = n_in / n_out
    support = max(scale, 1.0)
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        c = (i + 0.5) * scale - 0.5
        taps = np.arange(int(np.floor(c - support)), int(np.ceil(c + support)) + 1)
        wts = np.maximum(0.0, 1.0 - np.abs(taps - c) / support)
        # clamp-to-edge: out-of-range taps fold onto the border sample
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), wts)
        mat[i] /= mat[i].sum()
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=256)
def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix for adaptive pooling: bin i covers [floor(i*n/K), ceil((i+1)*n/K))."""
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        mat[i, lo:hi] = 1.0 / (hi - lo)
    mat.setflags(write=False)
    return mat


def resize2d(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize the leading two axes of ``img`` with :func:`resize_matrix`."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    rows = resize_matrix(h, height)
    cols = resize_matrix(w, width)
    if img.ndim == 2:
        return rows @ img @ cols.T
    return np.einsum("kh,hw...,lw->kl...", rows, img, cols)

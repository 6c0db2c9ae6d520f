"""Parameter-free spatial attention built from the classifier's own weights."""

from __future__ import annotations

import numpy as np

from ..engine import Tensor, adaptive_avgpool2d, broadcast_mul, relu, resize_bilinear
from ..engine.tensor import make_result

FLAT_MAP_THRESHOLD = 1e-8


def class_weight_map(features: Tensor, classifier_weight: np.ndarray, pool_size: int,
                     classes: np.ndarray | None = None) -> Tensor:
    """Pooled CAM response ``sum_j W[j] * d(X_j)`` on the K x K grid, shape [N,1,K,K].

    ``classifier_weight`` is [C, K*K*M] and is used as a constant.  With
    ``classes=None`` the per-class weight tensors are summed over all classes;
    otherwise ``classes[n]`` selects the class used for sample ``n``.
    """
    n, m, _, _ = features.shape
    k = pool_size
    cw = np.asarray(classifier_weight)
    if cw.ndim != 2 or cw.shape[1] != k * k * m:
        raise ValueError(f"classifier weight {cw.shape} cannot be reshaped to [C, {m}, {k}, {k}]")
    per_class = cw.reshape(cw.shape[0], m, k, k).astype(features.dtype, copy=False)
    if classes is None:
        weights = per_class.sum(axis=0)[None]
    else:
        weights = per_class[np.asarray(classes, dtype=np.int64)]
    pooled = adaptive_avgpool2d(features, k)
    return broadcast_mul(pooled, Tensor(weights)).sum(axis=1, keepdims=True)


def normalize_by_max(x: Tensor) -> Tensor:
    """Divide each sample's map by its spatial max; flat (<=1e-8) maps become all ones."""
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    arg = flat.argmax(axis=1)
    peak = flat[np.arange(n), arg]
    dead = peak <= FLAT_MAP_THRESHOLD
    safe = np.where(dead, 1.0, peak).astype(x.dtype)
    out = flat / safe[:, None]
    out[dead] = 1.0

    def backward(g):
        gf = g.reshape(n, -1)
        gx = gf / safe[:, None]
        gx[np.arange(n), arg] -= (gf * flat).sum(axis=1) / (safe * safe)
        gx[dead] = 0.0
        return (gx.reshape(x.shape),)

    return make_result(out.reshape(x.shape), (x,), backward)


def attention_map(features: Tensor, classifier_weight: np.ndarray, pool_size: int,
                  out_size: tuple[int, int] | None = None) -> Tensor:
    """Soft spatial weights in [0, 1], shape [N,1,H,W].

    The pooled class-weighted response is rectified, scaled so its maximum is
    one, and bilinearly resized to ``out_size`` (default: the feature size).
    """
    raw = class_weight_map(features, classifier_weight, pool_size)
    m = normalize_by_max(relu(raw))
    h, w = out_size if out_size is not None else features.shape[2:]
    return resize_bilinear(m, h, w)


def apply_attention(x: Tensor, amap: Tensor) -> Tensor:
    if amap.ndim != 4 or amap.shape[1] != 1 or amap.shape[0] != x.shape[0] or amap.shape[2:] != x.shape[2:]:
        raise ValueError(f"attention map {amap.shape} does not match features {x.shape}")
    return broadcast_mul(x, amap)

"""Central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], t: Tensor, h: float, index=None, f0: float | None = None,
                   slope_jump: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the flat elements ``index`` of ``t`` (default all).

    Elements outside ``index`` are left at zero.  Given the unperturbed value
    ``f0``, the difference between the forward and backward one-sided slopes
    is written to ``slope_jump`` (flat, same size as ``t``).
    """
    flat = t.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in (range(flat.size) if index is None else index):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
        if f0 is not None and slope_jump is not None:
            slope_jump[i] = abs((fp - f0) - (f0 - fm)) / h
    return out.reshape(t.shape)


@dataclass
class GradCheckResult:
    error: float
    checked: int
    kinks: int


def grad_check_detailed(f: Callable, x: Tensor | Sequence[Tensor], h: float = 1e-5, floor: float = 1e-12,
                        max_coords: int | None = None, rng: np.random.Generator | None = None,
                        kink_tol: float | None = None) -> GradCheckResult:
    """Like :func:`grad_check`, also reporting how many coordinates were compared.

    With ``kink_tol`` a coordinate whose one-sided slopes differ by more than
    ``kink_tol`` times the tensor's gradient scale is treated as sitting on a
    non-differentiable point (a ReLU or max switching within ``+-h``).  It is
    left out of the error and counted in ``kinks``.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value() -> float:
        return float(f(x).data)

    f0 = value() if kink_tol is not None else None
    worst, checked, kinks = 0.0, 0, 0
    for t, a in zip(tensors, analytic):
        index = None
        if max_coords is not None and t.data.size > max_coords:
            index = (rng or np.random.default_rng(0)).choice(t.data.size, max_coords, replace=False)
        jump = np.zeros(t.data.size)
        n = numerical_grad(value, t, h, index, f0, jump)
        sel = np.arange(t.data.size) if index is None else np.asarray(index)
        scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
        diff = np.abs(a - n).reshape(-1)[sel]
        if kink_tol is not None:
            smooth = jump[sel] <= kink_tol * scale
            kinks += int((~smooth).sum())
            diff = diff[smooth]
        checked += diff.size
        if diff.size:
            worst = max(worst, float(np.max(diff)) / scale)
    return GradCheckResult(worst, checked, kinks)


def grad_check(f: Callable, x: Tensor | Sequence[Tensor], h: float = 1e-5, floor: float = 1e-12,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               kink_tol: float | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f(x)`` must return a scalar Tensor.  ``x`` may be one tensor or a list;
    every element of every tensor is perturbed in place.  For each tensor the
    error is ``max|a - n| / max(max|a|, max|n|, floor)``, i.e. the worst
    elementwise deviation relative to that tensor's gradient scale; the
    result is the worst over tensors.  Use float64 for tight tolerances.

    With ``max_coords`` only that many randomly chosen elements per tensor
    are perturbed (drawn from ``rng``); the scale still uses the full
    analytic gradient.  See :func:`grad_check_detailed` for ``kink_tol``.
    """
    return grad_check_detailed(f, x, h, floor, max_coords, rng, kink_tol).error

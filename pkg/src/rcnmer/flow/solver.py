"""Robust coarse-to-fine optical flow with a Lorentzian penalty.

The energy is ``sum rho(Ix*u + Iy*v + It) + lam * sum [rho(grad u) + rho(grad v)]``
with ``rho(z) = log(1 + z^2 / (2 sigma^2))``.  Each pyramid level runs a few
warps; within a warp the data term is linearized around the current flow and
the robust energy is minimized by iteratively reweighted least squares, each
reweighted system being relaxed with block-Jacobi sweeps.

Sign convention: ``apex(x + V(x)) ~= onset(x)``, so a pattern that moves
right between onset and apex has positive ``Vx``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .._resample import resize2d

MIN_FRAME_SIZE = 16
_MIN_LEVEL_SIZE = 8


class FlowError(ValueError):
    pass


@dataclass(frozen=True)
class FlowSolverConfig:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    outer_warps: int = 3
    irls_iters: int = 10
    lorentzian_sigma: float = 0.03
    smoothness_lambda: float = 0.1
    median_filter_radius: int = 2
    jacobi_sweeps: int = 30
    # None means "same sigma as the data term"
    smoothness_sigma: float | None = None

    def __post_init__(self):
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        for name in ("pyramid_levels", "outer_warps", "irls_iters", "jacobi_sweeps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.median_filter_radius < 0:
            raise ValueError("median_filter_radius must be >= 0")
        if self.lorentzian_sigma <= 0 or self.smoothness_lambda < 0:
            raise ValueError("sigma must be positive and lambda non-negative")

    @property
    def sigma_s(self) -> float:
        return self.lorentzian_sigma if self.smoothness_sigma is None else self.smoothness_sigma


@dataclass
class FlowField:
    vx: np.ndarray
    vy: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.vx.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.vx, self.vy])


@dataclass
class SolverTrace:
    """Linearized energies recorded after every IRLS iteration."""

    records: list[tuple[int, int, int, float]] = field(default_factory=list)

    def add(self, level: int, warp: int, it: int, energy: float) -> None:
        self.records.append((level, warp, it, energy))

    def finest_steps(self) -> list[tuple[float, float]]:
        """Consecutive (before, after) energy pairs within each warp of the finest level."""
        finest = min(r[0] for r in self.records)
        rows = [r for r in self.records if r[0] == finest]
        out = []
        for prev, cur in zip(rows, rows[1:]):
            if prev[1] == cur[1]:
                out.append((prev[3], cur[3]))
        return out


def lorentzian(z: np.ndarray, sigma: float) -> np.ndarray:
    return np.log1p(z * z / (2.0 * sigma * sigma))


def lorentzian_weight(z: np.ndarray, sigma: float) -> np.ndarray:
    """IRLS weight ``rho'(z) / z``."""
    return 2.0 / (2.0 * sigma * sigma + z * z)


def as_frame(img, name: str = "frame") -> np.ndarray:
    f = np.asarray(img, dtype=np.float64)
    if f.ndim != 2:
        raise FlowError(f"{name} must be a 2-D grayscale image, got shape {f.shape}")
    if min(f.shape) < MIN_FRAME_SIZE:
        raise FlowError(f"{name} is {f.shape}; frames must be at least {MIN_FRAME_SIZE} px per side")
    if not np.all(np.isfinite(f)) or f.min() < 0.0 or f.max() > 1.0:
        raise FlowError(f"{name} intensities must be finite and lie in [0, 1]")
    return f


def central_diff(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated borders; returns (d/dx, d/dy)."""
    p = np.pad(img, 1, mode="edge")
    dx = 0.5 * (p[1:-1, 2:] - p[1:-1, :-2])
    dy = 0.5 * (p[2:, 1:-1] - p[:-2, 1:-1])
    return dx, dy


def warp(img: np.ndarray, vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    """Sample ``img(x + vx, y + vy)`` bilinearly, clamping to the border."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy + vy, xx + vx], order=1, mode="nearest")


def _pyramid_shapes(shape: tuple[int, int], cfg: FlowSolverConfig) -> list[tuple[int, int]]:
    shapes = [shape]
    for _ in range(cfg.pyramid_levels - 1):
        h, w = shapes[-1]
        nh, nw = int(round(h * cfg.pyramid_scale)), int(round(w * cfg.pyramid_scale))
        if min(nh, nw) < _MIN_LEVEL_SIZE:
            break
        shapes.append((nh, nw))
    return shapes


def _edge_weights(u: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    # weights on horizontal edges (i, j)-(i, j+1) and vertical edges (i, j)-(i+1, j)
    return lorentzian_weight(np.diff(u, axis=1), sigma), lorentzian_weight(np.diff(u, axis=0), sigma)


def _neighbour_terms(u: np.ndarray, wh: np.ndarray, wv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (sum of edge weights, weighted sum of neighbour values)."""
    wsum = np.zeros_like(u)
    nsum = np.zeros_like(u)
    wsum[:, :-1] += wh
    wsum[:, 1:] += wh
    wsum[:-1, :] += wv
    wsum[1:, :] += wv
    nsum[:, :-1] += wh * u[:, 1:]
    nsum[:, 1:] += wh * u[:, :-1]
    nsum[:-1, :] += wv * u[1:, :]
    nsum[1:, :] += wv * u[:-1, :]
    return wsum, nsum


def linearized_energy(ix, iy, it, u0, v0, du, dv, cfg: FlowSolverConfig) -> float:
    u, v = u0 + du, v0 + dv
    data = lorentzian(ix * du + iy * dv + it, cfg.lorentzian_sigma).sum()
    s = cfg.sigma_s
    smooth = sum(lorentzian(np.diff(f, axis=a), s).sum() for f in (u, v) for a in (0, 1))
    return float(data + cfg.smoothness_lambda * smooth)


def _irls_increment(ix, iy, it, u0, v0, cfg: FlowSolverConfig, trace: SolverTrace | None, tag):
    """Robust increment (du, dv) for one linearization."""
    lam = cfg.smoothness_lambda
    sd, ss = cfg.lorentzian_sigma, cfg.sigma_s
    du = np.zeros_like(u0)
    dv = np.zeros_like(v0)
    for k in range(cfg.irls_iters):
        psi_d = lorentzian_weight(ix * du + iy * dv + it, sd)
        u, v = u0 + du, v0 + dv
        uh, uv = _edge_weights(u, ss)
        vh, vv = _edge_weights(v, ss)
        a11 = psi_d * ix * ix
        a12 = psi_d * ix * iy
        a22 = psi_d * iy * iy
        b1 = -psi_d * ix * it
        b2 = -psi_d * iy * it
        wu, _ = _neighbour_terms(u, uh, uv)
        wv, _ = _neighbour_terms(v, vh, vv)
        d11 = a11 + lam * wu
        d22 = a22 + lam * wv
        det = d11 * d22 - a12 * a12
        det = np.where(np.abs(det) < 1e-12, 1e-12, det)
        for _ in range(cfg.jacobi_sweeps):
            # smoothness acts on the full flow u0 + du; neighbours from the previous sweep
            _, nu = _neighbour_terms(u0 + du, uh, uv)
            _, nv = _neighbour_terms(v0 + dv, vh, vv)
            r1 = b1 + lam * (nu - wu * u0)
            r2 = b2 + lam * (nv - wv * v0)
            du, dv = (d22 * r1 - a12 * r2) / det, (d11 * r2 - a12 * r1) / det
        if trace is not None:
            trace.add(*tag, k, linearized_energy(ix, iy, it, u0, v0, du, dv, cfg))
    return du, dv


def estimate_flow(onset, apex, cfg: FlowSolverConfig | None = None, trace: SolverTrace | None = None) -> FlowField:
    """Dense flow from ``onset`` to ``apex`` (both [H, W] in [0, 1])."""
    cfg = cfg or FlowSolverConfig()
    f0 = as_frame(onset, "onset")
    f1 = as_frame(apex, "apex")
    if f0.shape != f1.shape:
        raise FlowError(f"frame sizes differ: {f0.shape} vs {f1.shape}")
    shapes = _pyramid_shapes(f0.shape, cfg)
    u = v = None
    for level in range(len(shapes) - 1, -1, -1):
        h, w = shapes[level]
        i0 = f0 if level == 0 else resize2d(f0, h, w)
        i1 = f1 if level == 0 else resize2d(f1, h, w)
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
        else:
            ph, pw = u.shape
            u = resize2d(u, h, w) * (w / pw)
            v = resize2d(v, h, w) * (h / ph)
        for wi in range(cfg.outer_warps):
            warped = warp(i1, u, v)
            ix, iy = central_diff(0.5 * (warped + i0))
            it = warped - i0
            du, dv = _irls_increment(ix, iy, it, u, v, cfg, trace, (level, wi))
            u, v = u + du, v + dv
            if cfg.median_filter_radius > 0:
                size = 2 * cfg.median_filter_radius + 1
                u = ndimage.median_filter(u, size=size, mode="nearest")
                v = ndimage.median_filter(v, size=size, mode="nearest")
    return FlowField(u, v)

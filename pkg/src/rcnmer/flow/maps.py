"""Optical strain, flow-map assembly and apex location."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .._resample import resize2d
from .solver import MIN_FRAME_SIZE, FlowError, FlowField


@dataclass
class FlowMap:
    """Three-channel map ``[Vx, Vy, Vz]`` stored channels-first, float32."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise FlowError(f"flow map must be [3, H, W], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FlowError("flow map contains non-finite values")

    @property
    def vx(self) -> np.ndarray:
        return self.data[0]

    @property
    def vy(self) -> np.ndarray:
        return self.data[1]

    @property
    def vz(self) -> np.ndarray:
        return self.data[2]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1:]


def optical_strain(flow: FlowField) -> np.ndarray:
    """Strain magnitude from the flow's spatial derivatives (always >= 0)."""
    vx = np.asarray(flow.vx, dtype=np.float64)
    vy = np.asarray(flow.vy, dtype=np.float64)
    if not (np.all(np.isfinite(vx)) and np.all(np.isfinite(vy))):
        raise FlowError("flow must be finite")
    # np.gradient: central differences inside, one-sided at the borders
    dvx_dy, dvx_dx = np.gradient(vx)
    dvy_dy, dvy_dx = np.gradient(vy)
    return np.sqrt(dvx_dx ** 2 + dvy_dy ** 2 + 0.5 * (dvx_dy ** 2 + dvy_dx ** 2))


def assemble_flow_map(flow: FlowField, resolution: int) -> FlowMap:
    """Resize ``[Vx, Vy, Vz]`` to R x R; displacements are rescaled to target pixels."""
    if resolution < MIN_FRAME_SIZE:
        raise FlowError(f"target resolution {resolution} is below {MIN_FRAME_SIZE}")
    h, w = flow.shape
    vz = optical_strain(flow)
    vx = resize2d(np.asarray(flow.vx, dtype=np.float64), resolution, resolution) * (resolution / w)
    vy = resize2d(np.asarray(flow.vy, dtype=np.float64), resolution, resolution) * (resolution / h)
    return FlowMap(np.stack([vx, vy, resize2d(vz, resolution, resolution)]))


def locate_apex(frames: Sequence[np.ndarray], onset_index: int = 0) -> int:
    """Index of the frame after onset that differs most from it (3x3 box-smoothed L2)."""
    if len(frames) == 0:
        raise FlowError("empty frame sequence")
    if len(frames) < 2:
        raise FlowError("need at least two frames to locate an apex")
    if not 0 <= onset_index < len(frames) - 1:
        raise FlowError(f"onset index {onset_index} leaves no later frame")
    smooth = lambda f: ndimage.uniform_filter(np.asarray(f, dtype=np.float64), size=3, mode="nearest")
    ref = smooth(frames[onset_index])
    dists = [np.linalg.norm(smooth(frames[t]) - ref) for t in range(onset_index + 1, len(frames))]
    return onset_index + 1 + int(np.argmax(dists))

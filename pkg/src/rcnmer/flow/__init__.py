"""Optical-flow extraction: robust solver, strain and resized flow maps."""

from .maps import FlowMap, assemble_flow_map, locate_apex, optical_strain
from .solver import (
    FlowError,
    FlowField,
    FlowSolverConfig,
    SolverTrace,
    as_frame,
    central_diff,
    estimate_flow,
    lorentzian,
    lorentzian_weight,
    warp,
)


def flow_map_from_frames(onset, apex, resolution: int, cfg: FlowSolverConfig | None = None) -> FlowMap:
    return assemble_flow_map(estimate_flow(onset, apex, cfg), resolution)


__all__ = [
    "FlowError", "FlowField", "FlowMap", "FlowSolverConfig", "SolverTrace", "as_frame",
    "assemble_flow_map", "central_diff", "estimate_flow", "flow_map_from_frames", "locate_apex",
    "lorentzian", "lorentzian_weight", "optical_strain", "warp",
]

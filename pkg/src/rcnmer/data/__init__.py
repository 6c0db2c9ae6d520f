"""Sample metadata, file formats, synthetic data and the flow cache."""

from .cache import CacheStats, FlowCache, FlowDataset, frame_pair, load_dataset, load_mask, precompute_flows
from .io import DataError, read_flow_map, read_frame, read_pgm_raw, write_flow_map, write_pgm
from .manifest import LABELS, Manifest, SampleRecord, load_manifest, save_manifest
from .synth import DEFAULT_DOMAINS, DomainProfile, attention_favoring_maps, generate_dataset, stream_rng

__all__ = [
    "DEFAULT_DOMAINS", "LABELS", "CacheStats", "DataError", "DomainProfile", "FlowCache", "FlowDataset",
    "Manifest", "SampleRecord", "attention_favoring_maps", "frame_pair", "generate_dataset", "load_dataset",
    "load_manifest", "load_mask", "precompute_flows", "read_flow_map", "read_frame", "read_pgm_raw",
    "save_manifest", "stream_rng", "write_flow_map", "write_pgm",
]

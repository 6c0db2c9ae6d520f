"""RCN backbone, parameter-free modules and named architectures."""

from .attention import apply_attention, attention_map, class_weight_map, normalize_by_max
from .descriptor import (
    KINDS,
    NAMED_KINDS,
    PLACEMENTS,
    ArchDescriptor,
    DescriptorError,
    custom_descriptor,
    named_descriptor,
    wide_split,
)
from .rcn import ForwardResult, RconvBlock, RcnModel, build_named, conv1_params, rconv_forward, wide_conv1

__all__ = [
    "KINDS", "NAMED_KINDS", "PLACEMENTS", "ArchDescriptor", "DescriptorError", "ForwardResult",
    "RconvBlock", "RcnModel", "apply_attention", "attention_map", "build_named", "class_weight_map",
    "conv1_params", "custom_descriptor", "named_descriptor", "normalize_by_max", "rconv_forward",
    "wide_conv1", "wide_split",
]

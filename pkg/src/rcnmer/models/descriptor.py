"""Serializable architecture descriptors.

Canonical form::

    kind=<name>;M=<int>;K=<int>;C=<int>;R=<int>;wide=<0|1>;shortcut=<0|1>;att=<placement>;dil=1,2,3

Optional trailing keys ``states=<n>`` and ``bn=per_state`` appear only when
they differ from the defaults (3 recurrent states, shared batch norm).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

PLACEMENTS = (
    "none",
    "after_conv1",
    "at_rconv_state0",
    "after_rconv_state1",
    "after_rconv_state2",
    "parallel_rconv",
    "after_rconv",
)

NAMED_KINDS = ("model1", "model2", "model3", "model4", "rcn", "rcn-w", "rcn-s", "rcn-a", "rcn-c", "rcn-f", "rcn-p")
KINDS = NAMED_KINDS + ("custom",)

# kind -> (rconv blocks, wide conv1, shortcut rconv, attention placement)
_NAMED = {
    "model1": (0, False, False, "none"),
    "rcn": (1, False, False, "none"),
    "model3": (2, False, False, "none"),
    "model4": (3, False, False, "none"),
    "rcn-w": (1, True, False, "none"),
    "rcn-s": (1, False, True, "none"),
    "rcn-a": (1, False, False, "after_rconv"),
    "rcn-c": (1, True, True, "after_conv1"),
    "rcn-f": (1, True, True, "at_rconv_state0"),
    "rcn-p": (1, True, True, "parallel_rconv"),
}


class DescriptorError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    model_kind: str = "rcn"
    feature_maps: int = 16
    pool_size: int = 5
    num_classes: int = 3
    input_resolution: int = 60
    conv1_wide: bool = False
    rconv_shortcut: bool = False
    attention_placement: str = "none"
    dilation_sizes: tuple[int, ...] = (1, 2, 3)
    rconv_states: int = 3
    per_state_bn: bool = False

    def __post_init__(self):
        if self.model_kind not in KINDS:
            raise DescriptorError(f"unknown model kind {self.model_kind!r}")
        if self.attention_placement not in PLACEMENTS:
            raise DescriptorError(f"unknown attention placement {self.attention_placement!r}")
        if min(self.feature_maps, self.pool_size, self.num_classes, self.input_resolution) < 1:
            raise DescriptorError("M, K, C and R must be positive")
        if self.rconv_states < 0:
            raise DescriptorError("rconv_states must be >= 0")
        if self.conv1_wide and self.feature_maps < len(self.dilation_sizes):
            raise DescriptorError("wide expansion needs at least one channel per stream")
        if self.model_kind in _NAMED:
            blocks, wide, shortcut, att = _NAMED[self.model_kind]
            if (self.conv1_wide, self.rconv_shortcut, self.attention_placement) != (wide, shortcut, att):
                raise DescriptorError(f"flags do not match named architecture {self.model_kind!r}")
        if self.rconv_blocks == 0 and self.attention_placement != "none" and self.attention_placement != "after_conv1":
            raise DescriptorError("attention inside the recurrent layer needs a recurrent layer")

    @property
    def rconv_blocks(self) -> int:
        if self.model_kind in _NAMED:
            return _NAMED[self.model_kind][0]
        return 1

    def to_string(self) -> str:
        parts = [
            f"kind={self.model_kind}",
            f"M={self.feature_maps}",
            f"K={self.pool_size}",
            f"C={self.num_classes}",
            f"R={self.input_resolution}",
            f"wide={int(self.conv1_wide)}",
            f"shortcut={int(self.rconv_shortcut)}",
            f"att={self.attention_placement}",
            "dil=" + ",".join(str(d) for d in self.dilation_sizes),
        ]
        if self.rconv_states != 3:
            parts.append(f"states={self.rconv_states}")
        if self.per_state_bn:
            parts.append("bn=per_state")
        return ";".join(parts)

    __str__ = to_string

    @classmethod
    def from_string(cls, text: str) -> "ArchDescriptor":
        fields: dict[str, str] = {}
        for part in text.strip().split(";"):
            if "=" not in part:
                raise DescriptorError(f"malformed descriptor segment {part!r}")
            key, value = part.split("=", 1)
            if key in fields:
                raise DescriptorError(f"duplicate key {key!r}")
            fields[key] = value
        required = ("kind", "M", "K", "C", "R", "wide", "shortcut", "att", "dil")
        missing = [k for k in required if k not in fields]
        if missing:
            raise DescriptorError(f"descriptor is missing {missing}")
        unknown = set(fields) - set(required) - {"states", "bn"}
        if unknown:
            raise DescriptorError(f"unknown descriptor keys {sorted(unknown)}")
        try:
            return cls(
                model_kind=fields["kind"],
                feature_maps=int(fields["M"]),
                pool_size=int(fields["K"]),
                num_classes=int(fields["C"]),
                input_resolution=int(fields["R"]),
                conv1_wide=_flag(fields["wide"]),
                rconv_shortcut=_flag(fields["shortcut"]),
                attention_placement=fields["att"],
                dilation_sizes=tuple(int(d) for d in fields["dil"].split(",")),
                rconv_states=int(fields.get("states", 3)),
                per_state_bn=fields.get("bn", "shared") == "per_state",
            )
        except ValueError as exc:
            if isinstance(exc, DescriptorError):
                raise
            raise DescriptorError(str(exc)) from exc

    def with_(self, **changes) -> "ArchDescriptor":
        return replace(self, **changes)


def _flag(value: str) -> bool:
    if value not in ("0", "1"):
        raise DescriptorError(f"flag must be 0 or 1, got {value!r}")
    return value == "1"


def named_descriptor(kind: str, feature_maps: int = 16, pool_size: int = 5, num_classes: int = 3,
                     resolution: int = 60, **extra) -> ArchDescriptor:
    """Descriptor for a named architecture; ``model2`` is the RCN backbone."""
    if kind == "model2":
        kind = "rcn"
    if kind not in _NAMED:
        raise DescriptorError(f"unknown named architecture {kind!r}")
    _, wide, shortcut, att = _NAMED[kind]
    return ArchDescriptor(kind, feature_maps, pool_size, num_classes, resolution, wide, shortcut, att, **extra)


def custom_descriptor(wide: bool, shortcut: bool, placement: str, feature_maps: int = 16, pool_size: int = 5,
                      num_classes: int = 3, resolution: int = 60) -> ArchDescriptor:
    """Descriptor for a flag combination, using the named kind when one matches."""
    for kind, (blocks, w, s, a) in _NAMED.items():
        if blocks == 1 and (w, s, a) == (wide, shortcut, placement):
            return named_descriptor(kind, feature_maps, pool_size, num_classes, resolution)
    return ArchDescriptor("custom", feature_maps, pool_size, num_classes, resolution, wide, shortcut, placement)


def wide_split(feature_maps: int, streams: int = 3) -> tuple[int, ...]:
    """Equal channel split; the remainder goes to the leading (small-dilation) streams."""
    if feature_maps < streams:
        raise DescriptorError(f"need at least {streams} feature maps for {streams} streams")
    base, rem = divmod(feature_maps, streams)
    return tuple(base + (1 if i < rem else 0) for i in range(streams))

"""Recurrent convolutional network and its parameter-free extensions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..engine import (
    BatchNormState,
    ConvParams,
    Tensor,
    adaptive_avgpool2d,
    batchnorm2d,
    concat,
    dropout,
    linear,
    maxpool2d,
    relu,
    softmax,
)
from .attention import apply_attention, attention_map
from .descriptor import ArchDescriptor, DescriptorError, named_descriptor, wide_split

Post = Callable[[Tensor], Tensor]


def conv1_params(feature_maps: int, wide: bool, dilations, rng, dtype, prefix: str = "conv1") -> list[ConvParams]:
    """First-layer convolutions: one standard conv, or one dilated stream per dilation size."""
    if not wide:
        return [ConvParams.init(3, feature_maps, 3, rng, dtype, stride=3, padding=1, name=prefix)]
    return [
        ConvParams.init(3, m, 3, rng, dtype, stride=3, padding=d, dilation=d, name=f"{prefix}.d{d}")
        for m, d in zip(wide_split(feature_maps, len(dilations)), dilations)
    ]


def wide_conv1(x: Tensor, streams: list[ConvParams]) -> Tensor:
    """Run each dilated stream and concatenate along channels."""
    outs = [p(x) for p in streams]
    shapes = {o.shape[2:] for o in outs}
    if len(shapes) != 1:
        raise ValueError(f"dilated streams disagree on output size: {sorted(shapes)}")
    return outs[0] if len(outs) == 1 else concat(outs, axis=1)


def rconv_forward(
    x: Tensor,
    feedforward: ConvParams,
    recurrent: ConvParams,
    shortcut: bool,
    states: int,
    post0: Post,
    post: Callable[[int, Tensor], Tensor],
    attend: Callable[[Tensor], Tensor] | None = None,
    placement: str = "none",
) -> Tensor:
    """Unfolded recurrent convolution.

    State 0 is ``post0(W0 * x + b0)`` with a 1x1 conv.  Without shortcut each
    later state is ``post(W * (x + S_{n-1}) + b)``; with shortcut the state
    input accumulates, ``H_n = H_{n-1} + S_{n-1}`` with ``H_0 = x``.  The
    recurrent weights are shared by all states >= 1.
    """
    if x.shape[1] != feedforward.in_channels:
        raise ValueError(f"recurrent layer expects {feedforward.in_channels} channels, got {x.shape[1]}")
    s = post0(feedforward(x))
    if placement == "at_rconv_state0":
        s = attend(s)
    acc = x
    for n in range(1, states + 1):
        if shortcut:
            acc = acc + s
            inp = acc
        else:
            inp = x + s
        s = post(n, recurrent(inp))
        if (placement == "after_rconv_state1" and n == 1) or (placement == "after_rconv_state2" and n == 2):
            s = attend(s)
    if placement == "after_rconv":
        s = attend(s)
    return s


@dataclass
class RconvBlock:
    feedforward: ConvParams
    recurrent: ConvParams
    bn0: BatchNormState
    bns: list[BatchNormState]

    @classmethod
    def create(cls, channels: int, states: int, rng, dtype, per_state_bn: bool, name: str) -> "RconvBlock":
        ff = ConvParams.init(channels, channels, 1, rng, dtype, name=f"{name}.ff")
        rec = ConvParams.init(channels, channels, 3, rng, dtype, padding=1, name=f"{name}.rec")
        n_bn = states if per_state_bn else min(states, 1)
        bns = [BatchNormState.create(channels, dtype, f"{name}.bn{i + 1}" if per_state_bn else f"{name}.bn")
               for i in range(n_bn)]
        return cls(ff, rec, BatchNormState.create(channels, dtype, f"{name}.bn0"), bns)

    def bn_for_state(self, n: int) -> BatchNormState:
        return self.bns[n - 1] if len(self.bns) > 1 else self.bns[0]

    def forward(self, x: Tensor, shortcut: bool, states: int, training: bool,
                attend=None, placement: str = "none") -> Tensor:
        return rconv_forward(
            x, self.feedforward, self.recurrent, shortcut, states,
            post0=lambda t: relu(batchnorm2d(t, self.bn0, training)),
            post=lambda n, t: relu(batchnorm2d(t, self.bn_for_state(n), training)),
            attend=attend, placement=placement,
        )

    def conv_params(self) -> list[ConvParams]:
        return [self.feedforward, self.recurrent]

    def norm_states(self) -> list[BatchNormState]:
        return [self.bn0, *self.bns]


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    taps: dict[str, Tensor] = field(default_factory=dict)


class RcnModel:
    """Concrete network described by an :class:`ArchDescriptor`."""

    def __init__(self, descriptor: ArchDescriptor, seed: int = 0, dtype=np.float32, dropout_ratio: float = 0.5):
        d = descriptor
        self.descriptor = d
        self.dropout_ratio = dropout_ratio
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        m, k = d.feature_maps, d.pool_size
        if d.rconv_blocks >= 1:
            needed = {"after_rconv_state1": 1, "after_rconv_state2": 2}.get(d.attention_placement, 0)
            if d.rconv_states < needed:
                raise DescriptorError(f"{d.attention_placement} needs at least {needed} recurrent states")
        self.conv1 = conv1_params(m, d.conv1_wide, d.dilation_sizes, rng, dtype)
        self.bn1 = BatchNormState.create(m, dtype, "bn1")
        self.blocks = [
            RconvBlock.create(m, d.rconv_states, rng, dtype, d.per_state_bn, f"rconv{b + 1}")
            for b in range(d.rconv_blocks)
        ]
        fan_in = k * k * m
        bound = np.sqrt(6.0 / fan_in)
        self.cls_weight = Tensor(rng.uniform(-bound, bound, (d.num_classes, fan_in)).astype(dtype),
                                 requires_grad=True, name="cls.weight")
        self.cls_bias = Tensor(np.zeros(d.num_classes, dtype=dtype), requires_grad=True, name="cls.bias")
        self.norm_mean = np.zeros(3, dtype=np.float32)
        self.norm_std = np.ones(3, dtype=np.float32)

    # -- parameters ---------------------------------------------------------
    def _convs(self) -> list[ConvParams]:
        out = list(self.conv1)
        for b in self.blocks:
            out.extend(b.conv_params())
        return out

    def _norms(self) -> list[BatchNormState]:
        out = [self.bn1]
        for b in self.blocks:
            out.extend(b.norm_states())
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for c in self._convs():
            out += [(c.weight.name, c.weight), (c.bias.name, c.bias)]
        for bn in self._norms():
            out += [(bn.gamma.name, bn.gamma), (bn.beta.name, bn.beta)]
        out += [("cls.weight", self.cls_weight), ("cls.bias", self.cls_bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for bn in self._norms():
            base = bn.gamma.name.rsplit(".", 1)[0]
            out += [(f"{base}.running_mean", bn.running_mean), (f"{base}.running_var", bn.running_var)]
        return out

    def astype(self, dtype) -> "RcnModel":
        """Cast parameters and buffers in place (e.g. float64 for gradient checks)."""
        self.dtype = np.dtype(dtype)
        for t in self.parameters():
            t.data = t.data.astype(dtype)
        for bn in self._norms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    # -- inference ----------------------------------------------------------
    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Standardize a raw [N,3,R,R] flow-map batch with the stored channel stats."""
        x = np.asarray(x)
        return ((x - self.norm_mean.reshape(1, 3, 1, 1)) / self.norm_std.reshape(1, 3, 1, 1)).astype(self.dtype)

    def _attend(self, t: Tensor) -> Tensor:
        return apply_attention(t, attention_map(t, self.cls_weight.data, self.descriptor.pool_size))

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> ForwardResult:
        """Forward pass on a normalized [N,3,R,R] batch."""
        d = self.descriptor
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (d.input_resolution, d.input_resolution):
            raise ValueError(f"expected input [N,3,{d.input_resolution},{d.input_resolution}], got {x.shape}")
        taps: dict[str, Tensor] = {}
        drop = lambda t: dropout(t, self.dropout_ratio, training, rng)

        h = relu(batchnorm2d(wide_conv1(x, self.conv1), self.bn1, training))
        taps["conv1"] = h
        if d.attention_placement == "after_conv1":
            h = self._attend(h)
            taps["conv1_attended"] = h
        h = drop(h)
        for i, block in enumerate(self.blocks):
            suffix = "" if i == 0 else str(i + 1)
            placement = d.attention_placement if i == 0 else "none"
            inner = placement if placement != "parallel_rconv" else "none"
            out = block.forward(h, d.rconv_shortcut, d.rconv_states, training, self._attend, inner)
            if placement == "parallel_rconv":
                amap = attention_map(h, self.cls_weight.data, d.pool_size, out.shape[2:])
                taps["attention"] = amap
                out = apply_attention(out, amap)
            taps["rconv" + suffix] = out
            h = drop(out)
            if min(h.shape[2:]) >= 2:
                h = maxpool2d(h, 2, 2)
            taps["maxpool" + suffix] = h
        taps["features"] = h
        pooled = adaptive_avgpool2d(h, d.pool_size)
        taps["pooled"] = pooled
        flat = pooled.reshape(pooled.shape[0], -1)
        taps["flat"] = flat
        logits = linear(flat, self.cls_weight, self.cls_bias)
        return ForwardResult(logits, softmax(logits), taps)

    __call__ = forward


def build_named(kind: str, feature_maps: int = 16, pool_size: int = 5, num_classes: int = 3,
                resolution: int = 60, seed: int = 0, dtype=np.float32, dropout_ratio: float = 0.5) -> RcnModel:
    return RcnModel(named_descriptor(kind, feature_maps, pool_size, num_classes, resolution),
                    seed=seed, dtype=dtype, dropout_ratio=dropout_ratio)

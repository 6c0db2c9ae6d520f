"""Differentiable search over module combinations.

Three decision nodes: the first convolution (standard or wide), the recurrent
layer (basic or shortcut) and the attention placement.  Each node mixes its
candidates' outputs with coefficients ``alpha_i / sum_j alpha_j`` where
``alpha = softplus(theta)``.  Network weights and ``theta`` are updated in
alternating epochs on a subject-level train/validation split, using
first-order gradients.  Discrete architectures are ranked by the product of
their per-node coefficients.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import FlowDataset
from .engine import (
    SGD,
    BatchNormState,
    Tensor,
    adaptive_avgpool2d,
    batchnorm2d,
    classwise_bce,
    dropout,
    linear,
    maxpool2d,
    one_hot,
    relu,
    softmax,
    softplus,
)
from .evaluation.training import channel_stats
from .models import PLACEMENTS, ArchDescriptor, RconvBlock, apply_attention, attention_map, custom_descriptor
from .models.rcn import conv1_params, wide_conv1

NODE_NAMES = ("conv1", "rconv", "attention")
CONV1_CANDIDATES = ("conv", "conv-w")
RCONV_CANDIDATES = ("rconv", "rconv-s")


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class SearchSpace:
    conv1: tuple[str, ...] = CONV1_CANDIDATES
    rconv: tuple[str, ...] = RCONV_CANDIDATES
    attention: tuple[str, ...] = PLACEMENTS

    def __post_init__(self):
        for name, cands, allowed in zip(NODE_NAMES, self.nodes, (CONV1_CANDIDATES, RCONV_CANDIDATES, PLACEMENTS)):
            if not cands:
                raise SearchError(f"node {name} has no candidates")
            bad = set(cands) - set(allowed)
            if bad or len(set(cands)) != len(cands):
                raise SearchError(f"node {name}: invalid candidates {sorted(bad) or list(cands)}")

    @property
    def nodes(self) -> tuple[tuple[str, ...], ...]:
        return (self.conv1, self.rconv, self.attention)

    def size(self) -> int:
        return int(np.prod([len(c) for c in self.nodes]))


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 20
    lr: float = 0.003
    arch_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.0
    batch_size: int = 16
    val_fraction: float = 0.2
    seed: int = 0
    feature_maps: int = 16
    pool_size: int = 5
    num_classes: int = 3
    freeze_arch: bool = False


def coefficients(theta: Tensor) -> Tensor:
    """Normalized positive mixing weights ``softplus(theta) / sum softplus(theta)``."""
    alpha = softplus(theta)
    return alpha / alpha.sum()


def mixed_forward(outputs: list[Tensor], coef: Tensor) -> Tensor:
    """``sum_i coef_i * O_i`` for candidate outputs of identical shape."""
    if len(outputs) != coef.shape[0]:
        raise SearchError(f"{len(outputs)} candidate outputs for {coef.shape[0]} coefficients")
    shapes = {o.shape for o in outputs}
    if len(shapes) != 1:
        raise SearchError(f"candidate outputs differ in shape: {sorted(shapes)}")
    total = None
    for i, o in enumerate(outputs):
        term = o * coef[i]
        total = term if total is None else total + term
    return total


def mix_alpha(outputs: list[Tensor], alpha) -> Tensor:
    """Mixing with raw positive ``alpha`` (normalized by its sum)."""
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=outputs[0].dtype))
    return mixed_forward(outputs, a / a.sum())


class SuperNet:
    """Every candidate owns its weights; the classifier is shared."""

    def __init__(self, space: SearchSpace, resolution: int, cfg: SearchConfig, seed: int, dtype=np.float32):
        self.space, self.cfg, self.resolution = space, cfg, resolution
        rng = np.random.default_rng(seed)
        m, k = cfg.feature_maps, cfg.pool_size
        self.conv1 = {c: conv1_params(m, c == "conv-w", (1, 2, 3), rng, dtype, prefix=f"conv1[{c}]")
                      for c in space.conv1}
        self.bn1 = {c: BatchNormState.create(m, dtype, f"bn1[{c}]") for c in space.conv1}
        self.rconv = {c: RconvBlock.create(m, 3, rng, dtype, False, f"rconv[{c}]") for c in space.rconv}
        bound = np.sqrt(6.0 / (k * k * m))
        self.cls_weight = Tensor(rng.uniform(-bound, bound, (cfg.num_classes, k * k * m)).astype(dtype),
                                 requires_grad=True, name="cls.weight")
        self.cls_bias = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True, name="cls.bias")
        self.theta = [Tensor(np.zeros(len(c), dtype=dtype), requires_grad=True, name=f"theta.{n}")
                      for n, c in zip(NODE_NAMES, space.nodes)]

    def weights(self) -> list[Tensor]:
        out = []
        for c in self.space.conv1:
            for p in self.conv1[c]:
                out += [p.weight, p.bias]
            out += [self.bn1[c].gamma, self.bn1[c].beta]
        for c in self.space.rconv:
            b = self.rconv[c]
            for p in b.conv_params():
                out += [p.weight, p.bias]
            for bn in b.norm_states():
                out += [bn.gamma, bn.beta]
        return out + [self.cls_weight, self.cls_bias]

    def coefficient_values(self) -> list[np.ndarray]:
        return [coefficients(Tensor(t.data.astype(np.float64))).data for t in self.theta]

    def _attend(self, t: Tensor) -> Tensor:
        return apply_attention(t, attention_map(t, self.cls_weight.data, self.cfg.pool_size))

    def forward(self, x: Tensor, training: bool, rng) -> Tensor:
        coefs = [coefficients(t) for t in self.theta]
        h = mixed_forward(
            [relu(batchnorm2d(wide_conv1(x, self.conv1[c]), self.bn1[c], training)) for c in self.space.conv1],
            coefs[0],
        )
        stage_outs, stage_coef = [], []
        for (i, r), (j, p) in itertools.product(enumerate(self.space.rconv), enumerate(self.space.attention)):
            block = self.rconv[r]
            shortcut = r == "rconv-s"
            if p == "after_conv1":
                out = block.forward(self._attend(h), shortcut, 3, training)
            elif p == "parallel_rconv":
                out = block.forward(h, shortcut, 3, training)
                out = apply_attention(out, attention_map(h, self.cls_weight.data, self.cfg.pool_size, out.shape[2:]))
            else:
                out = block.forward(h, shortcut, 3, training, self._attend, p)
            stage_outs.append(out)
            stage_coef.append(coefs[1][i] * coefs[2][j])
        h = None
        for o, c in zip(stage_outs, stage_coef):
            term = o * c
            h = term if h is None else h + term
        h = dropout(h, self.cfg.dropout, training, rng)
        if min(h.shape[2:]) >= 2:
            h = maxpool2d(h, 2, 2)
        pooled = adaptive_avgpool2d(h, self.cfg.pool_size)
        return softmax(linear(pooled.reshape(pooled.shape[0], -1), self.cls_weight, self.cls_bias))


@dataclass
class RankedArch:
    choice: tuple[str, str, str]
    weight: float
    descriptor: ArchDescriptor
    top3: bool = False

    def to_dict(self) -> dict:
        return {"choice": list(self.choice), "weight": self.weight, "descriptor": self.descriptor.to_string(),
                "top3": self.top3}


@dataclass
class SearchResult:
    ranking: list[RankedArch]
    node_ranking: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)

    def final_record(self) -> dict:
        return {"type": "final", "ranking": [r.to_dict() for r in self.ranking],
                "nodes": {k: [[c, w] for c, w in v] for k, v in self.node_ranking.items()}}

    def write_jsonl(self, path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.log]
        lines.append(json.dumps(self.final_record(), sort_keys=True))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def subject_split(subjects, fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded split of unique subjects into (train, validation), at least two on each side."""
    uniq = sorted(set(np.asarray(subjects).tolist()))
    n_val = int(round(fraction * len(uniq)))
    if n_val < 2 or len(uniq) - n_val < 2:
        raise SearchError(f"degenerate split: {len(uniq)} subjects with fraction {fraction} "
                          "does not leave two subjects on each side")
    order = np.random.default_rng(seed).permutation(len(uniq))
    val = sorted(uniq[i] for i in order[:n_val])
    train = sorted(uniq[i] for i in order[n_val:])
    return train, val


def rank_architectures(space: SearchSpace, coefs: list[np.ndarray], resolution: int,
                       cfg: SearchConfig | None = None) -> list[RankedArch]:
    cfg = cfg or SearchConfig()
    combos = []
    for idx in itertools.product(*(range(len(c)) for c in space.nodes)):
        w = float(np.prod([coefs[n][i] for n, i in enumerate(idx)]))
        choice = tuple(space.nodes[n][i] for n, i in enumerate(idx))
        combos.append((w, idx, choice))
    # stable order: weight descending, ties broken by candidate order
    combos.sort(key=lambda t: (-t[0], t[1]))
    out = []
    for rank, (w, _, choice) in enumerate(combos):
        desc = custom_descriptor(choice[0] == "conv-w", choice[1] == "rconv-s", choice[2],
                                 cfg.feature_maps, cfg.pool_size, cfg.num_classes, resolution)
        out.append(RankedArch(choice, w, desc, rank < 3))
    return out


def derive_architecture(ranking: list[RankedArch], rank: int = 1) -> ArchDescriptor:
    if not 1 <= rank <= len(ranking):
        raise SearchError(f"rank {rank} outside 1..{len(ranking)}")
    return ranking[rank - 1].descriptor


def _epoch(net: SuperNet, x, y, params, opt, cfg, rng, drop_rng, training_params) -> float:
    order = rng.permutation(len(y))
    total = 0.0
    for lo in range(0, len(y), cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        for p in net.weights() + net.theta:
            p.grad = None
        probs = net.forward(Tensor(x[idx]), True, drop_rng)
        loss = classwise_bce(probs, one_hot(y[idx], cfg.num_classes, probs.dtype))
        loss.backward()
        if training_params:
            opt.step()
        total += loss.item() * len(idx)
    return total / len(y)


def search(data: FlowDataset, space: SearchSpace | None = None, cfg: SearchConfig | None = None) -> SearchResult:
    """Alternate weight epochs (train split) and architecture epochs (validation split)."""
    space = space or SearchSpace()
    cfg = cfg or SearchConfig()
    train_s, val_s = subject_split(data.subjects, cfg.val_fraction, cfg.seed)
    train, val = data.where_subject(train_s), data.where_subject(val_s)
    if len(train) == 0 or len(val) == 0:
        raise SearchError("degenerate split: one side has no samples")
    seq = np.random.SeedSequence(cfg.seed)
    s_init, s_shuffle, s_drop = (int(s.generate_state(1)[0]) for s in seq.spawn(3))
    net = SuperNet(space, data.resolution, cfg, s_init)
    mean, std = channel_stats(train.x)
    norm = lambda a: ((a - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)
    xt, yt, xv, yv = norm(train.x), np.asarray(train.y), norm(val.x), np.asarray(val.y)
    w_opt = SGD(net.weights(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    a_opt = SGD(net.theta, lr=cfg.arch_lr, momentum=cfg.momentum, weight_decay=0.0)
    rng = np.random.default_rng(s_shuffle)
    drop_rng = np.random.default_rng(s_drop)
    log = []
    for epoch in range(cfg.epochs):
        train_loss = _epoch(net, xt, yt, net.weights(), w_opt, cfg, rng, drop_rng, True)
        val_loss = _epoch(net, xv, yv, net.theta, a_opt, cfg, rng, drop_rng, not cfg.freeze_arch)
        coefs = net.coefficient_values()
        log.append({"type": "epoch", "epoch": epoch + 1, "train_loss": train_loss, "val_loss": val_loss,
                    "coefficients": {n: c.tolist() for n, c in zip(NODE_NAMES, coefs)}})
    coefs = net.coefficient_values()
    ranking = rank_architectures(space, coefs, data.resolution, cfg)
    log.insert(0, {"type": "config", "space": {n: list(c) for n, c in zip(NODE_NAMES, space.nodes)},
                   "config": asdict(cfg), "train_subjects": train_s, "val_subjects": val_s})
    return SearchResult(ranking, node_ranking(space, coefs), log)


def node_ranking(space: SearchSpace, coefs: list[np.ndarray]) -> dict[str, list[tuple[str, float]]]:
    """Candidates of each node by descending coefficient (ties keep candidate order)."""
    out = {}
    for name, cands, c in zip(NODE_NAMES, space.nodes, coefs):
        order = sorted(range(len(cands)), key=lambda i: (-c[i], i))
        out[name] = [(cands[i], float(c[i])) for i in order]
    return out

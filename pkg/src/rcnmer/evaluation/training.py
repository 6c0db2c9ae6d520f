"""Minibatch SGD training of a single model."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..data import FlowDataset
from ..engine import SGD, NumericError, Tensor, classwise_bce, no_grad, one_hot, softmax_cross_entropy
from ..models import ArchDescriptor, RcnModel

LOSSES = ("classwise_bce", "softmax_ce")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 500
    loss_stop: float = 0.5
    batch_size: int = 32
    seed: int = 0
    loss: str = "classwise_bce"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if self.lr <= 0 or not 0 <= self.dropout < 1:
            raise ValueError("lr must be positive and dropout in [0, 1)")

    def with_(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["loss_stop"]):
            d["loss_stop"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if d.get("loss_stop") == "inf":
            d["loss_stop"] = math.inf
        return cls(**d)


# Desk-scale schedule for the synthetic experiments: a larger step and smaller
# batches reach the loss_stop criterion within a few epochs instead of hundreds.
DESK_TRAIN_CONFIG = TrainConfig(lr=3e-3, batch_size=16, max_epochs=100)


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    stopped_early: bool = False

    @property
    def epochs(self) -> int:
        return len(self.epoch_losses)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over [N, 3, H, W]; std is floored at 1e-6."""
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(x.std(axis=(0, 2, 3), dtype=np.float64), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def batch_loss(model: RcnModel, xb: np.ndarray, yb: np.ndarray, cfg: TrainConfig, rng) -> Tensor:
    res = model(xb, training=True, rng=rng)
    if cfg.loss == "softmax_ce":
        return softmax_cross_entropy(res.logits, yb)
    return classwise_bce(res.probs, one_hot(yb, model.descriptor.num_classes, res.probs.dtype))


def train_single(data: FlowDataset, descriptor: ArchDescriptor, cfg: TrainConfig,
                 model: RcnModel | None = None) -> tuple[RcnModel, TrainLog]:
    """Train a fresh model (seeded by ``cfg.seed``) on ``data``.

    Inputs are standardized with per-channel statistics of ``data``, which are
    stored on the model.  Training stops at the first epoch whose mean loss
    falls below ``cfg.loss_stop`` or after ``cfg.max_epochs`` epochs.
    """
    if len(data) == 0:
        raise ValueError("empty training split")
    t0 = time.perf_counter()
    seq = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed, drop_seed = (int(s.generate_state(1)[0]) for s in seq.spawn(3))
    model = model or RcnModel(descriptor, seed=init_seed, dropout_ratio=cfg.dropout)
    model.norm_mean, model.norm_std = channel_stats(data.x)
    x = model.normalize(data.x)
    y = np.asarray(data.y)
    opt = SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    drop_rng = np.random.default_rng(drop_seed)
    log = TrainLog()
    n = len(y)
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            opt.zero_grad()
            try:
                loss = batch_loss(model, x[idx], y[idx], cfg, drop_rng)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch + 1}: {exc}") from exc
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        mean = total / n
        if not np.isfinite(mean):
            raise NumericError(f"non-finite training loss at epoch {epoch + 1}")
        log.epoch_losses.append(mean)
        if mean < cfg.loss_stop:
            log.stopped_early = True
            break
    log.seconds = time.perf_counter() - t0
    return model, log


def predict_proba(model: RcnModel, raw_x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for raw (unnormalized) flow maps, eval mode."""
    out = []
    with no_grad():
        for lo in range(0, len(raw_x), batch_size):
            out.append(model(model.normalize(raw_x[lo:lo + batch_size]), training=False).probs.data)
    if not out:
        return np.zeros((0, model.descriptor.num_classes), dtype=np.float32)
    return np.concatenate(out)


def predict(model: RcnModel, raw_x: np.ndarray) -> np.ndarray:
    return predict_proba(model, raw_x).argmax(axis=1)

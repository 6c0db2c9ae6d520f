"""SGD with momentum and coupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class SGD:
    """``v <- m*v + g + wd*w``; ``w <- w - lr*v``.

    Weight decay enters the momentum buffer (coupled form).  Velocity buffers
    start at zero, one per parameter.
    """

    params: Sequence[Tensor]
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.params = list(self.params)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SGD) -> None:
    """Functional form: install ``grads`` on ``params`` and take one step."""
    if len(params) != len(state.velocity):
        raise ValueError("one velocity buffer per parameter is required")
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.dtype)
    state.params = list(params)
    state.step()

"""SGD with classical (heavy-ball) momentum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


def sgd_momentum_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float | None = None) -> None:
    """``v <- mu*v + g; p <- p - lr*v`` for every parameter that holds a gradient.

    No dampening, no Nesterov correction. Parameters whose ``.grad`` is
    ``None`` (e.g. a disabled branch) are left untouched together with their
    velocity.
    """
    lr = state.learning_rate if lr is None else lr
    mu = state.momentum
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {p.grad.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v + p.grad
        state.velocity[name] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * state.velocity[name]).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = dict(params)
        self.state = OptimizerState(learning_rate=lr, momentum=momentum)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        sgd_momentum_step(self.params, self.state, lr)

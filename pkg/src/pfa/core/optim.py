"""Classic SGD with momentum and weight decay."""

from __future__ import annotations

import numpy as np

from ..errors import GraphError
from .tensor import Parameter


class SGD:
    """v = momentum * v + (grad + weight_decay * param); param -= lr * v.

    Velocity buffers persist across steps, keyed by parameter identity.
    """

    def __init__(self, params: list[Parameter], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                name = getattr(p, "name", "<unnamed>")
                raise GraphError(f"sgd_step: parameter {name!r} has no gradient")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
            else:
                v = g
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

from __future__ import annotations

from dataclasses import dataclass, field

from .tensor import Tensor


@dataclass
class SgdOptimizer:
    """SGD with L2 weight decay: ``p <- p - lr * (g + wd * p)``.

    With ``momentum > 0`` the bracketed term is first folded into a per
    parameter velocity ``v <- momentum * v + (g + wd * p)`` and ``p <- p - lr * v``.
    The learning rate may be changed between steps.
    """

    learning_rate: float
    weight_decay: float = 0.0
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: list[Tensor], optimizer: SgdOptimizer, lr_scale: float = 1.0) -> None:
    """Update ``params`` in place; a parameter without a gradient only decays.

    ``lr_scale`` multiplies the learning rate for this group of parameters.
    """
    lr, wd, mu = optimizer.learning_rate * lr_scale, optimizer.weight_decay, optimizer.momentum
    for p in params:
        step = p.grad + wd * p.data if p.grad is not None else wd * p.data
        if mu:
            v = optimizer.velocity.get(id(p))
            step = step if v is None else mu * v + step
            optimizer.velocity[id(p)] = step
        p.data = p.data - lr * step

"""Gradient reversal: identity forward, ``-scale`` times the gradient backward."""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff.tensor import Tensor, make_node


def grl_forward(x: Tensor, scale: float) -> Tensor:
    if scale < 0:
        raise ValueError(f"gradient reversal scale must be >= 0, got {scale}")
    return make_node(x.data.copy(), (x,), lambda g: (-scale * g,))


@dataclass(frozen=True)
class GrlNode:
    scale: float

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"gradient reversal scale must be >= 0, got {self.scale}")

    def __call__(self, x: Tensor) -> Tensor:
        return grl_forward(x, self.scale)

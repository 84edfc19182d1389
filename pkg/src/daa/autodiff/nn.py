"""Parameter containers built on the primitive ops."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, parameter


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 0):
        fan_in, fan_out = in_ch * kernel * kernel, out_ch * kernel * kernel
        self.weight = parameter(glorot_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, fan_out))
        self.bias = parameter(np.zeros(out_ch))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int):
        self.weight = parameter(glorot_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(features))
        self.beta = parameter(np.zeros(features))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.eps)

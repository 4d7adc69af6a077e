"""Parameter containers shared by the encoder, attention and model blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import BatchNormState, Rng, Tensor, matmul


def uniform_init(rng: Rng, shape: tuple[int, ...], fan_in: int, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)


class Block:
    """Base class that discovers parameters by walking attributes.

    Attributes holding a :class:`Tensor` that requires grad, a
    :class:`BatchNormState`, another :class:`Block`, or a list/dict of those
    are registered under dotted names in attribute order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk_params(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for key, value in vars(self).items():
            yield from _walk_buffers(value, f"{prefix}{key}")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _children(value, name):
    if isinstance(value, (list, tuple)):
        return [(v, f"{name}.{i}") for i, v in enumerate(value)]
    if isinstance(value, dict):
        return [(v, f"{name}.{k}") for k, v in value.items()]
    return None


def _walk_params(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, BatchNormState):
        yield f"{name}.gamma", value.gamma
        yield f"{name}.beta", value.beta
    elif isinstance(value, Block):
        yield from value.named_parameters(prefix=f"{name}.")
    else:
        kids = _children(value, name)
        for v, n in kids or ():
            yield from _walk_params(v, n)


def _walk_buffers(value, name):
    if isinstance(value, BatchNormState):
        yield name, value
    elif isinstance(value, Block):
        yield from value.named_buffers(prefix=f"{name}.")
    else:
        for v, n in _children(value, name) or ():
            yield from _walk_buffers(v, n)


class Linear(Block):
    def __init__(self, rng: Rng, n_in: int, n_out: int, bias: bool = True, name: str = "linear"):
        self.weight = uniform_init(rng, (n_in, n_out), n_in, f"{name}.weight")
        self.bias = uniform_init(rng, (n_out,), n_in, f"{name}.bias") if bias else None
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


def set_identity(linear: Linear) -> None:
    """Overwrite a square layer with the identity map and zero bias."""
    linear.weight.data[...] = np.eye(linear.n_in, linear.n_out)
    if linear.bias is not None:
        linear.bias.data[...] = 0.0

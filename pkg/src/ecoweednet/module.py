"""Minimal module tree: named parameters, buffers, train/eval switching."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Parameter, Tensor, get_default_dtype


class Module:
    """Base class for layers.

    Attributes holding :class:`Parameter`, ``Module`` or lists of modules
    are discovered in assignment order, which fixes parameter naming for
    checkpoints. Non-learnable state (batch-norm running statistics) lives
    in ``self.buffers``.
    """

    def __init__(self):
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "", _seen: set[int] | None = None) -> Iterator[tuple[str, Parameter]]:
        """Each parameter once, under the first name that reaches it."""
        seen = set() if _seen is None else _seen
        for name, value in vars(self).items():
            if isinstance(value, Parameter) and id(value) not in seen:
                seen.add(id(value))
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def macs(self, shape: tuple[int, int, int]) -> tuple[int, tuple[int, int, int]]:
        """Analytic multiply-accumulates for one image of ``(C, H, W)``.

        Returns the MAC count and the output shape.
        """
        raise NotImplementedError(type(self).__name__)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Parameter:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual conv default."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    data = rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
    return Parameter(data)


def constant(shape: tuple[int, ...], value: float) -> Parameter:
    return Parameter(np.full(shape, value, dtype=get_default_dtype()))


def as_array(t: Tensor | np.ndarray) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else t

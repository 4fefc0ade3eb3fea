"""Small parameter containers used by the detection head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


@dataclass
class Linear:
    W: Parameter
    b: Parameter

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, name: str,
             scale: float | None = None, bias: float = 0.0) -> "Linear":
        bound = 1.0 / math.sqrt(n_in) if scale is None else scale
        return cls(Parameter(rng.uniform(-bound, bound, (n_in, n_out)), f"{name}.W"),
                   Parameter(np.full(n_out, bias, dtype=np.float64), f"{name}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def parameters(self) -> list[Parameter]:
        return [self.W, self.b]


@dataclass
class LayerNorm:
    gamma: Parameter
    beta: Parameter

    @classmethod
    def init(cls, width: int, name: str) -> "LayerNorm":
        return cls(Parameter(np.ones(width), f"{name}.gamma"), Parameter(np.zeros(width), f"{name}.beta"))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


@dataclass
class FFN:
    """Two-layer feed-forward block with a relu in between."""

    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, width: int, hidden: int, rng: np.random.Generator, name: str) -> "FFN":
        return cls(Linear.init(width, hidden, rng, f"{name}.fc1"), Linear.init(hidden, width, rng, f"{name}.fc2"))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))

    def parameters(self) -> list[Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()

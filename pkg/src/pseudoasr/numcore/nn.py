"""Parameter containers and the handful of layers everything else is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Tensor


def Parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter registry (Tensors, Modules, lists of Modules)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False, scale: float = 1.0):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.standard_normal((d_in, d_out)) * (scale / np.sqrt(d_in))
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm_stats(x, self._eps) * self.gamma + self.beta


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.rms_norm_stats(x, self._eps) * self.gamma


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        self.table = Parameter(rng.standard_normal((num, dim)) * scale)

    def __call__(self, idx) -> Tensor:
        return ops.take(self.table, idx)

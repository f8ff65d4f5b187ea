"""Parameter containers, layers and optimizers on top of ``tensor``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as tt
from .errors import ContractError, DimensionError
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container (insertion order is stable)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif _is_quantized(value):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if isinstance(p, Tensor)]

    def state_dict(self) -> dict[str, object]:
        return dict(self.named_parameters())

    def load_state_dict(self, state: dict[str, object]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ContractError(f"state is missing tensors: {missing[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            _assign(self, name, value)

    def zero_grad(self) -> None:
        tt.zero_grad(self.parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _is_quantized(value) -> bool:
    return type(value).__name__ == "QuantizedTensor"


def _assign(root: Module, dotted: str, value) -> None:
    parts = dotted.split(".")
    obj = root
    for p in parts[:-1]:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    leaf = parts[-1]
    current = getattr(obj, leaf)
    if isinstance(value, Tensor):
        value = value.data
    if isinstance(value, np.ndarray) and isinstance(current, Tensor):
        if current.shape != value.shape:
            raise DimensionError(f"{dotted}: shape {value.shape} != {current.shape}")
        current.data = np.array(value, dtype=tt.DTYPE)
        return
    if isinstance(value, np.ndarray):
        value = tt.parameter(value)
    setattr(obj, leaf, value)


def init_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return tt.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    """y = x Wᵀ + b with W stored [out, in]; W may be swapped for a QuantizedTensor."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, std: float | None = None):
        self.weight = init_normal(rng, (n_out, n_in), std if std is not None else n_in**-0.5)
        self.bias = tt.parameter(np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if _is_quantized(self.weight):
            from .quant import qlinear

            return qlinear(x, self.weight, self.bias)
        return tt.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = tt.parameter(np.ones(dim))
        self.bias = tt.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.gain, self.bias, self.eps)


class SGD:
    """Plain SGD with a fixed learning rate."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        tt.zero_grad(self.params)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        tt.zero_grad(self.params)

"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .core import DTYPE, Tensor


class Module:
    """Minimal module tree: parameters and child modules found by attribute walk."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        # private attributes are walked too: shared helpers such as dropout
        # live there and must follow train/eval switches
        yield self
        for value in vars(self).values():
            children = []
            if isinstance(value, Module):
                children = [value]
            elif isinstance(value, (list, tuple)):
                children = [v for v in value if isinstance(v, Module)]
            elif isinstance(value, dict):
                children = [v for v in value.values() if isinstance(v, Module)]
            for child in children:
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        problems = []
        for name, p in params.items():
            if name not in state:
                problems.append(f"{name}: missing")
            elif tuple(state[name].shape) != p.shape:
                problems.append(f"{name}: expected {p.shape}, got {tuple(state[name].shape)}")
        problems += [f"{name}: unexpected" for name in state if name not in params]
        if problems:
            raise ValueError("state does not match model parameters: " + "; ".join(problems))
        for name, p in params.items():
            p.data[...] = state[name]


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_fan_in(rng, (d_in, d_out), d_in)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, rows: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(rows, d)))

    def __call__(self, indices) -> Tensor:
        return ops.embedding(self.weight, indices)


class Conv1d(Module):
    """Convolution over the second-to-last axis with a bias."""

    def __init__(self, width: int, d_in: int, d_out: int, rng: np.random.Generator):
        self.kernel = uniform_fan_in(rng, (width, d_in, d_out), width * d_in)
        self.bias = parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.conv1d(x, self.kernel), self.bias)


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self._rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.rate, self._rng, self.training)


def flatten_parameters(module: Module) -> tuple[np.ndarray, np.ndarray]:
    """Move every parameter into one contiguous buffer and give each a grad view.

    Returns ``(data, grad)`` flat arrays; parameters keep their identity and
    shapes but their ``.data``/``.grad`` become views into these buffers.
    """
    params = module.parameters()
    total = int(np.sum([p.size for p in params]))
    data = np.empty(total, dtype=DTYPE)
    grad = np.zeros(total, dtype=DTYPE)
    offset = 0
    for p in params:
        n = p.size
        data[offset:offset + n] = p.data.reshape(-1)
        p.data = data[offset:offset + n].reshape(p.shape)
        p.grad = grad[offset:offset + n].reshape(p.shape)
        offset += n
    return data, grad

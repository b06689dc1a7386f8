"""Optimisers over a flat parameter buffer, and the early-stopping rule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np


@numba.njit(cache=True)
def _adam_kernel(data, grad, m, v, b1, b2, eps, step_size, root_correction):
    """One fused pass of the Adam update; returns False if any gradient is not finite."""
    finite = True
    for i in range(data.size):
        g = grad[i]
        if not np.isfinite(g):
            finite = False
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * g * g
        m[i] = mi
        v[i] = vi
        data[i] -= step_size * mi / (np.sqrt(vi) * root_correction + eps)
    return finite


class SGD:
    def __init__(self, data: np.ndarray, grad: np.ndarray, lr: float):
        self.data, self.grad, self.lr = data, grad, lr
        self.steps = 0

    def step(self) -> bool:
        """Apply one update; returns False if the gradient held a non-finite value."""
        finite = bool(np.isfinite(self.grad.sum()))
        self.data -= self.lr * self.grad
        self.steps += 1
        return finite


class Adam:
    """Adam with bias correction, updating ``data`` in place from ``grad``.

    ``theta -= lr / (1 - b1^t) * m / (sqrt(v / (1 - b2^t)) + eps)``
    """

    def __init__(self, data: np.ndarray, grad: np.ndarray, lr: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        if data.shape != grad.shape or data.ndim != 1:
            raise ValueError("Adam expects matching flat data and grad buffers")
        self.data, self.grad = data, grad
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = np.zeros_like(data)
        self.v = np.zeros_like(data)
        self.steps = 0

    def step(self) -> bool:
        """Apply one update; returns False if the gradient held a non-finite value."""
        b1, b2 = self.betas
        self.steps += 1
        step_size = self.lr / (1.0 - b1 ** self.steps)
        root_correction = 1.0 / math.sqrt(1.0 - b2 ** self.steps)
        return bool(_adam_kernel(self.data, self.grad, self.m, self.v, b1, b2, self.eps,
                                 step_size, root_correction))


def make_optimizer(name: str, data: np.ndarray, grad: np.ndarray, lr: float):
    if name == "adam":
        return Adam(data, grad, lr)
    if name == "sgd":
        return SGD(data, grad, lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class EarlyStopping:
    """Stop once the monitored metric has not improved for ``patience`` epochs.

    Only a strict improvement resets the counter.
    """

    patience: int
    best: float = -math.inf
    best_epoch: Optional[int] = None
    bad_epochs: int = 0
    history: list = field(default_factory=list)

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when this epoch is the new best."""
        self.history.append(value)
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience

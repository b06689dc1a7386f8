"""Tensor and tape: the reverse-mode differentiation substrate.

Operations only record onto a tape while one is active (``with Tape() as tape``).
Outside a tape everything runs untraced, which is how evaluation avoids the
bookkeeping cost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """A NaN or Inf showed up where only finite values are allowed."""


class Tensor:
    """Dense float64 array with an optional gradient and tape link."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise NumericError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")
        return self

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    index: int


class Tape:
    """Append-only record of traced operations.

    Nodes are appended in execution order, so every node's inputs were produced
    by earlier nodes (or are leaves). ``backward`` walks the list in reverse.
    """

    _stack: list = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def record(self, kind: str, inputs: tuple, output: Tensor, backward: BackwardFn) -> None:
        node = Node(kind, inputs, output, backward, len(self.nodes))
        output.node = node
        output.requires_grad = True
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def traced(*inputs: Tensor) -> Optional[Tape]:
    """The active tape if any input needs a gradient, else None."""
    tape = Tape.active()
    if tape is None:
        return None
    for t in inputs:
        if t.requires_grad:
            return tape
    return None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every traced tensor that ``loss`` depends on.

    Leaf tensors accumulate into an existing ``.grad`` buffer (so parameter
    gradients can live in a shared flat buffer); intermediate tensors get their
    gradient assigned. Tensors that are not traced are never touched.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node.index >= len(tape.nodes) or tape.nodes[loss.node.index] is not loss.node:
        raise ValueError("loss was not recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.array(ig, dtype=DTYPE)
                else:
                    inp.grad += ig
            else:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + ig
                else:
                    pending[key] = ig

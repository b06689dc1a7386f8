"""Differentiable primitives.

Every function takes and returns :class:`Tensor` (plain arrays and Python
scalars are wrapped as constants). When a tape is active and an input needs a
gradient, the op records a node whose backward closure maps the output
gradient to one gradient per input (``None`` for constants).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import DTYPE, DimensionError, Tensor, as_tensor, traced


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _emit(kind: str, inputs: tuple, out: np.ndarray, backward) -> Tensor:
    result = Tensor(out)
    tape = traced(*inputs)
    if tape is not None:
        tape.record(kind, inputs, result, backward)
    return result


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), ad * bd, backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), out, backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


def minimum(a, c: float) -> Tensor:
    """Elementwise ``min(a, c)`` against a constant; gradient flows where ``a < c``."""
    a = as_tensor(a)
    keep = a.data < c
    return _emit("minimum", (a,), np.where(keep, a.data, c), lambda g: (g * keep,))


def maximum(a, c: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > c
    return _emit("maximum", (a,), np.where(keep, a.data, c), lambda g: (g * keep,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    keep = (a.data > lo) & (a.data < hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# activations


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# reductions and shape


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat along axis {axis} of shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, out, backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy broadcasting on the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if bd.ndim == 2:
        # flatten leading axes into one GEMM; much faster than batched matmul
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a, b), out, backward)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, backward)


# ---------------------------------------------------------------------------
# normalisation


def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stable softmax; positions where ``mask`` is False get probability exactly 0."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {a.shape}")
    z = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=axis)):
            raise DimensionError("softmax slice with every position masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), out, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (a,), out, backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``* gain + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match width {d}")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centred = xd - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _emit("layer_norm", (x, gain, bias), out, backward)


def l2_norm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * ad / safe, 0.0),)

    return _emit("l2_norm", (a,), n if keepdims else np.squeeze(n, axis=axis), backward)


# ---------------------------------------------------------------------------
# sequence ops


def conv1d(x, kernels) -> Tensor:
    """Valid, stride-1 convolution over the second-to-last axis.

    ``x`` is ``(..., L, d_in)`` and ``kernels`` is ``(f, d_in, d_out)``; the
    output is ``(..., L - f + 1, d_out)``. No bias and no activation.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernels.shape[1]:
        raise DimensionError(f"conv1d shape mismatch: input {x.shape}, kernels {kernels.shape}")
    f, d_in, d_out = kernels.shape
    length = x.shape[-2]
    if length < f:
        raise DimensionError(f"conv1d input too short: length {length} < filter width {f}")
    n_out = length - f + 1
    xd = x.data
    if f == 1:
        cols = xd
    else:
        win = np.lib.stride_tricks.sliding_window_view(xd, f, axis=-2)  # (..., n_out, d_in, f)
        cols = np.swapaxes(win, -1, -2).reshape(xd.shape[:-2] + (n_out, f * d_in))
    kmat = kernels.data.reshape(f * d_in, d_out)
    cols2 = cols.reshape(-1, f * d_in)
    out = (cols2 @ kmat).reshape(xd.shape[:-2] + (n_out, d_out))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gk = (cols2.T @ g2).reshape(f, d_in, d_out) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(xd.shape[:-2] + (n_out, f, d_in))
            gx = np.zeros_like(xd)
            for j in range(f):
                gx[..., j:j + n_out, :] += gcols[..., j, :]
        return gx, gk

    return _emit("conv1d", (x, kernels), out, backward)


def max_pool_time(x, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max over the time axis (second to last) of ``(..., L, d)``.

    ``mask`` of shape ``(..., L)`` marks the positions allowed to win.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(mask.any(axis=-1)):
            raise DimensionError("max_pool_time slice with every position masked")
        xd = np.where(mask[..., None], xd, -np.inf)
    idx = np.argmax(xd, axis=-2)[..., None, :]
    out = np.take_along_axis(xd, idx, axis=-2)[..., 0, :]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, idx, g[..., None, :], axis=-2)
        return (gx,)

    return _emit("max_pool_time", (x,), out, backward)


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` for an integer index array of any shape."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"embedding index out of range for table with {rows} rows")
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", (table,), out, backward)


def dropout(x, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout. Identity in eval mode or at rate 0."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))

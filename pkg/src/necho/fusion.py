"""Code-centric fusion: temporal projectors, cross-modal and self-attention
transformers, the code residual, the adaptation gate and the prediction head.

All sequence tensors are ``(B, T, d)`` over the visit axis; ``mask`` is a
``(B, T)`` boolean array of real visits.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .tensor import ops
from .tensor.core import DimensionError, Tensor
from .tensor.nn import Conv1d, Dropout, LayerNorm, Linear, Module, parameter

NORM_GUARD = 1e-12


class TemporalProjector(Module):
    """Conv1D over the visit axis; width 1 keeps T unchanged with no padding."""

    def __init__(self, d: int, rng: np.random.Generator, width: int = 1):
        if width != 1 and width % 2 == 0:
            raise ValueError("projector width must be odd so the visit axis can be padded symmetrically")
        self.conv = Conv1d(width, d, d, rng)
        self._width = width

    def __call__(self, x: Tensor) -> Tensor:
        if self._width > 1:
            pad = Tensor(np.zeros(x.shape[:-2] + (self._width - 1, x.shape[-1])))
            # causal left padding: visit t only sees visits <= t
            x = ops.concat([pad, x], axis=-2)
        return self.conv(x)


def attention_mask(key_mask: np.ndarray, n_queries: int, causal: bool) -> np.ndarray:
    """Boolean ``(B, 1, Tq, Tk)`` mask of allowed query/key pairs."""
    key_mask = np.asarray(key_mask, dtype=bool)
    allowed = np.broadcast_to(key_mask[:, None, None, :],
                              (key_mask.shape[0], 1, n_queries, key_mask.shape[1]))
    if causal:
        tri = np.tril(np.ones((n_queries, key_mask.shape[1]), dtype=bool))
        allowed = allowed & tri
    return allowed


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes; returns (output, weights)."""
    d_k = q.shape[-1]
    scores = ops.mul(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(d_k))
    weights = ops.softmax(scores, axis=-1, mask=mask)
    return ops.matmul(weights, v), weights


def cross_modal_attention(h_query: Tensor, h_source: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor,
                          mask: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """Single-head cross-modal attention: queries from one stream, keys/values from another."""
    if h_query.shape[:-2] != h_source.shape[:-2]:
        raise DimensionError(f"streams disagree on batch shape: {h_query.shape} vs {h_source.shape}")
    return scaled_attention(ops.matmul(h_query, w_q), ops.matmul(h_source, w_k),
                            ops.matmul(h_source, w_v), mask)


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self._heads = heads
        self.last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        return ops.transpose(ops.reshape(x, (B, T, self._heads, d // self._heads)), (0, 2, 1, 3))

    def __call__(self, x_query: Tensor, x_source: Tensor, key_mask: np.ndarray, causal: bool) -> Tensor:
        B, Tq, d = x_query.shape
        mask = attention_mask(key_mask, Tq, causal)
        out, weights = scaled_attention(self._split(self.q(x_query)), self._split(self.k(x_source)),
                                        self._split(self.v(x_source)), mask)
        self.last_weights = weights.data
        merged = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, Tq, d))
        return self.out(merged)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, dropout: Dropout):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)
        self._dropout = dropout

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self._dropout(ops.relu(self.fc1(x))))


class CrossModalLayer(Module):
    """One layer: normalised target stream attends to the normalised code stream.

    ``z_hat = MHA(LN(z), LN(src)) + LN(z)`` then ``z = FFN(LN'(z_hat)) + LN'(z_hat)``.
    """

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator, dropout: Dropout):
        self.ln_query = LayerNorm(d)
        self.ln_source = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln_ff = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng, dropout)
        self._dropout = dropout

    def __call__(self, z: Tensor, source: Tensor, mask: np.ndarray, causal: bool) -> Tensor:
        zn = self.ln_query(z)
        z_hat = ops.add(self._dropout(self.attn(zn, self.ln_source(source), mask, causal)), zn)
        n = self.ln_ff(z_hat)
        return ops.add(self._dropout(self.ff(n)), n)


class CrossModalTransformer(Module):
    """Stack of cross-modal layers; the stream starts as the target modality."""

    def __init__(self, d: int, heads: int, layers: int, d_ff: int, rng: np.random.Generator, dropout: Dropout):
        self.layers = [CrossModalLayer(d, heads, d_ff, rng, dropout) for _ in range(layers)]

    def __call__(self, code_stream: Tensor, target_stream: Tensor, mask: np.ndarray, causal: bool = True) -> Tensor:
        z = target_stream
        for layer in self.layers:
            z = layer(z, code_stream, mask, causal)
        return z


class SelfAttentionLayer(Module):
    """Pre-norm transformer encoder layer."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator, dropout: Dropout):
        self.ln_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.ln_ff = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng, dropout)
        self._dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray, causal: bool) -> Tensor:
        n = self.ln_attn(x)
        x = ops.add(x, self._dropout(self.attn(n, n, mask, causal)))
        return ops.add(x, self._dropout(self.ff(self.ln_ff(x))))


class SelfAttentionStream(Module):
    def __init__(self, d: int, heads: int, layers: int, d_ff: int, rng: np.random.Generator, dropout: Dropout):
        self.layers = [SelfAttentionLayer(d, heads, d_ff, rng, dropout) for _ in range(layers)]

    def __call__(self, x: Tensor, mask: np.ndarray, causal: bool = True) -> Tensor:
        for layer in self.layers:
            x = layer(x, mask, causal)
        return x


def code_residual(y_code: Tensor, h_code: Tensor) -> Tensor:
    return ops.add(y_code, h_code)


def mag_combine(y_code: Tensor, displacement: Tensor, beta: Tensor) -> tuple[Tensor, Tensor]:
    """``y + alpha * H`` with ``alpha = min(|y| / |H| * beta, 1)`` per visit.

    Returns ``(combined, alpha)``. ``alpha`` is floored at 0 and forced to 0
    where ``|H|`` is below the guard, which is the continuous extension of
    ``alpha * H`` at ``H = 0``.
    """
    y_norm = ops.l2_norm(y_code, axis=-1)
    h_norm = ops.l2_norm(displacement, axis=-1)
    live = h_norm.data >= NORM_GUARD
    ratio = ops.div(ops.mul(y_norm, beta), ops.maximum(h_norm, NORM_GUARD))
    alpha = ops.mul(ops.maximum(ops.minimum(ratio, 1.0), 0.0), live.astype(float))
    return ops.add(y_code, ops.mul(alpha, displacement)), alpha


class AdaptationGate(Module):
    """Code-centric gate: a scalar gate scales the bimodal vector into a displacement."""

    def __init__(self, d: int, rng: np.random.Generator, dropout: Dropout):
        self.gate = Linear(3 * d, 1, rng)
        self.displacement = Linear(2 * d, d, rng)
        self.beta = parameter(rng.uniform(0.0, 1.0))
        self.norm = LayerNorm(d)
        self._dropout = dropout
        self.last_alpha: Optional[np.ndarray] = None
        self.last_pre_norm: Optional[np.ndarray] = None

    def __call__(self, y_code: Tensor, y_demo: Tensor, y_note: Tensor) -> Tensor:
        g = self.gate(ops.concat([y_code, y_demo, y_note], axis=-1))
        h = self.displacement(ops.mul(g, ops.concat([y_demo, y_note], axis=-1)))
        m, alpha = mag_combine(y_code, h, self.beta)
        self.last_alpha = alpha.data
        self.last_pre_norm = m.data
        return self._dropout(self.norm(m))


class ConcatFusion(Module):
    """Symmetric fallback used by the ablations: Linear over the concatenated streams."""

    def __init__(self, d: int, rng: np.random.Generator, dropout: Dropout):
        self.proj = Linear(3 * d, d, rng)
        self.norm = LayerNorm(d)
        self._dropout = dropout

    def __call__(self, y_code: Tensor, y_demo: Tensor, y_note: Tensor) -> Tensor:
        return self._dropout(self.norm(self.proj(ops.concat([y_code, y_demo, y_note], axis=-1))))


class PredictionHead(Module):
    def __init__(self, d: int, n_codes: int, rng: np.random.Generator):
        self.proj = Linear(d, n_codes, rng)

    def __call__(self, m: Tensor) -> Tensor:
        return ops.sigmoid(self.proj(m))

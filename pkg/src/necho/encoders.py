"""Per-modality feature extractors and their parent-level prediction heads.

Each encoder maps one modality of a visit to a non-negative ``d``-vector
(a linear layer followed by ReLU closes every encoder).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ops
from .tensor.core import Tensor
from .tensor.nn import Dropout, Embedding, Linear, Module, Conv1d, parameter


class CodeEncoder(Module):
    """Bag-of-codes: sum the embedding rows of the visit's codes, then Linear+ReLU."""

    def __init__(self, n_codes: int, d: int, rng: np.random.Generator, dropout: Dropout):
        self.embedding = parameter(rng.normal(0.0, 0.02, size=(n_codes, d)))
        self.proj = Linear(d, d, rng)
        self._dropout = dropout

    def __call__(self, multi_hot: np.ndarray) -> Tensor:
        # a multi-hot row times the table is exactly the sum of the selected rows
        summed = ops.matmul(Tensor(multi_hot), self.embedding)
        return self._dropout(ops.relu(self.proj(summed)))


def demo_width(d: int) -> int:
    return max(1, int(round(d / 6)))


class DemographicsEncoder(Module):
    """One table per attribute; lookups are concatenated and projected."""

    def __init__(self, sizes: Sequence[int], d: int, rng: np.random.Generator, dropout: Dropout):
        width = demo_width(d)
        self.tables = [Embedding(n, width, rng) for n in sizes]
        self.proj = Linear(width * len(sizes), d, rng)
        self._sizes = tuple(sizes)
        self._dropout = dropout

    def __call__(self, demo: np.ndarray) -> Tensor:
        demo = np.asarray(demo)
        if demo.shape[-1] != len(self._sizes):
            raise ValueError(f"expected {len(self._sizes)} demographic attributes, got {demo.shape[-1]}")
        for k, n in enumerate(self._sizes):
            col = demo[..., k]
            if col.size and (col.min() < 0 or col.max() >= n):
                raise IndexError(f"demographic attribute {k} index out of range [0, {n})")
        parts = [table(demo[..., k]) for k, table in enumerate(self.tables)]
        return self._dropout(ops.relu(self.proj(ops.concat(parts, axis=-1))))


def window_mask(note_mask: np.ndarray, width: int) -> np.ndarray:
    """Conv windows that lie fully inside the real tokens.

    A note shorter than the filter still gets its first window so every row
    has a candidate for the max.
    """
    lengths = note_mask.sum(axis=-1)
    starts = np.arange(note_mask.shape[-1] - width + 1)
    valid = starts[None, :] + width <= lengths[:, None]
    valid[:, 0] = True
    return valid


class NoteEncoder(Module):
    """Word embeddings, parallel conv filters with ReLU and max-over-time, Linear+ReLU."""

    def __init__(self, vocab: int, d_word: int, d_note: int, d: int, filters: Sequence[int],
                 rng: np.random.Generator, dropout: Dropout, freeze_words: bool = False):
        self.words = Embedding(vocab, d_word, rng)
        if freeze_words:
            self.words.weight.requires_grad = False
        self.convs = {str(f): Conv1d(f, d_word, d_note, rng) for f in filters}
        self.proj = Linear(d_note * len(filters), d, rng)
        self._filters = tuple(filters)
        self._dropout = dropout

    def pooled(self, notes: np.ndarray, note_mask: np.ndarray) -> Tensor:
        """Concatenated max-pooled filter responses, ``(n, len(filters) * d_note)``."""
        if notes.shape[-1] < max(self._filters):
            raise ValueError(f"note length {notes.shape[-1]} shorter than widest filter {max(self._filters)}")
        emb = self.words(notes)
        feats = []
        for f in self._filters:
            response = ops.relu(self.convs[str(f)](emb))
            feats.append(ops.max_pool_time(response, window_mask(note_mask, f)))
        return ops.concat(feats, axis=-1)

    def __call__(self, notes: np.ndarray, note_mask: np.ndarray) -> Tensor:
        return self._dropout(ops.relu(self.proj(self.pooled(notes, note_mask))))


class HierarchyHead(Module):
    """Sigmoid(Linear) from one modality's features to the parent label space."""

    def __init__(self, d: int, n_parents: int, rng: np.random.Generator):
        self.proj = Linear(d, n_parents, rng)

    def __call__(self, features: Tensor) -> Tensor:
        return ops.sigmoid(self.proj(features))


def scatter_visits(rows: Tensor, slots: np.ndarray) -> Tensor:
    """Place per-real-visit rows into a padded ``(B, T, d)`` grid.

    ``slots`` holds a row index per grid cell; ``len(rows)`` means "padding"
    and reads a zero row.
    """
    zero = Tensor(np.zeros((1, rows.shape[-1])))
    return ops.embedding(ops.concat([rows, zero], axis=0), slots)

"""Top-k accuracy and the reference rankings it is compared against."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


def ranking(scores: np.ndarray) -> np.ndarray:
    """Label indices by descending score; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores, dtype=float), axis=-1, kind="stable")


def topk_accuracy(scores: np.ndarray, truth: Iterable[int], k: int) -> float:
    """``|top-k ∩ truth| / min(k, |truth|)`` for one visit."""
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = set(int(c) for c in truth)
    if not truth:
        raise ValueError("top-k accuracy is undefined for an empty truth set")
    top = ranking(scores)[:k]
    hits = sum(1 for c in top if int(c) in truth)
    return hits / min(k, len(truth))


def accuracy_at_ks(scores: np.ndarray, truths: Sequence[Iterable[int]], ks: Sequence[int]) -> dict:
    """Visit-averaged Acc@k for each k. Rows with empty truth are skipped.

    ``scores`` is ``(n_visits, |C|)``; ``truths`` holds one code collection per row.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or len(truths) != scores.shape[0]:
        raise ValueError(f"expected one truth set per score row, got {len(truths)} for {scores.shape}")
    ks = tuple(int(k) for k in ks)
    if any(k < 1 for k in ks):
        raise ValueError("k must be >= 1")
    kmax = max(ks)
    order = ranking(scores)[:, :kmax]
    sums = dict.fromkeys(ks, 0.0)
    n = 0
    for row, truth in zip(order, truths):
        truth = set(int(c) for c in truth)
        if not truth:
            continue
        n += 1
        hit = np.fromiter((int(c) in truth for c in row), dtype=bool, count=len(row))
        cum = np.cumsum(hit)
        for k in ks:
            sums[k] += cum[min(k, len(row)) - 1] / min(k, len(truth))
    return {k: (sums[k] / n if n else float("nan")) for k in ks}


def random_ranking_accuracy(truths: Sequence[Iterable[int]], n_labels: int, ks: Sequence[int]) -> dict:
    """Expected Acc@k of a uniformly random ranking.

    Under a random permutation the top k holds ``k |truth| / |C|`` true codes on average.
    """
    sizes = np.array([len(set(t)) for t in truths if len(set(t))], dtype=float)
    out = {}
    for k in ks:
        kk = min(k, n_labels)
        out[int(k)] = float(np.mean(kk * sizes / n_labels / np.minimum(k, sizes))) if sizes.size else float("nan")
    return out


def random_ranking_accuracy_mc(truths: Sequence[Iterable[int]], n_labels: int, ks: Sequence[int],
                               trials: int = 200, seed: int = 0) -> dict:
    """Monte-Carlo estimate of the same quantity, for cross-checking."""
    rng = np.random.default_rng(seed)
    truths = [t for t in truths if len(set(t))]
    acc = dict.fromkeys((int(k) for k in ks), 0.0)
    for _ in range(trials):
        scores = rng.random((len(truths), n_labels))
        for k, v in accuracy_at_ks(scores, truths, ks).items():
            acc[k] += v / trials
    return acc


def label_frequencies(code_sets: Iterable[Iterable[int]], n_labels: int) -> np.ndarray:
    counts = np.zeros(n_labels)
    for codes in code_sets:
        for c in set(codes):
            counts[int(c)] += 1
    return counts


def repeat_previous_scores(previous: Sequence[Iterable[int]], frequencies: np.ndarray) -> np.ndarray:
    """Scores that rank the current visit's codes first, then the rest by training frequency."""
    freq = np.asarray(frequencies, dtype=float)
    scale = 0.5 / (freq.max() + 1.0)  # frequencies only order codes inside each tier
    scores = np.tile(freq * scale, (len(previous), 1))
    for i, codes in enumerate(previous):
        scores[i, list(set(int(c) for c in codes))] += 1.0
    return scores

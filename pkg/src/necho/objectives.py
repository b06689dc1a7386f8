"""Training objectives: next-visit cross-entropy, code-anchored bimodal
contrastive losses, parent-level hierarchical regularisation, and their
weighted total."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .tensor import ops
from .tensor.core import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-12
CONTRASTIVE_PAIRS = (("C", "H"), ("C", "W"))


class LossConfigError(ValueError):
    pass


@dataclass
class LossWeights:
    ce: float = 1.0
    bi_con: float = 1.0
    hrchy: float = 0.1
    tau: float = 0.1
    alpha_con: float = 0.25

    def validate(self) -> None:
        for name in ("ce", "bi_con", "hrchy"):
            if getattr(self, name) < 0:
                raise LossConfigError(f"loss weight {name} must be non-negative, got {getattr(self, name)}")
        if self.tau <= 0:
            raise LossConfigError("temperature tau must be positive")
        if not 0.0 <= self.alpha_con <= 1.0:
            raise LossConfigError("alpha_con must lie in [0, 1]")


def multilabel_ce(probs: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Binary cross-entropy summed over labels, averaged over each patient's
    real visits, then over patients.

    ``probs`` and ``targets`` are ``(B, T, K)``; ``mask`` is ``(B, T)``.
    """
    targets = np.asarray(targets, dtype=float)
    if probs.shape != targets.shape:
        raise ValueError(f"prediction shape {probs.shape} != target shape {targets.shape}")
    if probs.ndim == 2:  # a single patient
        probs = ops.reshape(probs, (1,) + probs.shape)
        targets = targets[None]
        mask = None if mask is None else np.asarray(mask)[None]
    B, T, _ = probs.shape
    mask = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    patients = counts > 0
    if not patients.any():
        log.warning("multilabel_ce on a fully masked batch; returning 0")
        return Tensor(0.0)
    p = ops.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    nll = ops.neg(ops.add(ops.mul(ops.log(p), targets), ops.mul(ops.log(ops.sub(1.0, p)), 1.0 - targets)))
    per_visit = ops.sum(nll, axis=-1)  # (B, T)
    weights = np.where(mask, 1.0 / np.maximum(counts, 1)[:, None], 0.0) / patients.sum()
    return ops.sum(ops.mul(per_visit, weights))


def _unit_rows(h: Tensor) -> Tensor:
    # zero rows stay zero, so their cosine similarity is 0
    return ops.div(h, ops.maximum(ops.l2_norm(h, axis=-1), PROB_EPS))


def bimodal_contrastive(h1: Tensor, h2: Tensor, tau: float = 0.1, alpha_con: float = 0.25) -> Tensor:
    """Two-direction InfoNCE over cosine similarities of matched rows.

    ``alpha_con * l(1->2) + (1 - alpha_con) * l(2->1)`` averaged over the N rows.
    """
    if h1.shape != h2.shape or h1.ndim != 2:
        raise ValueError(f"contrastive inputs must both be (N, d); got {h1.shape} and {h2.shape}")
    n = h1.shape[0]
    if n < 1:
        raise ValueError("contrastive loss needs at least one pair")
    sim = ops.mul(ops.matmul(_unit_rows(h1), ops.swap_last(_unit_rows(h2))), 1.0 / tau)
    eye = np.eye(n)
    l12 = ops.neg(ops.sum(ops.mul(ops.log_softmax(sim, axis=1), eye), axis=1))
    l21 = ops.neg(ops.sum(ops.mul(ops.log_softmax(ops.swap_last(sim), axis=1), eye), axis=1))
    return ops.mean(ops.add(ops.mul(l12, alpha_con), ops.mul(l21, 1.0 - alpha_con)))


def contrastive_total(reps: Mapping[str, Tensor], tau: float = 0.1, alpha_con: float = 0.25) -> Tensor:
    """Sum of the code-anchored pair losses for the modalities present."""
    terms = [bimodal_contrastive(reps[a], reps[b], tau, alpha_con)
             for a, b in CONTRASTIVE_PAIRS if a in reps and b in reps]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return total


def hierarchical_loss(o_hat: Mapping[str, Tensor], o: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Sum over modalities of the parent-space cross-entropy."""
    total = None
    for m in sorted(o_hat):
        term = multilabel_ce(o_hat[m], o, mask)
        total = term if total is None else ops.add(total, term)
    return Tensor(0.0) if total is None else total


def total_loss(parts: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the ``ce``, ``bi_con`` and ``hrchy`` parts.

    A zero weight drops its term entirely (the part may then be absent).
    """
    weights.validate()
    total = None
    for name in ("ce", "bi_con", "hrchy"):
        w = getattr(weights, name)
        if w == 0:
            continue
        term = parts[name] if w == 1 else ops.mul(parts[name], w)
        total = term if total is None else ops.add(total, term)
    return Tensor(0.0) if total is None else total


def compute_losses(out, batch, weights: LossWeights) -> tuple[Tensor, dict]:
    """Evaluate every weighted part for a forward output; returns (total, breakdown floats)."""
    parts = {}
    if weights.ce:
        parts["ce"] = multilabel_ce(out.y_hat, batch.y, batch.mask)
    if weights.bi_con:
        parts["bi_con"] = contrastive_total(out.reps, weights.tau, weights.alpha_con)
    if weights.hrchy:
        parts["hrchy"] = hierarchical_loss(out.o_hat, batch.o, batch.mask)
    total = total_loss(parts, weights)
    breakdown = {f"L_{k}": (float(parts[k].data) if k in parts else 0.0) for k in ("ce", "bi_con", "hrchy")}
    breakdown["L_total"] = float(total.data)
    return total, breakdown

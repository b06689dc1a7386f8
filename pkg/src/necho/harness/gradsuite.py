"""Finite-difference checks of every primitive and of the whole network on a toy problem."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..data import PatientRecord, Visit, collate
from ..model import ModelConfig, build_model
from ..objectives import LossWeights, compute_losses
from ..ontology import default_ontology
from ..tensor import ops
from ..tensor.core import Tensor
from ..tensor.gradcheck import GradCheckReport, grad_check_many

TOY = {"T": 2, "d": 8, "n_codes": 6, "n_parents": 2, "vocab": 10}


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _away_from_zero(rng, shape, low=0.1):
    """Entries with magnitude in [low, 1): keeps kinked primitives off their kinks."""
    return rng.uniform(low, 1.0, shape) * rng.choice([-1.0, 1.0], shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    # a fixed random projection makes every output coordinate matter
    return ops.sum(ops.mul(out, w))


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict]]:
    rng = np.random.default_rng(seed)
    t = lambda *shape: Tensor(rng.normal(size=shape), requires_grad=True)  # noqa: E731
    w = lambda *shape: rng.normal(size=shape)  # noqa: E731
    cases = {}

    a, b = t(3, 4), t(4)
    wa = w(3, 4)
    cases["add"] = (lambda: _weighted(ops.add(a, b), wa), {"a": a, "b": b})
    cases["sub"] = (lambda: _weighted(ops.sub(a, b), wa), {"a": a, "b": b})
    cases["mul"] = (lambda: _weighted(ops.mul(a, b), wa), {"a": a, "b": b})
    den = Tensor(_away_from_zero(rng, (4,), 0.5), requires_grad=True)
    cases["div"] = (lambda: _weighted(ops.div(a, den), wa), {"a": a, "den": den})
    cases["neg"] = (lambda: _weighted(ops.neg(a), wa), {"a": a})
    cases["exp"] = (lambda: _weighted(ops.exp(a), wa), {"a": a})
    pos = Tensor(rng.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
    cases["log"] = (lambda: _weighted(ops.log(pos), wa), {"x": pos})
    kinked = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    cases["minimum"] = (lambda: _weighted(ops.minimum(kinked, 0.0), wa), {"x": kinked})
    cases["maximum"] = (lambda: _weighted(ops.maximum(kinked, 0.0), wa), {"x": kinked})
    straddle = Tensor(rng.choice([-0.9, -0.3, 0.2, 0.8], (3, 4)), requires_grad=True)
    cases["clip"] = (lambda: _weighted(ops.clip(straddle, -0.5, 0.5), wa), {"x": straddle})
    cases["relu"] = (lambda: _weighted(ops.relu(kinked), wa), {"x": kinked})
    cases["sigmoid"] = (lambda: _weighted(ops.sigmoid(a), wa), {"a": a})
    w1 = w(4)
    cases["sum"] = (lambda: _weighted(ops.sum(a, axis=0), w1), {"a": a})
    w2 = w(3, 1)
    cases["mean"] = (lambda: _weighted(ops.mean(a, axis=1, keepdims=True), w2), {"a": a})
    w34 = w(4, 3)
    cases["reshape"] = (lambda: _weighted(ops.reshape(a, (4, 3)), w34), {"a": a})
    c3 = t(2, 3, 4)
    w243 = w(2, 4, 3)
    cases["transpose"] = (lambda: _weighted(ops.transpose(c3, (0, 2, 1)), w243), {"x": c3})
    cases["swap_last"] = (lambda: _weighted(ops.swap_last(c3), w243), {"x": c3})
    c2 = t(3, 2)
    w36 = w(3, 6)
    cases["concat"] = (lambda: _weighted(ops.concat([a, c2], axis=1), w36), {"a": a, "b": c2})
    m1, m2 = t(2, 3, 4), t(4, 5)
    m3 = t(2, 4, 3)
    w3 = w(2, 3, 5)
    cases["matmul"] = (lambda: _weighted(ops.matmul(m1, m2), w3), {"a": m1, "b": m2})
    w4 = w(2, 3, 3)
    cases["matmul_batched"] = (lambda: _weighted(ops.matmul(m1, m3), w4), {"a": m1, "b": m3})
    mask = np.array([[True, True, False, True]] * 3)
    ws = w(3, 4)
    cases["softmax"] = (lambda: _weighted(ops.softmax(a, axis=-1), ws), {"a": a})
    cases["softmax_masked"] = (lambda: _weighted(ops.softmax(a, axis=-1, mask=mask), ws), {"a": a})
    cases["log_softmax"] = (lambda: _weighted(ops.log_softmax(a, axis=-1), ws), {"a": a})
    x_ln, gain, bias = t(3, 6), t(6), t(6)
    w_ln = w(3, 6)
    cases["layer_norm"] = (lambda: _weighted(ops.layer_norm(x_ln, gain, bias), w_ln),
                           {"x": x_ln, "gain": gain, "bias": bias})
    w5 = w(3, 1)
    cases["l2_norm"] = (lambda: _weighted(ops.l2_norm(a, axis=-1), w5), {"a": a})
    xc, kc = t(2, 6, 3), t(3, 3, 4)
    w6 = w(2, 4, 4)
    cases["conv1d"] = (lambda: _weighted(ops.conv1d(xc, kc), w6), {"x": xc, "kernels": kc})
    xp = t(2, 5, 3)
    pool_mask = np.array([[True] * 5, [True, True, True, False, False]])
    w7 = w(2, 3)
    cases["max_pool_time"] = (lambda: _weighted(ops.max_pool_time(xp, pool_mask), w7), {"x": xp})
    table = t(5, 3)
    idx = np.array([[0, 3, 3], [4, 1, 0]])
    w8 = w(2, 3, 3)
    cases["embedding"] = (lambda: _weighted(ops.embedding(table, idx), w8), {"table": table})
    wd = w(3, 4)
    cases["dropout"] = (lambda: _weighted(ops.dropout(a, 0.5, np.random.default_rng(7), True), wd), {"a": a})
    return cases


def toy_batch(seed: int = 0):
    """Two patients with three visits each (two input positions), on a 2x3 ontology."""
    rng = np.random.default_rng(seed)
    ont = default_ontology(TOY["n_parents"], TOY["n_codes"] // TOY["n_parents"])
    records = []
    for p in range(2):
        visits = []
        for _ in range(TOY["T"] + 1):
            codes = tuple(sorted(rng.choice(TOY["n_codes"], size=int(rng.integers(1, 4)), replace=False).tolist()))
            demo = (int(rng.integers(73)), int(rng.integers(2)), int(rng.integers(3)), int(rng.integers(8)),
                    int(rng.integers(16)), int(rng.integers(5)))
            note = tuple(int(x) for x in rng.integers(2, TOY["vocab"], size=int(rng.integers(4, 8))))
            visits.append(Visit(codes, demo, note))
        records.append(PatientRecord(f"toy{p}", tuple(visits)))
    return collate(records, ont), ont


def toy_model(seed: int = 0, **overrides):
    settings = dict(d=TOY["d"], d_word=4, d_note=6, filters=(2, 3), heads=2, layers=1, d_ff=TOY["d"], dropout=0.0)
    cfg = ModelConfig(**{**settings, **overrides})
    model = build_model(cfg, TOY["n_codes"], TOY["n_parents"], TOY["vocab"], seed=seed)
    model.eval()
    return model


@contextlib.contextmanager
def _record_kink_margin():
    """Track how close every piecewise op came to switching branch during a forward pass."""
    margins = []
    orig = {name: getattr(ops, name) for name in ("relu", "maximum", "minimum", "max_pool_time")}

    def relu(a):
        margins.append(float(np.min(np.abs(a.data))))
        return orig["relu"](a)

    def clamp(name):
        def wrapped(a, c):
            margins.append(float(np.min(np.abs(a.data - c))))
            return orig[name](a, c)
        return wrapped

    def max_pool_time(x, mask=None):
        xd = x.data if mask is None else np.where(np.asarray(mask)[..., None], x.data, -np.inf)
        # windows tied exactly with the winner hold identical tokens and stay tied
        top = xd.max(axis=-2, keepdims=True)
        runner_up = np.where(xd == top, -np.inf, xd).max(axis=-2, keepdims=True)
        gap = top - runner_up
        margins.append(float(np.min(gap[np.isfinite(gap)])) if np.isfinite(gap).any() else np.inf)
        return orig["max_pool_time"](x, mask)

    ops.relu, ops.maximum, ops.minimum, ops.max_pool_time = relu, clamp("maximum"), clamp("minimum"), max_pool_time
    try:
        yield margins
    finally:
        for name, fn in orig.items():
            setattr(ops, name, fn)


def kink_margin(model, batch) -> float:
    """Smallest distance of any ReLU input, clamp input or max-pool runner-up from a branch switch."""
    with _record_kink_margin() as margins:
        model(batch)
    return min(margins)


def network_case(seed: int = 0, margin: float = 1e-3, scale: float = 0.5,
                 max_tries: int = 50) -> tuple[Callable[[], Tensor], dict]:
    """Toy network and batch, with the point chosen at least ``margin`` away from every kink.

    Parameters are redrawn from ``N(0, scale^2)``: at the small initial scale
    many ReLU inputs sit within 1e-5 of zero. Central differences straddling a
    ReLU or clamp switch measure a mix of two one-sided slopes, so candidate
    points (by successive seeds) closer than ``margin`` to a switch are skipped.
    """
    for s in range(seed, seed + max_tries):
        batch, _ = toy_batch(s)
        model = toy_model(s)
        rng = np.random.default_rng(np.random.SeedSequence([s, 7]))
        for _, p in model.named_parameters():
            p.data[...] = rng.normal(0.0, scale, p.shape)
        if kink_margin(model, batch) >= margin:
            break
    else:
        raise RuntimeError(f"no toy point with kink margin >= {margin} in {max_tries} seeds")
    weights = LossWeights()
    return (lambda: compute_losses(model(batch), batch, weights)[0]), dict(model.named_parameters())


def run_gradient_suite(h: float = 1e-5, tol: float = 1e-4, seed: int = 0,
                       max_coords: int | None = None) -> list[CheckResult]:
    results = []
    for name, (f, tensors) in primitive_cases(seed).items():
        results.append(CheckResult(name, grad_check_many(f, tensors, h=h, tol=tol)))
    f, tensors = network_case(seed)
    results.append(CheckResult("necho_total_loss", grad_check_many(f, tensors, h=h, tol=tol,
                                                                   max_coords=max_coords, seed=seed)))
    return results

"""Central finite-difference checks against the tape's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .core import NumericError, Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[tuple]  # (tensor name, flat index)
    n_checked: int
    tol: float
    per_tensor: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e} "
                f"checked={self.n_checked} worst={self.worst}")


def _scalar(out: Tensor) -> float:
    value = float(np.asarray(out.data).reshape(-1)[0])
    return value


def grad_check_many(f: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-5,
                    tol: float = 1e-4, floor: float = 1e-3, max_coords: Optional[int] = None,
                    seed: int = 0) -> GradCheckReport:
    """Compare backward() with central differences for every tensor in ``tensors``.

    ``f`` is re-evaluated with the tensors perturbed in place, so it must read
    them at call time and be deterministic (dropout off). The discrepancy for a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    round-off on near-zero gradients from reading as a relative blow-up.
    ``max_coords`` caps coordinates per tensor (sampled with ``seed``).
    """
    if h <= 0 or tol <= 0:
        raise ValueError("h and tol must be positive")
    for t in tensors.values():
        t.requires_grad = True
        if t.grad is not None:
            t.grad[...] = 0.0
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the check point")
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    worst_err, worst_at, count = 0.0, None, 0
    per_tensor = {}
    for name, t in tensors.items():
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        tensor_worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(f())
            flat[i] = orig - h
            down = _scalar(f())
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
                raise NumericError(f"NaN/Inf in gradient check of {name!r} at flat index {int(i)}")
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            count += 1
            tensor_worst = max(tensor_worst, err)
            if err > worst_err:
                worst_err, worst_at = err, (name, int(i))
        per_tensor[name] = tensor_worst
    return GradCheckReport(worst_err, worst_at, count, tol, per_tensor)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-4,
               floor: float = 1e-3) -> GradCheckReport:
    """Single-input form: ``f(x)`` must return a scalar tensor."""
    return grad_check_many(lambda: f(x), {"x": x}, h=h, tol=tol, floor=floor)

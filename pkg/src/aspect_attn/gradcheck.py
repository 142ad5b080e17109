"""Analytic-versus-central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, NonFiniteError
from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative error between analytic and numeric gradients."""

    max_rel_error: dict[str, float]
    tol: float
    h: float
    worst: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max_rel_error={self.max_error:.3e} (tol {self.tol:g})"]
        lines += [f"  {k}: {v:.3e}" for k, v in self.max_rel_error.items()]
        return "\n".join(lines)


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise DomainError(f"grad_check needs a scalar function, got shape {out.shape}")
    v = float(out.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("function value is not finite")
    return v


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """
    Compare backward-pass gradients with central finite differences.

    ``f`` is re-evaluated with each parameter entry nudged by ``+h`` and
    ``-h``; it must be deterministic (dropout off or a freshly seeded Rng
    inside ``f``). The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``, so entries whose true gradient is
    below ``floor`` are judged on absolute error instead.
    """
    if h <= 0:
        raise DomainError(f"step h must be positive, got {h}")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()

    out = f()
    _scalar(out)
    out.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    errors: dict[str, float] = {}
    worst: dict[str, tuple[int, ...]] = {}
    with no_grad():
        for name, p in params.items():
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(f())
                flat[i] = orig - h
                fm = _scalar(f())
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
            a = analytic[name]
            rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            idx = int(np.argmax(rel))
            errors[name] = float(rel.reshape(-1)[idx])
            worst[name] = tuple(int(i) for i in np.unravel_index(idx, p.shape)) if p.ndim else ()
    return GradCheckReport(errors, tol, h, worst)

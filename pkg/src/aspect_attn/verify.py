"""
Randomised gradient suite: every primitive and every model variant on tiny
shapes, checked against central finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as tn
from .encoder import AspectFeatureSet
from .gradcheck import grad_check
from .model import Model, ModelConfig, batch_loss
from .tensor import Rng, Tensor

Case = tuple[Callable[[], Tensor], dict[str, Tensor]]


def _t(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def primitive_cases(seed: int) -> dict[str, Case]:
    """A scalar-valued probe around each primitive, with random shapes and weights."""
    g = np.random.default_rng(seed)
    m, p, n = (int(v) for v in g.integers(1, 5, 3))
    cases: dict[str, Case] = {}

    def probe(shape):
        # random linear read-out so every output entry matters
        return Tensor(g.normal(size=shape))

    a, b = _t(g, m, p), _t(g, p, n)
    r = probe((m, n))
    cases["matmul"] = (lambda: tn.total(tn.mul(tn.matmul(a, b), r)), {"a": a, "b": b})

    x = _t(g, m, n)
    axis = int(g.integers(0, 2))
    r2 = probe((m, n))
    cases["softmax"] = (lambda: tn.total(tn.mul(tn.softmax(x, axis), r2)), {"x": x})

    xl = _t(g, m, n + 1)
    gam, bet = _t(g, n + 1), _t(g, n + 1)
    r3 = probe((m, n + 1))
    cases["layer_norm"] = (lambda: tn.total(tn.mul(tn.layer_norm(xl, gam, bet), r3)),
                           {"x": xl, "gamma": gam, "beta": bet})

    xd = _t(g, m, n)
    r4 = probe((m, n))
    # fresh Rng per call freezes the mask across finite-difference evaluations
    cases["dropout"] = (lambda: tn.total(tn.mul(tn.dropout(xd, 0.3, Rng(seed), True), r4)), {"x": xd})

    xi, w, bias = _t(g, m, p), _t(g, p, n), _t(g, n)
    r5 = probe((m, n))
    cases["linear"] = (lambda: tn.total(tn.mul(tn.linear(xi, w, bias), r5)), {"x": xi, "w": w, "b": bias})

    xs = _t(g, m + 1, n)
    r6 = probe((n,))
    cases["mean_pool_time"] = (lambda: tn.total(tn.mul(tn.mean_pool_time(xs), r6)), {"x": xs})

    logits = _t(g, m + 1, 2)
    labels = g.integers(0, 2, m + 1)
    cases["cross_entropy"] = (lambda: tn.cross_entropy(logits, labels), {"logits": logits})

    xr = _t(g, m, n)
    xr.data += np.sign(xr.data) * 0.1  # keep away from the kink
    r7 = probe((m, n))
    cases["relu"] = (lambda: tn.total(tn.mul(tn.relu(xr), r7)), {"x": xr})

    xt, vv = _t(g, p), _t(g, n)
    r8 = probe((m, p + n))
    cases["repeat_concat_transpose"] = (
        lambda: tn.total(tn.mul(tn.transpose(tn.repeat_rows(tn.concat([xt, vv]), m)), tn.transpose(r8))),
        {"x": xt, "v": vv})
    return cases


def tiny_model_case(variant: str, seed: int, T: int = 3, D: int = 4, K: int = 4, f_k: int = 2,
                    h1: int = 2, h2: int = 3, n_samples: int = 2) -> Case:
    """Full forward + mean cross-entropy of a tiny model, dropout off."""
    g = np.random.default_rng(10_000 + seed)
    aspects = [(f"a{k}", f_k) for k in range(K)]
    cfg = ModelConfig(variant=variant, d=D, aspects=aspects, h1=h1, h2=h2, dropout=0.1, seed=seed)
    model = Model(cfg)
    # gamma/beta start at 1/0; randomise so their gradients are exercised off the init point
    for name, p in model.named_parameters().items():
        if ".ln" in name:
            p.data[...] = g.normal(1.0 if name.endswith("gamma") else 0.0, 0.5, p.shape)
    batch = [(g.normal(size=(int(g.integers(1, T + 1)), D)),
              AspectFeatureSet([a for a, _ in aspects], [g.normal(size=f_k) for _ in aspects]),
              i % 2) for i in range(n_samples)]
    return (lambda: batch_loss(model, batch, None, training=False)), model.named_parameters()


@dataclass
class SuiteResult:
    tol: float
    rows: list[tuple[str, int, float]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def worst(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for name, _, err in self.rows:
            out[name] = max(out.get(name, 0.0), err)
        return out

    @property
    def passed(self) -> bool:
        return all(err < self.tol for _, _, err in self.rows)

    def summary(self) -> str:
        lines = [f"{name:<26} worst rel err {err:.2e}  {'ok' if err < self.tol else 'FAIL'}"
                 for name, err in self.worst.items()]
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: {len(self.rows)} checks in {self.seconds:.1f}s (tol {self.tol:g})")
        return "\n".join(lines)


def run_gradient_suite(seeds: Iterable[int], tol: float = 1e-4, variants=("m1", "m2", "m3", "m4"),
                       primitives: bool = True) -> SuiteResult:
    res = SuiteResult(tol)
    start = time.perf_counter()
    for seed in seeds:
        if primitives:
            for name, (f, params) in primitive_cases(seed).items():
                res.rows.append((name, seed, grad_check(f, params, tol=tol).max_error))
        for v in variants:
            f, params = tiny_model_case(v, seed)
            res.rows.append((f"model_{v}", seed, grad_check(f, params, tol=tol).max_error))
    res.seconds = time.perf_counter() - start
    return res

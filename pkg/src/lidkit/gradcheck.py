"""Randomized analytic-vs-numeric gradient checks for every differentiable objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from lidkit.backend import multinomial_objective
from lidkit.fusion import cllr_objective
from lidkit.pooling import (AamParams, AttentiveStatsParams, GmhaParams, GradCheckResult, MhaParams,
                            _pool_op, aam_loss, aam_loss_backward, attentive_stats_pool,
                            attentive_stats_pool_backward, gmha_pool, gmha_pool_backward,
                            grad_check_detailed, mha_pool, mha_pool_backward)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-6


def scalar_op(fun: Callable[[np.ndarray], tuple[float, np.ndarray]]):
    """forward/backward closures for a ``params -> (value, grad)`` objective."""

    def forward(inp):
        return np.array([fun(inp["params"])[0]])

    def backward(inp, g):
        return {"params": float(g[0]) * fun(inp["params"])[1]}

    return forward, backward


def _multinomial_case(rng) -> GradCheckResult:
    n, p, k = int(rng.integers(5, 30)), int(rng.integers(2, 8)), int(rng.integers(2, 7))
    x = rng.normal(size=(n, p))
    y = rng.integers(0, k, n)
    w = rng.uniform(0.2, 3.0, n)
    lam = float(rng.choice([0.0, 1e-4, 0.1]))
    f, b = scalar_op(lambda q: multinomial_objective(q, x, y, w, lam, k))
    return grad_check_detailed(f, b, {"params": rng.normal(size=k * p + k)}, DEFAULT_STEP, rng=rng)


def _cllr_case(rng) -> GradCheckResult:
    s, n, k = int(rng.integers(1, 5)), int(rng.integers(10, 40)), int(rng.integers(2, 7))
    stack = rng.normal(0, 2, (s, n, k))
    y = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    f, b = scalar_op(lambda q: cllr_objective(q, stack, y))
    return grad_check_detailed(f, b, {"params": rng.normal(0, 0.7, s + k)}, DEFAULT_STEP, rng=rng)


def _frames(rng):
    return rng.normal(size=(int(rng.integers(4, 16)), int(rng.integers(2, 7))))


def _attentive_case(rng) -> GradCheckResult:
    x = _frames(rng)
    params = AttentiveStatsParams.random(x.shape[1], n_att=int(rng.integers(2, 6)), rng=rng, scale=1.0)
    f, b, inp = _pool_op(attentive_stats_pool, attentive_stats_pool_backward, params)
    inp["x"] = x
    return grad_check_detailed(f, b, inp, DEFAULT_STEP, rng=rng)


def _mha_case(rng) -> GradCheckResult:
    x = _frames(rng)
    params = MhaParams.random(x.shape[1], n_att=int(rng.integers(2, 6)), n_heads=int(rng.integers(1, 4)),
                              rng=rng, scale=1.0)
    f, b, inp = _pool_op(mha_pool, mha_pool_backward, params)
    inp["x"] = x
    return grad_check_detailed(f, b, inp, DEFAULT_STEP, rng=rng)


def _gmha_case(rng) -> GradCheckResult:
    x = _frames(rng)
    params = GmhaParams.random(x.shape[1], n_att=int(rng.integers(2, 6)), n_heads=int(rng.integers(1, 4)),
                               n_global=int(rng.integers(2, 6)), rng=rng, scale=1.0)
    f, b, inp = _pool_op(gmha_pool, gmha_pool_backward, params)
    inp["x"] = x
    return grad_check_detailed(f, b, inp, DEFAULT_STEP, rng=rng)


def _aam_case(rng) -> GradCheckResult:
    d, k = int(rng.integers(2, 10)), int(rng.integers(2, 8))
    params = AamParams(class_weights=rng.normal(size=(k, d)), margin=float(rng.uniform(0.0, 0.5)),
                       scale=float(rng.uniform(5.0, 30.0)))
    label = int(rng.integers(k))

    def forward(inp):
        return np.array([aam_loss(inp["x"], label, params.with_arrays(class_weights=inp["class_weights"]))])

    def backward(inp, g):
        dx, dp = aam_loss_backward(inp["x"], label, params.with_arrays(class_weights=inp["class_weights"]),
                                   float(g[0]))
        return {"x": dx, "class_weights": dp.class_weights}

    inputs = {"x": rng.normal(size=d), "class_weights": params.class_weights}
    return grad_check_detailed(forward, backward, inputs, DEFAULT_STEP, rng=rng)


CASES = {
    "multinomial": _multinomial_case,
    "cllr_fusion": _cllr_case,
    "attentive_stats": _attentive_case,
    "mha": _mha_case,
    "gmha": _gmha_case,
    "aam": _aam_case,
}


@dataclass(frozen=True)
class CheckSummary:
    name: str
    instances: int
    max_rel_error: float
    max_rel_error_strict: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "instances": self.instances, "max_rel_error": self.max_rel_error,
                "max_rel_error_strict": self.max_rel_error_strict, "passed": self.passed}


def run_gradchecks(n_instances: int = 20, seed: int = 0, tol: float = DEFAULT_TOL,
                   names=None) -> list[CheckSummary]:
    """Check each objective on ``n_instances`` random instances."""
    out = []
    for i, name in enumerate(names or CASES):
        rng = np.random.default_rng([seed, i])
        results = [CASES[name](rng) for _ in range(n_instances)]
        worst = max(r.max_rel_error for r in results)
        out.append(CheckSummary(name=name, instances=n_instances, max_rel_error=worst,
                                max_rel_error_strict=max(r.max_rel_error_strict for r in results),
                                passed=worst < tol))
    return out

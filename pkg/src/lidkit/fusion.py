"""Linear score calibration and fusion trained under multiclass Cllr.

    fused[t, k] = sum_s alpha[s] * scores_s[t, k] + beta[k]

One scale per system and one offset per language. The parameters are fit
on development data by minimizing the balanced multiclass Cllr with
L-BFGS, starting from alpha = 1/S, beta = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from lidkit.data import LanguageList, LidError, ScoreMatrix, TrialLabels, align
from lidkit.metrics import LOG2, POSTERIOR_FLOOR, log_posteriors
from lidkit.optim import OptimizerConfig, OptimizeResult, lbfgs_minimize


@dataclass(frozen=True, eq=False)
class FusionModel:
    alphas: np.ndarray
    betas: np.ndarray
    languages: LanguageList

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=np.float64).ravel()
        betas = np.array(self.betas, dtype=np.float64).ravel()
        languages = self.languages
        if not isinstance(languages, LanguageList):
            languages = LanguageList(languages)
        if alphas.size < 1:
            raise LidError("fusion model needs at least one system")
        if betas.size != len(languages):
            raise LidError(f"{betas.size} offsets for {len(languages)} languages")
        if not (np.isfinite(alphas).all() and np.isfinite(betas).all()):
            raise LidError("fusion parameters must be finite")
        alphas.setflags(write=False)
        betas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "languages", languages)

    @property
    def n_systems(self) -> int:
        return self.alphas.size


@dataclass(frozen=True)
class FusionResult:
    model: FusionModel
    cllr_before: float
    cllr_after: float
    optimizer: OptimizeResult


def _check_systems(systems: Sequence[ScoreMatrix], languages: LanguageList | None = None) -> None:
    if not systems:
        raise LidError("no systems given")
    ref = systems[0]
    if languages is not None and ref.languages != languages:
        raise LidError(f"system 0 languages {list(ref.languages)} do not match model {list(languages)}")
    ref_ids = set(ref.ids)
    for i, sm in enumerate(systems[1:], start=1):
        if sm.languages != ref.languages:
            raise LidError(f"system {i} language order {list(sm.languages)} differs from system 0")
        if sm.n != ref.n or set(sm.ids) != ref_ids:
            raise LidError(f"system {i} ids differ from system 0")


def _stack(systems: Sequence[ScoreMatrix], ids: Sequence[str]) -> np.ndarray:
    """S x N x K array with rows in ``ids`` order."""
    return np.stack([sm.reorder(ids).scores for sm in systems])


def fuse_scores(model: FusionModel, systems: Sequence[ScoreMatrix]) -> ScoreMatrix:
    _check_systems(systems, model.languages)
    if len(systems) != model.n_systems:
        raise LidError(f"model expects {model.n_systems} systems, got {len(systems)}")
    ids = systems[0].ids
    stack = _stack(systems, ids)
    fused = np.tensordot(model.alphas, stack, axes=1) + model.betas
    return ScoreMatrix(ids=ids, scores=fused, languages=model.languages)


def cllr_objective(params: np.ndarray, stack: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Balanced Cllr (bits) of the fused scores and its exact gradient.

    ``params`` is alphas (S) followed by betas (K); ``stack`` is S x N x K.
    """
    s, n, k = stack.shape
    alphas, betas = params[:s], params[s:]
    fused = np.tensordot(alphas, stack, axes=1) + betas
    logp = log_posteriors(fused)
    idx = np.arange(n)
    logp_true = logp[idx, y]
    floor = math.log(POSTERIOR_FLOOR)
    clamped = logp_true < floor
    counts = np.bincount(y, minlength=k).astype(np.float64)
    if (counts == 0).any():
        raise LidError(f"language index {int(np.flatnonzero(counts == 0)[0])} has no dev trials")
    c = 1.0 / (k * counts[y] * LOG2)
    value = float(-(c * np.maximum(logp_true, floor)).sum())
    g = np.exp(logp)
    g[idx, y] -= 1.0
    g *= c[:, None]
    g[clamped] = 0.0
    g_alpha = np.einsum("snk,nk->s", stack, g)
    g_beta = g.sum(axis=0)
    return value, np.concatenate([g_alpha, g_beta])


def train_fusion(systems: Sequence[ScoreMatrix], labels: TrialLabels,
                 config: OptimizerConfig | None = None) -> FusionResult:
    """Fit a fusion (or, with one system, a calibration) on dev data."""
    _check_systems(systems)
    languages = systems[0].languages
    s_count = len(systems)
    _, y = align(systems[0], labels)
    stack = _stack(systems, labels.ids)
    k = len(languages)
    counts = np.bincount(y, minlength=k)
    if (counts == 0).any():
        raise LidError(f"dev labels do not cover language {languages[int(np.flatnonzero(counts == 0)[0])]!r}")
    x0 = np.concatenate([np.full(s_count, 1.0 / s_count), np.zeros(k)])
    before, _ = cllr_objective(x0, stack, y)
    res = lbfgs_minimize(lambda p: cllr_objective(p, stack, y), x0, config or OptimizerConfig())
    model = FusionModel(alphas=res.x[:s_count], betas=res.x[s_count:], languages=languages)
    return FusionResult(model=model, cllr_before=before, cllr_after=res.fun, optimizer=res)


def calibrate_system(system: ScoreMatrix, labels: TrialLabels,
                     config: OptimizerConfig | None = None) -> FusionResult:
    return train_fusion([system], labels, config)


def identity_model(languages: LanguageList, n_systems: int = 1) -> FusionModel:
    return FusionModel(alphas=np.full(n_systems, 1.0 / n_systems), betas=np.zeros(len(languages)),
                       languages=languages)

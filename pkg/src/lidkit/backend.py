"""Embedding backend: length normalization, centering, LDA, multinomial regression.

Scoring pipeline (fixed order)::

    length_normalize -> subtract training mean -> [LDA projection] -> W x + b

The classifier is trained with per-class loss weights inversely
proportional to the class counts when rebalancing is enabled, so that
languages with more training data do not dominate the decision.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from lidkit.data import EmbeddingSet, LanguageList, LidError, ScoreMatrix
from lidkit.optim import CONVERGED, NonFiniteObjective, OptimizerConfig, lbfgs_minimize

log = logging.getLogger(__name__)

NORM_THEN_CENTER = "norm_center"
CENTER_THEN_NORM = "center_norm"


class BackendWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BackendConfig:
    use_lda: bool = False
    lda_dim: int = 50
    lda_shrinkage: float = 1e-4
    l2_lambda: float = 1e-4
    rebalance: bool = True
    max_iter: int = 500
    tol: float = 1e-7
    order: str = NORM_THEN_CENTER

    def __post_init__(self):
        if self.use_lda and self.lda_dim < 1:
            raise LidError("lda_dim must be >= 1")
        if not self.tol > 0:
            raise LidError("tol must be > 0")
        if self.l2_lambda < 0:
            raise LidError("l2_lambda must be >= 0")
        if self.lda_shrinkage < 0:
            raise LidError("lda_shrinkage must be >= 0")
        if self.max_iter < 1:
            raise LidError("max_iter must be >= 1")
        if self.order not in (NORM_THEN_CENTER, CENTER_THEN_NORM):
            raise LidError(f"order must be {NORM_THEN_CENTER!r} or {CENTER_THEN_NORM!r}")


@dataclass(frozen=True, eq=False)
class BackendModel:
    mean: np.ndarray
    lda: np.ndarray | None
    weights: np.ndarray
    bias: np.ndarray
    languages: LanguageList
    balance_weights: np.ndarray
    order: str = NORM_THEN_CENTER

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        weights = np.array(self.weights, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64)
        bw = np.array(self.balance_weights, dtype=np.float64)
        lda = None if self.lda is None else np.array(self.lda, dtype=np.float64)
        k = len(self.languages)
        d = mean.shape[0] if mean.ndim == 1 else -1
        if d < 1:
            raise LidError("mean must be a non-empty vector")
        p = d
        if lda is not None:
            if lda.ndim != 2 or lda.shape[0] != d or lda.shape[1] < 1:
                raise LidError(f"lda shape {lda.shape} inconsistent with dim {d}")
            p = lda.shape[1]
        if weights.shape != (k, p):
            raise LidError(f"weights shape {weights.shape}, expected {(k, p)}")
        if bias.shape != (k,) or bw.shape != (k,):
            raise LidError("bias and balance_weights must have one entry per language")
        if not (bw > 0).all() or abs(bw.sum() - k) > 1e-9 * k:
            raise LidError("balance_weights must be positive and sum to the number of languages")
        for name, a in (("mean", mean), ("weights", weights), ("bias", bias), ("lda", lda)):
            if a is not None and not np.isfinite(a).all():
                raise LidError(f"non-finite entries in {name}")
        if self.order not in (NORM_THEN_CENTER, CENTER_THEN_NORM):
            raise LidError(f"unknown normalization order {self.order!r}")
        for a in (mean, weights, bias, bw, lda):
            if a is not None:
                a.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "balance_weights", bw)
        object.__setattr__(self, "lda", lda)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def transform(self, vectors: np.ndarray) -> np.ndarray:
        """Preprocess raw embeddings into classifier features."""
        x = np.asarray(vectors, dtype=np.float64)
        if self.order == NORM_THEN_CENTER:
            x = length_normalize(x) - self.mean
        else:
            x = length_normalize(x - self.mean)
        if self.lda is not None:
            x = x @ self.lda
        return x


@dataclass(frozen=True)
class MultinomialFit:
    weights: np.ndarray
    bias: np.ndarray
    loss: float
    converged: bool
    n_iter: int
    grad_norm: float


def length_normalize(vectors: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm.

    All-zero rows are returned unchanged and a :class:`BackendWarning` is
    issued.
    """
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = norms == 0.0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm row(s) left unnormalized", BackendWarning, stacklevel=2)
    return x / np.where(zero, 1.0, norms)


def fit_center(vectors: np.ndarray) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise LidError("need at least one training vector")
    return x.mean(axis=0)


def apply_center(vectors: np.ndarray, mean: np.ndarray) -> np.ndarray:
    return np.asarray(vectors, dtype=np.float64) - mean


def scatter_matrices(x: np.ndarray, y: np.ndarray, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Within- and between-class scatter, both normalized by N."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    k = int(y.max()) + 1 if k is None else k
    n, d = x.shape
    mu = x.mean(axis=0)
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c in range(k):
        xc = x[y == c]
        if xc.shape[0] == 0:
            continue
        mc = xc.mean(axis=0)
        diff = xc - mc
        sw += diff.T @ diff
        dm = (mc - mu)[:, None]
        sb += xc.shape[0] * (dm @ dm.T)
    return sw / n, sb / n


def fit_lda(vectors: np.ndarray, labels: np.ndarray, dim: int, shrinkage: float = 1e-4,
            n_classes: int | None = None) -> np.ndarray:
    """Fisher LDA projection (D x dim).

    Columns solve ``Sb v = lambda (Sw + s * tr(Sw)/D * I) v`` for the ``dim``
    largest eigenvalues, scaled to unit norm under the regularized Sw
    metric, with the largest-magnitude entry of each column made positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    present = np.unique(y)
    k = len(present) if n_classes is None else n_classes
    if len(present) < 2:
        raise LidError("LDA needs at least 2 classes")
    n, d = x.shape
    max_dim = min(k - 1, d)
    if dim > max_dim:
        raise LidError(
            f"LDA dimension {dim} exceeds the Fisher rank bound min(K-1, D) = {max_dim} "
            f"(K={k}, D={d})"
        )
    if dim < 1:
        raise LidError("LDA dimension must be >= 1")
    counts = np.bincount(y, minlength=k)
    if (counts == 1).any():
        warnings.warn("LDA: class with a single sample; relying on shrinkage", BackendWarning, stacklevel=2)
    sw, sb = scatter_matrices(x, y, k)
    scale = np.trace(sw) / d
    if scale <= 0:
        scale = 1.0
    sw_reg = sw + shrinkage * scale * np.eye(d)
    if shrinkage == 0:
        sw_reg = sw_reg + 1e-12 * scale * np.eye(d)
    evals, evecs = linalg.eigh(sb, sw_reg)
    order = np.argsort(evals, kind="stable")[::-1][:dim]
    evals = evals[order]
    proj = evecs[:, order]
    if evals.max(initial=0.0) <= 1e-10 * max(np.trace(sb), scale, 1e-300):
        warnings.warn("LDA: between-class scatter is (numerically) zero", BackendWarning, stacklevel=2)
    # eigh already gives v' Sw_reg v = 1; renormalize against round-off
    norms = np.sqrt(np.einsum("ij,ij->j", proj, sw_reg @ proj))
    proj = proj / norms
    idx = np.argmax(np.abs(proj), axis=0)
    signs = np.sign(proj[idx, np.arange(proj.shape[1])])
    signs[signs == 0] = 1.0
    return proj * signs


def rebalance_weights(counts, languages: LanguageList | None = None) -> np.ndarray:
    """Per-class loss weights proportional to 1/count, summing to K."""
    counts = np.asarray(counts, dtype=np.float64)
    bad = np.flatnonzero(counts < 1)
    if bad.size:
        name = languages[int(bad[0])] if languages is not None else f"index {int(bad[0])}"
        raise LidError(f"language {name} has no training data")
    inv = 1.0 / counts
    return inv * (counts.size / inv.sum())


def multinomial_objective(params: np.ndarray, x: np.ndarray, y: np.ndarray, sample_w: np.ndarray,
                          l2_lambda: float, k: int) -> tuple[float, np.ndarray]:
    """Weighted-mean cross-entropy plus ``l2_lambda * ||W||_F^2``.

    ``params`` packs W (k x p, row-major) followed by b (k). Sample
    weights are normalized by their sum.
    """
    n, p = x.shape
    w = params[: k * p].reshape(k, p)
    b = params[k * p:]
    logits = x @ w.T + b
    lse = logsumexp(logits, axis=1, keepdims=True)
    logp = logits - lse
    sw = sample_w / sample_w.sum()
    ce = -(sw * logp[np.arange(n), y]).sum()
    value = ce + l2_lambda * (w * w).sum()
    g_logits = np.exp(logp)
    g_logits[np.arange(n), y] -= 1.0
    g_logits *= sw[:, None]
    gw = g_logits.T @ x + 2.0 * l2_lambda * w
    gb = g_logits.sum(axis=0)
    return float(value), np.concatenate([gw.ravel(), gb])


def fit_multinomial(features: np.ndarray, labels: np.ndarray, n_classes: int,
                    config: BackendConfig | None = None,
                    class_weights: np.ndarray | None = None) -> MultinomialFit:
    cfg = config or BackendConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    k = n_classes
    if k < 2:
        raise LidError("multinomial regression needs at least 2 classes")
    if class_weights is None:
        class_weights = np.ones(k)
    sample_w = np.asarray(class_weights, dtype=np.float64)[y]
    p = x.shape[1]
    x0 = np.zeros(k * p + k)
    opt = OptimizerConfig(max_iter=cfg.max_iter, grad_tol=cfg.tol)
    try:
        res = lbfgs_minimize(lambda th: multinomial_objective(th, x, y, sample_w, cfg.l2_lambda, k), x0, opt)
    except NonFiniteObjective as e:
        raise LidError(f"multinomial loss became non-finite at iteration {e.iteration}") from e
    if res.status != CONVERGED:
        log.warning("multinomial regression stopped with status %s after %d iterations "
                    "(|grad|_inf=%.3g)", res.status, res.n_iter, np.abs(res.grad).max())
    return MultinomialFit(
        weights=res.x[: k * p].reshape(k, p).copy(),
        bias=res.x[k * p:].copy(),
        loss=res.fun,
        converged=res.status == CONVERGED,
        n_iter=res.n_iter,
        grad_norm=float(np.abs(res.grad).max()),
    )


@dataclass
class TrainReport:
    stages: list[str] = field(default_factory=list)
    fit: MultinomialFit | None = None
    lda_dim: int | None = None


def train_backend(train: EmbeddingSet, languages: LanguageList, config: BackendConfig | None = None,
                  report: TrainReport | None = None) -> BackendModel:
    """Fit the full backend on labeled training embeddings."""
    cfg = config or BackendConfig()
    if train.labels is None:
        raise LidError("training embeddings have no labels")
    k = len(languages)
    y = np.asarray(train.labels)
    if y.min() < 0 or y.max() >= k:
        raise LidError("training label out of range of the language list")
    counts = np.bincount(y, minlength=k)
    rep = report if report is not None else TrainReport()

    x = train.vectors
    if cfg.order == NORM_THEN_CENTER:
        x = length_normalize(x)
        rep.stages.append("normalize")
        mean = fit_center(x)
        x = x - mean
        rep.stages.append("center")
    else:
        mean = fit_center(x)
        x = x - mean
        rep.stages.append("center")
        x = length_normalize(x)
        rep.stages.append("normalize")

    lda = None
    if cfg.use_lda:
        lda = fit_lda(x, y, cfg.lda_dim, cfg.lda_shrinkage, n_classes=k)
        x = x @ lda
        rep.stages.append("project")
        rep.lda_dim = lda.shape[1]

    if cfg.rebalance:
        bw = rebalance_weights(counts, languages)
    else:
        if (counts == 0).any():
            raise LidError(f"language {languages[int(np.flatnonzero(counts == 0)[0])]} has no training data")
        bw = np.ones(k)
    fit = fit_multinomial(x, y, k, cfg, class_weights=bw)
    rep.stages.append("classify")
    rep.fit = fit
    return BackendModel(mean=mean, lda=lda, weights=fit.weights, bias=fit.bias,
                        languages=languages, balance_weights=bw, order=cfg.order)


def score(model: BackendModel, embeddings: EmbeddingSet) -> ScoreMatrix:
    if embeddings.dim != model.dim:
        raise LidError(f"embedding dimension {embeddings.dim} does not match model dimension {model.dim}")
    x = model.transform(embeddings.vectors)
    return ScoreMatrix(ids=embeddings.ids, scores=x @ model.weights.T + model.bias,
                       languages=model.languages)


def fisher_ratio(x: np.ndarray, y: np.ndarray, direction: np.ndarray) -> float:
    """Between- over within-class variance of the data projected on ``direction``."""
    sw, sb = scatter_matrices(x, y)
    v = np.asarray(direction, dtype=np.float64)
    return float((v @ sb @ v) / (v @ sw @ v))

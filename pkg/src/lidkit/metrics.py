"""Language-detection metrics: Cavg, minimum Cavg, pooled EER, Cllr, accuracy.

Cavg follows the pair-wise convention of the NIST LRE / OLR evaluations:

    Cavg = 1/K * sum_L [ Pt * Pmiss(L) + (1 - Pt)/(K - 1) * sum_{L' != L} Pfa(L, L') ]

Per-utterance log-likelihood scores are first turned into detection
log-likelihood ratios (one detector per language). A detection fires when
its llr is ``>= threshold``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
from scipy.special import logsumexp

from lidkit.data import LidError, ScoreMatrix, TrialLabels, align

LOG2 = math.log(2.0)
POSTERIOR_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class DetectionTrialSet:
    """Detection llrs for every (utterance, language) pair.

    ``llr[t, k]`` is the llr of utterance ``t`` for detector ``k``;
    ``labels[t]`` is the true language of ``t``.
    """

    llr: np.ndarray
    labels: np.ndarray
    languages: tuple[str, ...]

    @property
    def k(self) -> int:
        return self.llr.shape[1]

    @property
    def is_target(self) -> np.ndarray:
        return self.labels[:, None] == np.arange(self.k)[None, :]

    @property
    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat (scores, is_target) over all N*K trials."""
        return self.llr.ravel(), self.is_target.ravel()

    def per_language(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Target and non-target llrs of detector ``k``."""
        col = self.llr[:, k]
        tar = self.labels == k
        return col[tar], col[~tar]


@dataclass(frozen=True)
class MetricReport:
    c_avg: float
    min_c_avg: float
    eer_percent: float
    cllr_bits: float
    accuracy: float
    n_trials: int
    n_languages: int
    p_target: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_table(self, name: str = "system") -> str:
        return format_table([(name, self)])


def detection_llrs(scores: np.ndarray) -> np.ndarray:
    """Convert N x K log-likelihoods to one-vs-rest detection llrs.

    llr[t, k] = s[t, k] - log( 1/(K-1) * sum_{j != k} exp(s[t, j]) )

    The competitor terms are max-shifted and summed in sorted order, so
    trials with the same scores up to permutation get identical llrs and a
    target equal to all competitors gives exactly 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[1]
    if k < 2:
        raise LidError("detection llrs need at least 2 languages")
    out = np.empty_like(scores)
    idx = np.arange(k)
    for j in range(k):
        others = np.sort(scores[:, idx != j], axis=1)
        m = others[:, -1]
        mean = np.exp(others - m[:, None]).sum(axis=1) / (k - 1)
        out[:, j] = (scores[:, j] - m) - np.log(mean)
    return out


def expand_trials(scores: ScoreMatrix, labels: TrialLabels, p_target: float = 0.5) -> DetectionTrialSet:
    if not 0.0 < p_target < 1.0:
        raise LidError(f"p_target must be in (0, 1), got {p_target}")
    if scores.k < 2:
        raise LidError("detection trials need at least 2 languages")
    s, y = align(scores, labels)
    return DetectionTrialSet(llr=detection_llrs(s), labels=y, languages=scores.languages.names)


def _check_targets(trials: DetectionTrialSet) -> np.ndarray:
    counts = np.bincount(trials.labels, minlength=trials.k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise LidError(f"language {trials.languages[empty[0]]!r} has no target trials")
    return counts


def c_avg(trials: DetectionTrialSet, p_target: float = 0.5, threshold: float = 0.0) -> float:
    counts = _check_targets(trials)
    k = trials.k
    fired = trials.llr >= threshold
    # hits[L', L]: utterances of language L' accepted by detector L
    hits = np.zeros((k, k))
    np.add.at(hits, trials.labels, fired.astype(np.float64))
    rates = hits / counts[:, None]
    p_miss = 1.0 - np.diag(rates)
    p_fa = rates.sum(axis=0) - np.diag(rates)
    cost = p_target * p_miss + (1.0 - p_target) / (k - 1) * p_fa
    return float(cost.mean())


def min_c_avg(trials: DetectionTrialSet, p_target: float = 0.5) -> float:
    """Minimum Cavg over one threshold shared by all detectors.

    Cavg is piecewise constant in the threshold with jumps only at llr
    values, so the sweep over distinct llrs plus +inf is exhaustive
    (-inf gives the same decisions as the smallest llr).
    """
    counts = _check_targets(trials)
    k = trials.k
    flat = trials.llr.ravel()
    # Each trial's cost contribution when it fires (threshold <= llr).
    is_tar = trials.is_target.ravel()
    lab = np.repeat(trials.labels, k)
    w_tar = p_target / (k * counts[lab])
    w_non = (1.0 - p_target) / (k * (k - 1) * counts[lab])
    # firing a target removes its miss cost; firing a non-target adds fa cost
    delta = np.where(is_tar, -w_tar, w_non)
    order = np.argsort(flat, kind="mergesort")[::-1]
    vals = flat[order]
    cum = np.cumsum(delta[order])
    # thresholds at distinct values: all trials with llr >= v fire
    last_of_run = np.ones(vals.size, dtype=bool)
    last_of_run[:-1] = vals[1:] != vals[:-1]
    base = p_target  # nothing fires: every Pmiss = 1, every Pfa = 0
    costs = base + cum[last_of_run]
    best = min(base, float(costs.min()))
    return max(best, 0.0)


def eer(trials: DetectionTrialSet) -> float:
    """Pooled one-vs-rest EER in percent."""
    scores, is_tar = trials.pooled
    return eer_from_scores(scores[is_tar], scores[~is_tar])


def eer_from_scores(tar, non) -> float:
    """EER (percent) of target / non-target score sets.

    Operating points are the decisions ``score >= tau`` for tau at every
    distinct score and at +-inf. Between the two adjacent points where the
    miss rate overtakes the false-alarm rate, the crossing is located by
    linear interpolation.
    """
    tar = np.asarray(tar, dtype=np.float64).ravel()
    non = np.asarray(non, dtype=np.float64).ravel()
    if tar.size == 0 or non.size == 0:
        raise LidError("EER needs at least one target and one non-target trial")
    thr = np.unique(np.concatenate([tar, non]))
    tar_s = np.sort(tar)
    non_s = np.sort(non)
    # at threshold tau: miss = #tar < tau, fa = #non >= tau
    p_miss = np.searchsorted(tar_s, thr, side="left") / tar.size
    p_fa = 1.0 - np.searchsorted(non_s, thr, side="left") / non.size
    p_miss = np.concatenate([[0.0], p_miss, [1.0]])
    p_fa = np.concatenate([[1.0], p_fa, [0.0]])
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0.0))
    if diff[i] == 0.0:
        return 100.0 * float(p_miss[i])
    d0, d1 = diff[i - 1], diff[i]
    frac = -d0 / (d1 - d0)
    return 100.0 * float(p_miss[i - 1] + frac * (p_miss[i] - p_miss[i - 1]))


def log_posteriors(scores: np.ndarray) -> np.ndarray:
    """Row-wise log softmax under a uniform prior."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores - logsumexp(scores, axis=1, keepdims=True)


def cllr_from_arrays(scores: np.ndarray, y: np.ndarray, k: int | None = None) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    k = scores.shape[1] if k is None else k
    if k < 2:
        raise LidError("Cllr needs at least 2 languages")
    counts = np.bincount(y, minlength=k)
    if (counts == 0).any():
        raise LidError(f"language index {int(np.flatnonzero(counts == 0)[0])} has no trials")
    logp = log_posteriors(scores)[np.arange(y.size), y]
    logp = np.maximum(logp, math.log(POSTERIOR_FLOOR))
    per_class = np.zeros(k)
    np.add.at(per_class, y, -logp)
    return float((per_class / counts).mean() / LOG2)


def cllr(scores: ScoreMatrix, labels: TrialLabels) -> float:
    """Balanced multiclass Cllr in bits (uniform prior over languages)."""
    s, y = align(scores, labels)
    if scores.k < 2:
        raise LidError("Cllr needs at least 2 languages")
    counts = np.bincount(y, minlength=scores.k)
    if (counts == 0).any():
        raise LidError(f"language {scores.languages[int(np.flatnonzero(counts == 0)[0])]!r} has no trials")
    return cllr_from_arrays(s, y, scores.k)


def accuracy(scores: ScoreMatrix, labels: TrialLabels) -> float:
    """Fraction of argmax-correct trials; ties go to the lowest language index."""
    s, y = align(scores, labels)
    return float(np.mean(np.argmax(s, axis=1) == y))


def evaluate(scores: ScoreMatrix, labels: TrialLabels, p_target: float = 0.5,
             threshold: float = 0.0) -> MetricReport:
    trials = expand_trials(scores, labels, p_target)
    actual = c_avg(trials, p_target, threshold)
    minimum = min(min_c_avg(trials, p_target), actual)
    return MetricReport(
        c_avg=actual,
        min_c_avg=minimum,
        eer_percent=eer(trials),
        cllr_bits=cllr(scores, labels),
        accuracy=accuracy(scores, labels),
        n_trials=int(trials.llr.size),
        n_languages=trials.k,
        p_target=p_target,
    )


def fixed(value: float, places: int) -> str:
    """Decimal rounding, half away from zero, of the shortest repr of ``value``.

    ``format(0.00785, ".4f")`` gives "0.0078" because the binary value sits
    just below the tie; tables should read "0.0079".
    """
    if not math.isfinite(value):
        return str(value)
    q = Decimal(1).scaleb(-places)
    out = Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP)
    if out == 0:
        out = out.copy_abs()
    return f"{out:.{places}f}"


def format_table(rows) -> str:
    """Aligned text table; Cavg to 4 decimals, EER to 2, like the OLR result tables."""
    header = ("System", "Cavg", "minCavg", "EER", "Cllr", "Acc")
    body = [
        (name, fixed(r.c_avg, 4), fixed(r.min_c_avg, 4), fixed(r.eer_percent, 2),
         fixed(r.cllr_bits, 4), fixed(r.accuracy, 4))
        for name, r in rows
    ]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(b, widths))))
    return "\n".join(lines)

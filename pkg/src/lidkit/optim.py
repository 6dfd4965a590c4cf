"""Limited-memory BFGS with a strong-Wolfe line search.

The objective is a callable ``fun(x) -> (value, gradient)``. Search
directions come from the usual two-loop recursion over the last
``history`` curvature pairs; step lengths satisfy the strong Wolfe
conditions (bracketing phase followed by a zoom with safeguarded cubic
interpolation).
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable

import numpy as np

from lidkit.data import LidError

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

CONVERGED = "converged"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILED = "line_search_failed"


class NonFiniteObjective(LidError):
    def __init__(self, x: np.ndarray, iteration: int | None = None):
        self.x = np.array(x)
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"objective is not finite{where} at trial point {np.array2string(self.x, threshold=8)}")


@dataclass(frozen=True)
class OptimizerConfig:
    history: int = 10
    max_iter: int = 200
    grad_tol: float = 1e-7
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_ls_iter: int = 40

    def __post_init__(self):
        if not 0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0:
            raise LidError(f"need 0 < wolfe_c1 < wolfe_c2 < 1, got {self.wolfe_c1}, {self.wolfe_c2}")
        if self.history < 1:
            raise LidError("history must be >= 1")
        if self.max_iter < 0:
            raise LidError("max_iter must be >= 0")
        if not self.grad_tol > 0:
            raise LidError("grad_tol must be > 0")


@dataclass(frozen=True)
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    status: str
    n_iter: int
    n_eval: int

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


class _Counted:
    def __init__(self, fun: Objective, iteration_ref: list):
        self.fun = fun
        self.n_eval = 0
        self._it = iteration_ref

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        self.n_eval += 1
        f, g = self.fun(x)
        f = float(f)
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(f) or not np.isfinite(g).all():
            raise NonFiniteObjective(x, self._it[0])
        return f, g


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating (a, fa, ga) and (b, fb, gb), or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    denom = gb - ga + 2.0 * d2
    if denom == 0:
        return None
    t = b - (b - a) * (gb + d2 - d1) / denom
    return t if np.isfinite(t) else None


def strong_wolfe(phi, f0: float, g0: float, alpha0: float, c1: float, c2: float,
                 max_iter: int = 40, alpha_max: float = 1e10):
    """Line search on phi(alpha) -> (value, slope, payload).

    Returns (alpha, value, payload) or None on failure. ``payload`` is
    whatever phi returns third (the full gradient), so the caller does not
    re-evaluate at the accepted point.

    Close to a minimizer the decrease c1*alpha*g0 falls below the rounding
    error of f, so value comparisons carry a tolerance of a few ulps of f0
    and a point inside that band is accepted on slope alone (approximate
    Wolfe: c2*g0 <= slope <= (2*c1 - 1)*g0).
    """
    eps = _F_NOISE * (1.0 + abs(f0))

    def accept(a, fa, ga):
        if fa <= f0 + c1 * a * g0 and abs(ga) <= -c2 * g0:
            return True
        return fa <= f0 + eps and c2 * g0 <= ga <= (2.0 * c1 - 1.0) * g0

    a_prev, f_prev, g_prev = 0.0, f0, g0
    a = alpha0
    best = None
    for i in range(max_iter):
        fa, ga, pa = phi(a)
        if best is None or fa < best[1]:
            best = (a, fa, pa)
        if accept(a, fa, ga):
            return a, fa, pa
        if fa > f0 + c1 * a * g0 + eps or (i > 0 and fa > f_prev + eps):
            return _zoom(phi, accept, f0, g0, a_prev, f_prev, g_prev, a, fa, ga, c1, eps, max_iter, best)
        if ga >= 0:
            return _zoom(phi, accept, f0, g0, a, fa, ga, a_prev, f_prev, g_prev, c1, eps, max_iter, best)
        a_prev, f_prev, g_prev = a, fa, ga
        a = min(2.0 * a, alpha_max)
    return None


# relative size of the band treated as rounding noise in f
_F_NOISE = 1e-11


def _zoom(phi, accept, f0, g0, lo, f_lo, g_lo, hi, f_hi, g_hi, c1, eps, max_iter, best):
    for _ in range(max_iter):
        width = abs(hi - lo)
        t = _cubic_min(lo, f_lo, g_lo, hi, f_hi, g_hi)
        left, right = min(lo, hi), max(lo, hi)
        # keep the trial away from the interval ends
        if t is None or not (left + 0.1 * width <= t <= right - 0.1 * width):
            t = 0.5 * (lo + hi)
        ft, gt, pt = phi(t)
        if ft < best[1]:
            best = (t, ft, pt)
        if accept(t, ft, gt):
            return t, ft, pt
        if ft > f0 + c1 * t * g0 + eps or ft > f_lo + eps:
            hi, f_hi, g_hi = t, ft, gt
        else:
            if gt * (hi - lo) >= 0:
                hi, f_hi, g_hi = lo, f_lo, g_lo
            lo, f_lo, g_lo = t, ft, gt
        if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
            break
    # accept a point with sufficient decrease even if curvature fails
    a, fa, pa = best
    if a > 0 and fa <= f0 + c1 * a * g0:
        return a, fa, pa
    return None


def _two_loop(g: np.ndarray, s_hist, y_hist, rho_hist) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(fun: Objective, x0, config: OptimizerConfig | None = None,
                   callback: Callable[[int, np.ndarray, float], None] | None = None) -> OptimizeResult:
    """Minimize ``fun`` from ``x0``.

    Stops with status ``converged`` once the gradient infinity-norm drops
    below ``config.grad_tol``, ``max_iter`` when the iteration budget is
    spent, or ``line_search_failed`` when no acceptable step exists (the
    last iterate is returned). The returned value never exceeds f(x0).
    """
    cfg = config or OptimizerConfig()
    it_ref = [0]
    f_eval = _Counted(fun, it_ref)
    x = np.array(x0, dtype=np.float64).ravel()
    f, g = f_eval(x)
    start = (x, f, g)
    s_hist: deque = deque(maxlen=cfg.history)
    y_hist: deque = deque(maxlen=cfg.history)
    rho_hist: deque = deque(maxlen=cfg.history)

    status = MAX_ITER
    k = 0
    while True:
        if np.max(np.abs(g), initial=0.0) < cfg.grad_tol:
            status = CONVERGED
            break
        if k >= cfg.max_iter:
            status = MAX_ITER
            break
        it_ref[0] = k
        d = _two_loop(g, s_hist, y_hist, rho_hist)
        slope = g @ d
        if not slope < 0:
            # lost descent; restart from steepest descent
            s_hist.clear(); y_hist.clear(); rho_hist.clear()
            d = -g
            slope = g @ d
        if k == 0 and not s_hist:
            alpha0 = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        else:
            alpha0 = 1.0

        def phi(a, x=x, d=d):
            fa, ga = f_eval(x + a * d)
            return fa, float(ga @ d), ga

        res = strong_wolfe(phi, f, slope, alpha0, cfg.wolfe_c1, cfg.wolfe_c2, cfg.max_ls_iter)
        if res is None:
            if s_hist:
                # retry once along steepest descent with fresh memory
                s_hist.clear(); y_hist.clear(); rho_hist.clear()
                d = -g
                slope = g @ d
                alpha0 = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))

                def phi(a, x=x, d=d):
                    fa, ga = f_eval(x + a * d)
                    return fa, float(ga @ d), ga

                res = strong_wolfe(phi, f, slope, alpha0, cfg.wolfe_c1, cfg.wolfe_c2, cfg.max_ls_iter)
            if res is None:
                status = LINE_SEARCH_FAILED
                log.debug("line search failed at iteration %d, f=%g", k, f)
                break
        alpha, f_new, g_new = res
        s = alpha * d
        y = g_new - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
        x = x + s
        f, g = f_new, g_new
        k += 1
        if callback is not None:
            callback(k, x, f)

    if f > start[1]:
        # steps accepted inside the rounding band can drift up by a few ulps
        x, f, g = start
    return OptimizeResult(x=x, fun=f, grad=g, status=status, n_iter=k, n_eval=f_eval.n_eval)

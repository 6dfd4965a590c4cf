"""Attention pooling layers and AAM-softmax loss, forward and backward, in numpy.

All layers map a T x H frame sequence to a fixed-size vector:

* attentive statistics: one tanh-attention distribution, output [mu, sigma] (2H);
* MHA: frames -> ReLU(W1 x + b1) (n_att) -> one softmax distribution per
  head, output [mu_1, sigma_1, ..., mu_J, sigma_J] (J * 2H);
* GMHA: MHA head outputs re-weighted by a second softmax over heads (2H).

Each ``*_backward`` returns the gradient with respect to the frames and a
params object of the same type holding the parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Callable

import numpy as np

from lidkit.data import LidError

EPS_VAR = 1e-10
FD_NOISE_FACTOR = 8.0
RESOLVABLE_REL = 1e-6


def _softmax(e: np.ndarray, axis: int = 0) -> np.ndarray:
    z = np.exp(e - e.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = 0) -> np.ndarray:
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))


def _as_frames(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise LidError(f"frames must be T x H with T >= 1, got shape {x.shape}")
    return x


class _Params:
    """Mixin: named array fields that grad_check can perturb."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)}

    def with_arrays(self, **arrays):
        return replace(self, **arrays)


@dataclass(frozen=True, eq=False)
class AttentiveStatsParams(_Params):
    """W: n_att x H, b: n_att, v: n_att."""

    W: np.ndarray
    b: np.ndarray
    v: np.ndarray
    eps_var: float = EPS_VAR

    @classmethod
    def random(cls, h: int, n_att: int = 128, rng=None, scale: float = 0.5):
        rng = np.random.default_rng(rng)
        return cls(W=rng.normal(0, scale / math.sqrt(h), (n_att, h)),
                   b=rng.normal(0, scale, n_att),
                   v=rng.normal(0, scale, n_att))


@dataclass(frozen=True, eq=False)
class MhaParams(_Params):
    """W1: n_att x H, b1: n_att, heads: n_heads x n_att."""

    W1: np.ndarray
    b1: np.ndarray
    heads: np.ndarray
    eps_var: float = EPS_VAR

    @property
    def n_heads(self) -> int:
        return self.heads.shape[0]

    @classmethod
    def random(cls, h: int, n_att: int = 128, n_heads: int = 5, rng=None, scale: float = 0.5):
        if n_heads < 1:
            raise LidError("n_heads must be >= 1")
        rng = np.random.default_rng(rng)
        return cls(W1=rng.normal(0, scale / math.sqrt(h), (n_att, h)),
                   b1=rng.normal(0, scale, n_att),
                   heads=rng.normal(0, scale, (n_heads, n_att)))


@dataclass(frozen=True, eq=False)
class GmhaParams(_Params):
    """MHA parameters plus head attention V: n_g x 2H and u: n_g."""

    W1: np.ndarray
    b1: np.ndarray
    heads: np.ndarray
    V: np.ndarray
    u: np.ndarray
    eps_var: float = EPS_VAR

    @property
    def mha(self) -> MhaParams:
        return MhaParams(W1=self.W1, b1=self.b1, heads=self.heads, eps_var=self.eps_var)

    @classmethod
    def random(cls, h: int, n_att: int = 128, n_heads: int = 5, n_global: int = 128, rng=None,
               scale: float = 0.5):
        rng = np.random.default_rng(rng)
        m = MhaParams.random(h, n_att, n_heads, rng, scale)
        return cls(W1=m.W1, b1=m.b1, heads=m.heads,
                   V=rng.normal(0, scale / math.sqrt(2 * h), (n_global, 2 * h)),
                   u=rng.normal(0, scale, n_global))


@dataclass(frozen=True, eq=False)
class AamParams(_Params):
    class_weights: np.ndarray
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if not 0 <= self.margin < math.pi / 2:
            raise LidError("AAM margin must be in [0, pi/2)")
        if not self.scale > 0:
            raise LidError("AAM scale must be > 0")


# -- weighted statistics ---------------------------------------------------

def weighted_stats(x: np.ndarray, alpha: np.ndarray, eps_var: float = EPS_VAR):
    """Attention-weighted mean and standard deviation over frames."""
    mu = alpha @ x
    var = alpha @ (x * x) - mu * mu
    sigma = np.sqrt(np.maximum(var, eps_var))
    return mu, sigma, var


def weighted_stats_backward(x, alpha, mu, sigma, var, g_mu, g_sigma, eps_var: float = EPS_VAR):
    """Returns (d alpha, d x) for upstream gradients on mu and sigma."""
    g_var = np.where(var > eps_var, g_sigma / (2.0 * sigma), 0.0)
    g_mu_tot = g_mu - 2.0 * mu * g_var
    d_alpha = x @ g_mu_tot + (x * x) @ g_var
    d_x = alpha[:, None] * (g_mu_tot[None, :] + 2.0 * x * g_var[None, :])
    return d_alpha, d_x


# -- attentive statistics pooling ------------------------------------------

def _attentive_forward(x, p: AttentiveStatsParams):
    h = np.tanh(x @ p.W.T + p.b)
    e = h @ p.v
    alpha = _softmax(e)
    mu, sigma, var = weighted_stats(x, alpha, p.eps_var)
    return h, alpha, mu, sigma, var


def attentive_stats_pool(x, params: AttentiveStatsParams) -> np.ndarray:
    x = _as_frames(x)
    _, _, mu, sigma, _ = _attentive_forward(x, params)
    return np.concatenate([mu, sigma])


def attentive_stats_attention(x, params: AttentiveStatsParams) -> np.ndarray:
    """Frame weights used by :func:`attentive_stats_pool`."""
    return _attentive_forward(_as_frames(x), params)[1]


def attentive_stats_pool_backward(x, params: AttentiveStatsParams, grad_out):
    x = _as_frames(x)
    p = params
    hdim = x.shape[1]
    h, alpha, mu, sigma, var = _attentive_forward(x, p)
    g = np.asarray(grad_out, dtype=np.float64)
    d_alpha, dx = weighted_stats_backward(x, alpha, mu, sigma, var, g[:hdim], g[hdim:], p.eps_var)
    de = _softmax_backward(alpha, d_alpha)
    dv = h.T @ de
    dz = np.outer(de, p.v) * (1.0 - h * h)
    dW = dz.T @ x
    db = dz.sum(axis=0)
    dx = dx + dz @ p.W
    return dx, replace(p, W=dW, b=db, v=dv)


# -- multi-head attention pooling ------------------------------------------

def _mha_forward(x, p: MhaParams):
    z = x @ p.W1.T + p.b1
    a = np.maximum(z, 0.0)
    e = a @ p.heads.T                       # T x J
    alpha = _softmax(e, axis=0)             # per-head distribution over frames
    stats = [weighted_stats(x, alpha[:, j], p.eps_var) for j in range(p.n_heads)]
    return z, a, alpha, stats


def mha_pool(x, params: MhaParams) -> np.ndarray:
    x = _as_frames(x)
    *_, stats = _mha_forward(x, params)
    return np.concatenate([np.concatenate([mu, sigma]) for mu, sigma, _ in stats])


def mha_head_outputs(x, params: MhaParams) -> np.ndarray:
    """n_heads x 2H matrix of per-head [mu, sigma]."""
    return mha_pool(x, params).reshape(params.n_heads, -1)


def mha_pool_backward(x, params: MhaParams, grad_out):
    x = _as_frames(x)
    p = params
    hdim = x.shape[1]
    z, a, alpha, stats = _mha_forward(x, p)
    g = np.asarray(grad_out, dtype=np.float64).reshape(p.n_heads, 2 * hdim)
    d_alpha = np.empty_like(alpha)
    dx = np.zeros_like(x)
    for j, (mu, sigma, var) in enumerate(stats):
        da, dxj = weighted_stats_backward(x, alpha[:, j], mu, sigma, var, g[j, :hdim], g[j, hdim:], p.eps_var)
        d_alpha[:, j] = da
        dx += dxj
    de = _softmax_backward(alpha, d_alpha, axis=0)
    d_heads = de.T @ a
    dz = (de @ p.heads) * (z > 0)
    dW1 = dz.T @ x
    db1 = dz.sum(axis=0)
    dx += dz @ p.W1
    return dx, replace(p, W1=dW1, b1=db1, heads=d_heads)


# -- global multi-head attention pooling -----------------------------------

def _gmha_forward(x, p: GmhaParams):
    heads = mha_head_outputs(x, p.mha)      # J x 2H
    q = np.tanh(heads @ p.V.T)              # J x n_g
    gamma = _softmax(q @ p.u)
    return heads, q, gamma


def gmha_pool(x, params: GmhaParams) -> np.ndarray:
    x = _as_frames(x)
    heads, _, gamma = _gmha_forward(x, params)
    return gamma @ heads


def gmha_head_weights(x, params: GmhaParams) -> np.ndarray:
    return _gmha_forward(_as_frames(x), params)[2]


def gmha_pool_backward(x, params: GmhaParams, grad_out):
    x = _as_frames(x)
    p = params
    heads, q, gamma = _gmha_forward(x, p)
    g = np.asarray(grad_out, dtype=np.float64)
    d_heads = np.outer(gamma, g)
    ds = _softmax_backward(gamma, heads @ g)
    du = q.T @ ds
    dpre = np.outer(ds, p.u) * (1.0 - q * q)
    dV = dpre.T @ heads
    d_heads += dpre @ p.V
    dx, dm = mha_pool_backward(x, p.mha, d_heads.ravel())
    return dx, replace(p, W1=dm.W1, b1=dm.b1, heads=dm.heads, V=dV, u=du)


# -- additive angular margin loss ------------------------------------------

def _unit(v: np.ndarray, what: str):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if (n == 0).any():
        raise LidError(f"zero-norm {what}")
    return v / n, n


def _aam_forward(x, label, p: AamParams):
    x = np.asarray(x, dtype=np.float64)
    k = p.class_weights.shape[0]
    if not 0 <= label < k:
        raise LidError(f"label {label} out of range for {k} classes")
    xh, xn = _unit(x, "embedding")
    wh, wn = _unit(np.asarray(p.class_weights, dtype=np.float64), "class weight")
    cos = wh @ xh
    m = p.margin
    c = cos[label]
    sin = math.sqrt(max(0.0, 1.0 - c * c))
    if c > math.cos(math.pi - m):
        phi = c * math.cos(m) - sin * math.sin(m)
        dphi = math.cos(m) + (c * math.sin(m) / sin if sin > 0 else 0.0)
    else:
        phi = c - math.sin(math.pi - m) * m
        dphi = 1.0
    logits = p.scale * cos
    logits[label] = p.scale * phi
    # loss = log(1 + sum_{k != y} exp(l_k - l_y)); log1p keeps precision near 0
    rel = np.delete(logits, label) - logits[label]
    mx = max(0.0, float(rel.max(initial=-np.inf)))
    tail = np.exp(rel - mx).sum()
    loss = math.log1p(tail) if mx == 0.0 else mx + math.log(math.exp(-mx) + tail)
    lse = logits[label] + loss
    return loss, logits, lse, xh, xn, wh, wn, dphi


def aam_loss(x, label: int, params: AamParams) -> float:
    return float(_aam_forward(x, label, params)[0])


def aam_loss_backward(x, label: int, params: AamParams, grad_out: float = 1.0):
    """Gradients of ``grad_out * loss`` w.r.t. the embedding and class weights."""
    loss, logits, lse, xh, xn, wh, wn, dphi = _aam_forward(x, label, params)
    dl = np.exp(logits - lse)
    dl[label] -= 1.0
    dl *= float(grad_out)
    dcos = params.scale * dl
    dcos[label] *= dphi
    dxh = dcos @ wh
    dx = (dxh - xh * (xh @ dxh)) / xn
    dwh = np.outer(dcos, xh)
    dw = (dwh - wh * (wh * dwh).sum(axis=1, keepdims=True)) / wn
    return dx, replace(params, class_weights=dw)


# -- gradient verification -------------------------------------------------

def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    max_rel_error_strict: float
    n_coords: int
    n_unresolved: int

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check_detailed(forward: Callable[[dict], np.ndarray],
                        backward: Callable[[dict, np.ndarray], dict],
                        inputs: dict[str, np.ndarray],
                        step: float = 1e-5,
                        max_coords: int | None = None,
                        rng=None) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    The (possibly vector) output is reduced to a scalar with a fixed random
    projection. Every coordinate of every input is checked unless the total
    exceeds ``max_coords``, in which case a random subset of that size
    (at least 200) is used.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``. The difference
    quotient itself carries rounding noise of about
    ``FD_NOISE_FACTOR * eps * (sum|f+_i| + sum|f-_i|) / (2 step)`` (sums over
    the projected output terms). Coordinates whose gradient is too small to
    be resolved to ``RESOLVABLE_REL`` against that noise are only required
    to agree within the noise; they enter ``max_rel_error`` only when they
    fail that. ``max_rel_error_strict`` applies the plain formula everywhere.
    """
    rng = np.random.default_rng(0 if rng is None else rng)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out = np.asarray(forward(inputs), dtype=np.float64)
    proj = rng.normal(size=out.shape)
    analytic = backward(inputs, proj)
    coords = [(name, idx) for name, arr in inputs.items() for idx in np.ndindex(arr.shape)]
    if max_coords is not None and len(coords) > max(max_coords, 200):
        pick = rng.choice(len(coords), size=max(max_coords, 200), replace=False)
        coords = [coords[i] for i in np.sort(pick)]
    eps = np.finfo(np.float64).eps
    worst = strict = 0.0
    unresolved = 0
    for name, idx in coords:
        arr = inputs[name]
        orig = arr[idx]
        arr[idx] = orig + step
        terms_p = proj * forward(inputs)
        arr[idx] = orig - step
        terms_m = proj * forward(inputs)
        arr[idx] = orig
        numeric = (float(np.sum(terms_p)) - float(np.sum(terms_m))) / (2.0 * step)
        a = float(analytic[name][idx])
        err = float(relative_error(a, numeric))
        strict = max(strict, err)
        magnitude = float(np.abs(terms_p).sum() + np.abs(terms_m).sum())
        noise = FD_NOISE_FACTOR * eps * magnitude / (2.0 * step)
        if max(abs(a), abs(numeric)) * RESOLVABLE_REL < noise:
            # gradient too small for the difference quotient to resolve it to
            # RESOLVABLE_REL; demand agreement to within the rounding level only
            unresolved += 1
            if abs(a - numeric) <= noise:
                continue
        worst = max(worst, err)
    return GradCheckResult(max_rel_error=worst, max_rel_error_strict=strict,
                           n_coords=len(coords), n_unresolved=unresolved)


def grad_check(forward, backward, inputs, step: float = 1e-5, max_coords: int | None = None,
               rng=None) -> float:
    """Max relative error of :func:`grad_check_detailed`."""
    return grad_check_detailed(forward, backward, inputs, step, max_coords, rng).max_rel_error


def _pool_op(fwd, bwd, params):
    """forward/backward closures over a dict {x, <param arrays>} for grad_check."""

    def forward(inp):
        p = params.with_arrays(**{k: v for k, v in inp.items() if k != "x"})
        return fwd(inp["x"], p)

    def backward(inp, g):
        p = params.with_arrays(**{k: v for k, v in inp.items() if k != "x"})
        dx, dp = bwd(inp["x"], p, g)
        return {"x": dx, **dp.arrays()}

    return forward, backward, {"x": None, **params.arrays()}


def check_attentive_stats(x, params: AttentiveStatsParams, step: float = 1e-5, **kw) -> float:
    f, b, inp = _pool_op(attentive_stats_pool, attentive_stats_pool_backward, params)
    inp["x"] = x
    return grad_check(f, b, inp, step, **kw)


def check_mha(x, params: MhaParams, step: float = 1e-5, **kw) -> float:
    f, b, inp = _pool_op(mha_pool, mha_pool_backward, params)
    inp["x"] = x
    return grad_check(f, b, inp, step, **kw)


def check_gmha(x, params: GmhaParams, step: float = 1e-5, **kw) -> float:
    f, b, inp = _pool_op(gmha_pool, gmha_pool_backward, params)
    inp["x"] = x
    return grad_check(f, b, inp, step, **kw)


def check_aam(x, label: int, params: AamParams, step: float = 1e-5, **kw) -> float:
    def forward(inp):
        return np.array([aam_loss(inp["x"], label, params.with_arrays(class_weights=inp["class_weights"]))])

    def backward(inp, g):
        dx, dp = aam_loss_backward(inp["x"], label, params.with_arrays(class_weights=inp["class_weights"]),
                                   float(g[0]))
        return {"x": dx, "class_weights": dp.class_weights}

    return grad_check(forward, backward, {"x": x, "class_weights": params.class_weights}, step, **kw)

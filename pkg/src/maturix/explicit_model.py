"""Continuous maturation model with explicit occupation law.

A particle initiated at time ``T`` moves across the maturation interval
``[0, 1)`` at speed ``rho`` and is killed at rate ``g(t, x)`` on the way.
It matures at ``T + tau`` with ``tau = 1 / rho`` and then dies at rate
``mu(t)``.  Initiations follow a Poisson process of intensity ``lam(t)``.
The count of living mature particles at ``t`` given ``m`` at ``s`` is
``Binomial(m, alpha(s, t)) * Poisson(beta(s, t))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .distributions import BinomialPoissonLaw
from .quadrature import integrate_adaptive, integrate_intervals, integrate_pieces
from .rates import Constant, RateSchedule, check_nonnegative

__all__ = [
    "PartialKilling",
    "KillingField",
    "ContinuousModel",
    "maturation_lag",
    "survival_probability",
    "survival_curve",
    "alpha",
    "beta",
    "beta_partial_killing",
    "mean_count",
    "occupation_law",
    "q_infinity",
    "q_infinity_curve",
]

BETA_TOL = 1e-12
INNER_TOL = 1e-12


@dataclass(frozen=True)
class PartialKilling:
    """Killing ``gamma * q(t)`` on maturation stages ``x < delta``, none after."""

    gamma: float
    delta: float
    q: RateSchedule

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if not math.isfinite(self.gamma):
            raise ValueError("gamma must be finite")

    @property
    def time_breakpoints(self) -> tuple[float, ...]:
        return tuple(self.q.breakpoints)

    @property
    def space_breakpoints(self) -> tuple[float, ...]:
        return (self.delta,) if self.delta > 0 else ()

    initiation_breakpoints: tuple[float, ...] = field(default=(), init=False)

    def __call__(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.where(x < self.delta, self.gamma * np.asarray(self.q(t)), 0.0)

    def is_nonnegative(self) -> bool:
        return self.gamma >= 0 and check_nonnegative(self.q)


@dataclass(frozen=True)
class KillingField:
    """General killing rate ``(t, x) -> g(t, x)`` on ``x in [0, 1)``.

    ``fn`` must broadcast over array arguments.  ``time_breakpoints`` and
    ``space_breakpoints`` mark where ``g`` is not smooth in each variable;
    ``initiation_breakpoints`` lists initiation times at which the integrated
    killing is not smooth for reasons the other two do not capture.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    time_breakpoints: tuple[float, ...] = ()
    space_breakpoints: tuple[float, ...] = ()
    initiation_breakpoints: tuple[float, ...] = ()

    def __call__(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.asarray(self.fn(t, x), dtype=float) * np.ones(np.broadcast(t, x).shape)


Killing = Union[PartialKilling, KillingField, None]


@dataclass(frozen=True)
class ContinuousModel:
    """Maturation speed ``rho``, input ``lam``, post-maturation killing ``mu``
    and killing field ``g`` (``None`` for no killing during maturation)."""

    rho: float
    lam: RateSchedule
    mu: RateSchedule
    g: Killing = None
    allow_amplification: bool = False

    def __post_init__(self):
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise ValueError("rho must be positive and finite")
        if isinstance(self.g, PartialKilling) and not self.allow_amplification:
            if not self.g.is_nonnegative():
                raise ValueError("negative killing requires allow_amplification")
        if not check_nonnegative(self.mu):
            raise ValueError("mu must be nonnegative")

    @property
    def tau(self) -> float:
        return 1.0 / self.rho

    def killing(self, t, x):
        if self.g is None:
            return np.zeros(np.broadcast(np.asarray(t), np.asarray(x)).shape)
        return self.g(t, x)


def maturation_lag(model: ContinuousModel) -> float:
    return model.tau


# -- survival during maturation ------------------------------------------


def _inner_breakpoints(model: ContinuousModel, T: float) -> list[float]:
    g = model.g
    tau = model.tau
    pts = [b - T for b in g.time_breakpoints]
    pts += [x * tau for x in g.space_breakpoints]
    return [w for w in pts if 0.0 < w < tau]


def _killing_integral_quad(model: ContinuousModel, T: np.ndarray, tol: float) -> np.ndarray:
    """Inner integrals for all initiation times in one batched quadrature."""
    g = model.g
    rho = model.rho
    tau = model.tau
    T = np.asarray(T, dtype=float).ravel()
    starts, ends, owner = [], [], []
    for idx, t0 in enumerate(T):
        e = [0.0, *sorted(set(_inner_breakpoints(model, float(t0)))), tau]
        starts.extend(e[:-1])
        ends.extend(e[1:])
        owner.extend([idx] * (len(e) - 1))
    owner = np.asarray(owner)
    edges_lo = np.asarray(starts)
    edges_hi = np.asarray(ends)

    def integrand(w, piece):
        vals = g(T[owner[piece]] + w, rho * w)
        if not model.allow_amplification and np.any(vals < 0):
            raise ValueError("negative killing rate requires allow_amplification")
        return vals

    pieces = integrate_intervals(integrand, edges_lo, edges_hi, tol)
    out = np.zeros(T.size)
    np.add.at(out, owner, pieces)
    return out


def _killing_integral_exact(model: ContinuousModel, T: np.ndarray) -> np.ndarray:
    g = model.g
    span = g.delta * model.tau
    return g.gamma * (np.asarray(g.q.primitive(T + span)) - np.asarray(g.q.primitive(T)))


def killing_integral(model: ContinuousModel, T, exact: bool = True, tol: float = INNER_TOL):
    """``int_0^tau g(T + w, rho w) dw`` for scalar or array ``T``."""
    arr = np.asarray(T, dtype=float)
    if model.g is None:
        out = np.zeros_like(arr)
    elif exact and isinstance(model.g, PartialKilling) and model.g.q.has_primitive:
        out = _killing_integral_exact(model, arr)
    else:
        out = _killing_integral_quad(model, arr, tol).reshape(arr.shape)
    return float(out) if arr.ndim == 0 else out


def survival_probability(model: ContinuousModel, T: float, exact: bool = True) -> float:
    """Probability that a particle initiated at ``T`` reaches maturity."""
    return float(math.exp(-killing_integral(model, float(T), exact)))


def survival_curve(model: ContinuousModel, T, exact: bool = True) -> np.ndarray:
    """Vectorised :func:`survival_probability`."""
    return np.exp(-np.asarray(killing_integral(model, T, exact)))


# -- alpha / beta ----------------------------------------------------------


def _mu_integral(model: ContinuousModel, s, t):
    mu = model.mu
    if mu.has_primitive:
        return np.asarray(mu.primitive(t)) - np.asarray(mu.primitive(s))
    s_arr, t_arr = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
    out = np.array(
        [
            integrate_adaptive(mu, a, b, mu.breakpoints, INNER_TOL) if b > a else 0.0
            for a, b in zip(s_arr.ravel(), t_arr.ravel())
        ]
    )
    return out.reshape(s_arr.shape)


def alpha(model: ContinuousModel, s: float, t: float) -> float:
    """Probability that a mature particle alive at ``s`` is still alive at ``t``."""
    if t < s:
        raise ValueError("require t >= s")
    if t == s:
        return 1.0
    return float(np.exp(-_mu_integral(model, s, t)))


def _outer_breakpoints(model: ContinuousModel, lo: float, hi: float) -> list[float]:
    tau = model.tau
    pts = list(model.lam.breakpoints)
    if model.lam.support_start > -math.inf:
        pts.append(model.lam.support_start)
    pts += [b - tau for b in model.mu.breakpoints]
    g = model.g
    if g is not None:
        shifts = {0.0, tau, *(x * tau for x in g.space_breakpoints)}
        pts += [b - w for b in g.time_breakpoints for w in shifts]
        pts += list(g.initiation_breakpoints)
    return sorted({p for p in pts if lo < p < hi})


def _beta_integrand(model: ContinuousModel, t: float, exact: bool):
    tau = model.tau

    def f(u):
        lam = np.asarray(model.lam(u), dtype=float)
        surv = survival_curve(model, u, exact)
        decay = np.exp(-_mu_integral(model, u + tau, t))
        return lam * surv * decay

    return f


def beta(
    model: ContinuousModel, s: float, t: float, tol: float = BETA_TOL, exact_inner: bool = True
) -> float:
    """Mean number of particles initiated in ``[s - tau, t - tau]`` that
    mature and are still alive at ``t``.

    With ``exact_inner`` the killing integral of a partial-killing profile
    uses the exact primitive of ``q``; otherwise both levels are quadratures.
    """
    if t < s:
        raise ValueError("require t >= s")
    tau = model.tau
    lo = max(s - tau, model.lam.support_start)
    hi = t - tau
    if hi <= lo:
        return 0.0
    f = _beta_integrand(model, t, exact_inner)
    return integrate_adaptive(f, lo, hi, _outer_breakpoints(model, lo, hi), tol)


def _require_partial(model: ContinuousModel):
    if not isinstance(model.g, PartialKilling):
        raise ValueError("model killing is not a partial-killing profile")
    if not isinstance(model.lam, Constant) or not isinstance(model.mu, Constant):
        raise ValueError("partial-killing formulas need constant lam and mu")


def _partial_killing_integral(model: ContinuousModel, u: np.ndarray) -> np.ndarray:
    g = model.g
    if g.q.has_primitive:
        return _killing_integral_exact(model, u)
    span = g.delta * model.tau
    u = np.asarray(u, dtype=float)
    flat = u.ravel()
    if span == 0.0:
        return np.zeros_like(u)
    starts, ends, owner = [], [], []
    for idx, x in enumerate(flat):
        e = [0.0, *sorted({b - x for b in g.q.breakpoints if 0 < b - x < span}), span]
        starts.extend(e[:-1])
        ends.extend(e[1:])
        owner.extend([idx] * (len(e) - 1))
    owner = np.asarray(owner)

    def integrand(w, piece):
        return np.asarray(g.q(flat[owner[piece]] + w))

    pieces = integrate_intervals(integrand, np.asarray(starts), np.asarray(ends), INNER_TOL)
    out = np.zeros(flat.size)
    np.add.at(out, owner, pieces)
    return (g.gamma * out).reshape(u.shape)


def beta_partial_killing(model: ContinuousModel, s: float, t: float, tol: float = BETA_TOL) -> float:
    """``beta`` for the partial-killing profile with constant ``lam``, ``mu``.

    The space-time killing integral collapses to ``gamma`` times the integral
    of ``q`` over a window of length ``delta * tau``.
    """
    _require_partial(model)
    if t < s:
        raise ValueError("require t >= s")
    tau = model.tau
    lam = model.lam.value
    mu = model.mu.value
    lo = max(s - tau, model.lam.support_start)
    hi = t - tau
    if hi <= lo:
        return 0.0

    def f(u):
        return np.exp(-mu * (hi - u) - _partial_killing_integral(model, u))

    return lam * integrate_adaptive(f, lo, hi, _outer_breakpoints(model, lo, hi), tol)


def mean_count(model: ContinuousModel, s: float, t: float, m: float = 0) -> float:
    if m < 0:
        raise ValueError("m must be nonnegative")
    return m * alpha(model, s, t) + beta(model, s, t)


def occupation_law(model: ContinuousModel, s: float, t: float, m: int = 0) -> BinomialPoissonLaw:
    if m < 0:
        raise ValueError("m must be nonnegative")
    return BinomialPoissonLaw(int(m), alpha(model, s, t), beta(model, s, t))


# -- drug-free equilibrium start -------------------------------------------


def q_infinity(model: ContinuousModel, t: float, tol: float = BETA_TOL) -> float:
    """Mean mature count at ``t >= 0`` when the initial count is drawn from the
    drug-free equilibrium ``Poisson(lam / mu)``.

    Evaluated as ``(lam/mu) e^{-mu t} + lam int_{-tau}^{t-tau}
    exp(-mu (t - tau - u) - K(u)) du`` where ``K(u)`` is the killing integral
    of an initiation at ``u``.
    """
    _require_partial(model)
    if t < 0:
        raise ValueError("q_infinity is defined for t >= 0")
    lam = model.lam.value
    mu = model.mu.value
    if mu <= 0:
        raise ValueError("equilibrium requires mu > 0")
    return float(q_infinity_curve(model, np.array([t]), tol)[0])


def q_infinity_curve(model: ContinuousModel, times, tol: float = BETA_TOL) -> np.ndarray:
    """:func:`q_infinity` at many sorted times, sharing one outer quadrature."""
    _require_partial(model)
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        return np.zeros(0)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be sorted and nonnegative")
    lam = model.lam.value
    mu = model.mu.value
    if mu <= 0:
        raise ValueError("equilibrium requires mu > 0")
    tau = model.tau
    lo = max(-tau, model.lam.support_start)
    ends = times - tau
    hi = float(ends[-1])
    bps = _outer_breakpoints(model, lo, hi) if hi > lo else []
    edges = np.union1d(np.clip(ends, lo, None), bps)
    edges = np.union1d(edges, [lo])

    # piece k integrates exp(-mu (e_{k+1} - u) - K(u)) over [e_k, e_{k+1}]
    def f(u, k):
        return np.exp(-mu * (edges[k + 1] - u) - _partial_killing_integral(model, u))

    pieces = integrate_pieces(f, edges, tol, indexed=True) if edges.size > 1 else np.zeros(0)
    # cum[k] = int_lo^{e_k} exp(-mu (e_k - u) - K(u)) du
    cum = np.zeros(edges.size)
    for k in range(1, edges.size):
        cum[k] = cum[k - 1] * math.exp(-mu * (edges[k] - edges[k - 1])) + pieces[k - 1]
    pos = np.searchsorted(edges, np.clip(ends, lo, None))
    at_end = np.where(ends <= lo, 0.0, cum[np.clip(pos, 0, edges.size - 1)])
    return (lam / mu) * np.exp(-mu * times) + lam * at_end

"""Drug-induced toxicity on a maturing cell line: kinetics, prediction and
least-squares estimation for the catenary chain and the continuous model.

Parameters are passed as plain dicts with keys ``lam``, ``rho``, ``mu``,
``gamma`` and either ``n0`` (catenary) or ``delta`` (continuous).
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import qmc

from .compartmental_ode import IntegrationError, equilibrium_init, integrate_catenary
from .explicit_model import ContinuousModel, PartialKilling, q_infinity_curve
from .quadrature import QuadratureError
from .rates import Constant, ExpTerm, PiecewiseExponential
from .stochastic_sim import worker_count

__all__ = [
    "DrugKinetics",
    "drug_concentration",
    "drug_concentration_primitive",
    "continuous_model",
    "predict_catenary",
    "predict_continuous",
    "chain_from_continuous",
    "FitProblem",
    "FitResult",
    "DegenerateDataError",
    "fit",
    "rss",
    "generate_synthetic",
    "BenchmarkRow",
    "benchmark_compare",
    "benchmark_csv",
    "REFERENCE_PARAMS",
    "REFERENCE_TIMES",
    "CONTINUOUS_BOUNDS",
    "CATENARY_BOUNDS",
]

REFERENCE_PARAMS = {"lam": 5.0, "rho": 0.2, "mu": 0.04, "gamma": 0.3, "delta": 0.3}
REFERENCE_TIMES = np.arange(1, 41) * 12.0

CONTINUOUS_BOUNDS = {
    "lam": (0.1, 100.0),
    "rho": (0.01, 5.0),
    "mu": (1e-3, 1.0),
    "gamma": (0.0, 5.0),
    "delta": (0.0, 0.99),
}
# chain transit rate bounds scale with the chain: (n - 1) * continuous rho bounds
CATENARY_BOUNDS = {
    "lam": (0.1, 100.0),
    "mu": (1e-3, 1.0),
    "gamma": (0.0, 5.0),
}

FAILED_RSS = 1e300


class DegenerateDataError(ValueError):
    """Observations carry no information (e.g. a constant series)."""


# -- kinetics ------------------------------------------------------------------


@dataclass(frozen=True)
class DrugKinetics:
    """Repeated infusions: rise ``1 - exp(-a_kin s)`` during each infusion,
    then exponential decay at rate ``b_kin``."""

    a_kin: float = 1.86
    b_kin: float = 0.51
    n_doses: int = 5
    dose_interval: float = 24.0
    infusion_duration: float = 0.5

    def __post_init__(self):
        if min(self.a_kin, self.b_kin, self.dose_interval, self.infusion_duration) <= 0:
            raise ValueError("kinetic constants and durations must be positive")
        if self.n_doses < 1:
            raise ValueError("n_doses must be positive")

    def schedule(self) -> PiecewiseExponential:
        a, b, dur = self.a_kin, self.b_kin, self.infusion_duration
        peak = -math.expm1(-a * dur)
        terms = []
        for d in range(self.n_doses):
            s = d * self.dose_interval
            terms.append(ExpTerm(s, s + dur, 1.0, -1.0, a, s))
            terms.append(ExpTerm(s + dur, math.inf, 0.0, peak, b, s + dur))
        return PiecewiseExponential(tuple(terms))


def drug_concentration(kin: DrugKinetics, t):
    return kin.schedule()(t)


def drug_concentration_primitive(kin: DrugKinetics, t):
    """``int_0^t q``; zero at ``t = 0`` and for ``t < 0``."""
    return kin.schedule().primitive(t)


# -- predictions -------------------------------------------------------------------


def continuous_model(params: Mapping[str, float], kin: DrugKinetics) -> ContinuousModel:
    return ContinuousModel(
        rho=float(params["rho"]),
        lam=Constant(float(params["lam"])),
        mu=Constant(float(params["mu"])),
        g=PartialKilling(float(params["gamma"]), float(params["delta"]), kin.schedule()),
    )


def predict_continuous(params: Mapping[str, float], kin: DrugKinetics, times) -> np.ndarray:
    """Mean mature count started from the drug-free equilibrium."""
    return q_infinity_curve(continuous_model(params, kin), np.asarray(times, dtype=float))


def predict_catenary(
    params: Mapping[str, float], n: int, kin: DrugKinetics, times, tol: float = 1e-8
) -> np.ndarray:
    """Last compartment of the ``n``-compartment chain started at equilibrium."""
    lam, rho, mu, gamma = (float(params[k]) for k in ("lam", "rho", "mu", "gamma"))
    n0 = int(params["n0"])
    q0 = equilibrium_init(lam, rho, mu, n)
    states = integrate_catenary(n, lam, rho, mu, gamma, n0, kin.schedule(), q0, times, 0.0, tol)
    return states[:, -1]


def chain_from_continuous(params: Mapping[str, float], n: int) -> dict:
    """Chain parameters with the same mean maturation time and killing span.

    ``n - 1`` transit compartments of rate ``(n - 1) rho`` each, and killing
    on the first ``round(delta (n - 1))`` of them (at least one).
    """
    if n < 2:
        raise ValueError("need at least two compartments")
    n0 = int(np.clip(round(params["delta"] * (n - 1)), 1, n - 1))
    return {
        "lam": params["lam"],
        "rho": params["rho"] * (n - 1),
        "mu": params["mu"],
        "gamma": params["gamma"],
        "n0": n0,
    }


# -- estimation -------------------------------------------------------------------


@dataclass(frozen=True)
class FitProblem:
    """Least-squares problem for one model kind.

    ``model_kind`` is ``"continuous"`` or ``"catenary"`` (then ``n`` is
    required).  ``n0_candidates`` restricts the catenary screen (default
    ``1..n-1``); ``x0`` adds a warm start to the latin-hypercube starts.
    """

    times: np.ndarray
    observations: np.ndarray
    model_kind: str = "continuous"
    n: Optional[int] = None
    kinetics: DrugKinetics = field(default_factory=DrugKinetics)
    bounds: Optional[Mapping[str, tuple[float, float]]] = None
    starts: int = 8
    xatol: float = 1e-8
    maxiter: int = 2000
    x0: Optional[Mapping[str, float]] = None
    n0_candidates: Optional[Sequence[int]] = None
    ode_tol: float = 1e-8
    polish: bool = True

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.observations, dtype=float)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "observations", y)
        if t.ndim != 1 or t.shape != y.shape:
            raise ValueError("times and observations must be 1-d of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if t.size and t[0] < 0:
            raise ValueError("times must be nonnegative")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite and nonnegative")
        if self.model_kind not in ("continuous", "catenary"):
            raise ValueError("model_kind must be 'continuous' or 'catenary'")
        if self.model_kind == "catenary" and (self.n is None or self.n < 2):
            raise ValueError("catenary fits need n >= 2")
        if t.size < len(self.free_names):
            raise ValueError("fewer observations than free parameters")
        if self.starts < 1 and self.x0 is None:
            raise ValueError("need at least one start")
        bounds = self.parameter_bounds
        for name in self.free_names:
            lo, hi = bounds[name]
            if not (0 <= lo < hi < math.inf):
                raise ValueError(f"invalid bounds for {name}: {(lo, hi)}")

    @property
    def free_names(self) -> tuple[str, ...]:
        if self.model_kind == "continuous":
            return ("lam", "rho", "mu", "gamma", "delta")
        return ("lam", "rho", "mu", "gamma")

    @property
    def parameter_bounds(self) -> dict:
        if self.model_kind == "continuous":
            out = dict(CONTINUOUS_BOUNDS)
        else:
            lo, hi = CONTINUOUS_BOUNDS["rho"]
            out = {**CATENARY_BOUNDS, "rho": ((self.n - 1) * lo, (self.n - 1) * hi)}
        if self.bounds:
            out.update({k: tuple(v) for k, v in self.bounds.items() if k in out})
        return out

    def predict(self, params: Mapping[str, float]) -> np.ndarray:
        if self.model_kind == "continuous":
            return predict_continuous(params, self.kinetics, self.times)
        return predict_catenary(params, self.n, self.kinetics, self.times, self.ode_tol)


@dataclass(frozen=True)
class FitResult:
    parameters: dict
    rss: float
    evaluations: int
    runtime: float
    converged: bool
    model_kind: str = "continuous"
    n: Optional[int] = None
    start_rss: tuple[float, ...] = ()
    screen: tuple[tuple[int, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "n": self.n,
            "parameters": self.parameters,
            "rss": self.rss,
            "evaluations": self.evaluations,
            "runtime_s": self.runtime,
            "converged": self.converged,
        }


def rss(problem: FitProblem, params: Mapping[str, float]) -> float:
    resid = problem.observations - problem.predict(params)
    return float(resid @ resid)


class _Transform:
    """Unconstrained coordinates: logit of the position inside the bounds,
    measured on a log scale when the lower bound is positive."""

    def __init__(self, names, bounds):
        self.names = names
        self.lo = np.array([bounds[k][0] for k in names], dtype=float)
        self.hi = np.array([bounds[k][1] for k in names], dtype=float)
        self.log = self.lo > 0

    def unit_to_params(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = self.lo + (self.hi - self.lo) * u
        lg = self.log
        out[lg] = self.lo[lg] * (self.hi[lg] / self.lo[lg]) ** u[lg]
        return out

    def params_to_unit(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        out = (p - self.lo) / (self.hi - self.lo)
        lg = self.log
        out[lg] = np.log(p[lg] / self.lo[lg]) / np.log(self.hi[lg] / self.lo[lg])
        return out

    def decode(self, z) -> dict:
        vals = self.unit_to_params(expit(np.asarray(z, dtype=float)))
        return dict(zip(self.names, (float(v) for v in vals)))

    def encode(self, params: Mapping[str, float]) -> np.ndarray:
        u = self.params_to_unit([params[k] for k in self.names])
        return logit(np.clip(u, 1e-12, 1 - 1e-12))


def _check_informative(y: np.ndarray) -> None:
    if y.size == 0 or np.ptp(y) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
        raise DegenerateDataError("observations are constant; parameters are not estimable")


def _starting_points(problem: FitProblem, tr: _Transform, rng, fixed: Mapping) -> list[np.ndarray]:
    pts = []
    if problem.x0 is not None:
        pts.append(tr.encode({**problem.x0, **fixed}))
    if problem.starts > 0:
        sampler = qmc.LatinHypercube(d=len(tr.names), seed=rng)
        u = sampler.random(problem.starts)
        pts.extend(logit(np.clip(u, 1e-6, 1 - 1e-6)))
    return pts


def _fit_fixed(problem: FitProblem, fixed: Mapping, rng) -> FitResult:
    """Multi-start Nelder-Mead over the free parameters with ``fixed`` held."""
    t_start = time.perf_counter()
    names = problem.free_names
    tr = _Transform(names, problem.parameter_bounds)
    y = problem.observations
    evals = 0

    def objective(z):
        nonlocal evals
        evals += 1
        params = {**tr.decode(z), **fixed}
        try:
            pred = problem.predict(params)
        except (IntegrationError, QuadratureError, FloatingPointError, ValueError):
            return FAILED_RSS
        r = y - pred
        val = float(r @ r)
        return val if math.isfinite(val) else FAILED_RSS

    options = {"xatol": problem.xatol, "fatol": math.inf, "maxiter": problem.maxiter}
    starts = _starting_points(problem, tr, rng, fixed)
    start_rss = []
    best = None
    for idx, z0 in enumerate(starts):
        start_rss.append(objective(z0))
        res = minimize(objective, z0, method="Nelder-Mead", options=options)
        if best is None or res.fun < best[0].fun:
            best = (res, idx)
    res = best[0]
    converged = bool(res.success)
    if problem.polish:
        # restart from the best vertex with a fresh simplex
        again = minimize(objective, res.x, method="Nelder-Mead", options=options)
        if again.fun <= res.fun:
            converged = bool(again.success)
            res = again
    params = {**tr.decode(res.x), **fixed}
    value = rss(problem, params)
    return FitResult(
        parameters=params,
        rss=value,
        evaluations=evals,
        runtime=time.perf_counter() - t_start,
        converged=converged,
        model_kind=problem.model_kind,
        n=problem.n,
        start_rss=tuple(start_rss),
    )


def fit(problem: FitProblem, rng: np.random.Generator | int | None = None) -> FitResult:
    """Ordinary least squares with multi-start Nelder-Mead.

    Catenary problems screen every ``n0`` in the candidate set with a full
    fit each and keep the smallest RSS (ties go to the lowest ``n0``).

    Raises
    ------
    DegenerateDataError
        If the observations are constant.
    """
    _check_informative(problem.observations)
    rng = np.random.default_rng(rng)
    if problem.model_kind == "continuous":
        return _fit_fixed(problem, {}, rng)

    t_start = time.perf_counter()
    cands = problem.n0_candidates or range(1, problem.n)
    cands = sorted({int(c) for c in cands})
    if not cands or cands[0] < 1 or cands[-1] > problem.n - 1:
        raise ValueError(f"n0 candidates must lie in 1..{problem.n - 1}")
    seeds = rng.spawn(len(cands))

    def one(k):
        return _fit_fixed(problem, {"n0": cands[k]}, seeds[k])

    workers = min(worker_count(), len(cands))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(len(cands))))
    else:
        results = [one(k) for k in range(len(cands))]
    best = min(range(len(cands)), key=lambda k: (results[k].rss, cands[k]))
    r = results[best]
    return FitResult(
        parameters=r.parameters,
        rss=r.rss,
        evaluations=sum(x.evaluations for x in results),
        runtime=time.perf_counter() - t_start,
        converged=r.converged,
        model_kind="catenary",
        n=problem.n,
        start_rss=r.start_rss,
        screen=tuple((c, x.rss) for c, x in zip(cands, results)),
    )


def generate_synthetic(
    params: Mapping[str, float],
    model_kind: str,
    times,
    noise_sd: float,
    rng: np.random.Generator,
    n: Optional[int] = None,
    kin: Optional[DrugKinetics] = None,
) -> np.ndarray:
    """Predictions plus independent Gaussian noise, truncated at zero."""
    if noise_sd < 0:
        raise ValueError("noise_sd must be nonnegative")
    kin = kin or DrugKinetics()
    times = np.asarray(times, dtype=float)
    if model_kind == "continuous":
        pred = predict_continuous(params, kin, times)
    elif model_kind == "catenary":
        if n is None:
            raise ValueError("catenary synthesis needs n")
        pred = predict_catenary(params, n, kin, times)
    else:
        raise ValueError("model_kind must be 'continuous' or 'catenary'")
    if noise_sd == 0:
        return pred
    return np.maximum(pred + rng.normal(0.0, noise_sd, pred.shape), 0.0)


# -- benchmark ----------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkRow:
    model: str
    parameters: dict
    rss: float
    runtime: float
    single_fit: float
    evaluations: int
    converged: bool


BENCH_COLUMNS = ("model", "lam", "rho", "mu", "gamma", "n0", "delta", "rss", "runtime_s", "single_fit_s", "evaluations", "converged")


def benchmark_compare(
    times,
    observations,
    chain_sizes: Sequence[int],
    rng: np.random.Generator | int | None = None,
    kin: Optional[DrugKinetics] = None,
    starts: int = 8,
    screen_xatol: float = 1e-4,
    screen_maxiter: int = 150,
) -> list[BenchmarkRow]:
    """Fit the continuous model and each catenary size to the same data.

    The continuous fit is a full multi-start fit.  Each chain screens all
    ``n0`` with a single Nelder-Mead run per ``n0``, warm-started from the
    continuous optimum mapped by :func:`chain_from_continuous`.  A chain's
    runtime is its whole screen, i.e. ``(n - 1)`` times the mean single-fit
    duration.
    """
    kin = kin or DrugKinetics()
    rng = np.random.default_rng(rng)
    times = np.asarray(times, dtype=float)
    y = np.asarray(observations, dtype=float)
    cont = fit(FitProblem(times, y, "continuous", kinetics=kin, starts=starts), rng)
    rows = [
        BenchmarkRow("continuous", cont.parameters, cont.rss, cont.runtime, cont.runtime, cont.evaluations, cont.converged)
    ]
    for n in chain_sizes:
        n = int(n)
        guess = chain_from_continuous(cont.parameters, n)
        guess.pop("n0")
        prob = FitProblem(
            times, y, "catenary", n=n, kinetics=kin, starts=0, x0=guess,
            xatol=screen_xatol, maxiter=screen_maxiter, polish=False,
        )
        res = fit(prob, rng)
        rows.append(
            BenchmarkRow(f"catenary_{n}", res.parameters, res.rss, res.runtime, res.runtime / (n - 1), res.evaluations, res.converged)
        )
    return rows


def benchmark_csv(rows: Sequence[BenchmarkRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)

    def fmt(v):
        return "" if v is None else f"{float(v):.17g}"

    for r in rows:
        p = r.parameters
        w.writerow(
            [r.model, fmt(p.get("lam")), fmt(p.get("rho")), fmt(p.get("mu")), fmt(p.get("gamma")),
             "" if "n0" not in p else str(int(p["n0"])), fmt(p.get("delta")), fmt(r.rss),
             fmt(r.runtime), fmt(r.single_fit), str(r.evaluations), str(r.converged).lower()]
        )
    return buf.getvalue()

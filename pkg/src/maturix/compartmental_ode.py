"""Finite compartmental systems with time-dependent linear rates.

A system of ``n`` compartments carries an inflow schedule per compartment,
an outflow (killing) schedule per compartment and a sparse map of transfer
schedules.  Its deterministic content obeys ``dQ/dt = M(t) Q + lambda(t)``
where ``M`` is the transfer matrix.  Compartments are indexed from 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

from .rates import Constant, PiecewiseExponential, RateSchedule, check_nonnegative, zero

__all__ = [
    "CompartmentalSystem",
    "Trajectory",
    "IntegrationError",
    "StiffnessError",
    "transfer_matrix",
    "drift",
    "integrate",
    "resolvent_constant",
    "catenary_system",
    "equilibrium_init",
    "integrate_catenary",
    "DEFAULT_TOL",
]

DEFAULT_TOL = 1e-8


class IntegrationError(ArithmeticError):
    """The solution left the finite range or the solver gave up."""


class StiffnessError(IntegrationError):
    """Step size underflow: the system is too stiff for the explicit solver."""


@dataclass(frozen=True)
class CompartmentalSystem:
    """Immutable compartmental system.

    Parameters
    ----------
    n : int
        Number of compartments.
    inflow, outflow : tuple of RateSchedule
        Per-compartment creation rates and destruction rates.
    transfer : mapping
        ``(i, j) -> schedule`` transfer rate from ``i`` to ``j``, ``i != j``.
    allow_amplification : bool
        Accept negative outflow values (proportional auto-inflow).
    """

    n: int
    inflow: tuple[RateSchedule, ...]
    outflow: tuple[RateSchedule, ...]
    transfer: Mapping[tuple[int, int], RateSchedule] = field(default_factory=dict)
    allow_amplification: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a system needs at least one compartment")
        if len(self.inflow) != self.n or len(self.outflow) != self.n:
            raise ValueError("inflow and outflow need one schedule per compartment")
        for (i, j) in self.transfer:
            if i == j:
                raise ValueError("transfer map cannot contain diagonal entries")
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"transfer index {(i, j)} out of range")
        for name, scheds in (("inflow", self.inflow), ("transfer", self.transfer.values())):
            for s in scheds:
                if not check_nonnegative(s):
                    raise ValueError(f"negative {name} rate")
        if not self.allow_amplification:
            for s in self.outflow:
                if not check_nonnegative(s):
                    raise ValueError(
                        "negative outflow rate; set allow_amplification to accept it"
                    )
        object.__setattr__(self, "transfer", dict(self.transfer))

    @property
    def breakpoints(self) -> tuple[float, ...]:
        pts = set()
        for s in (*self.inflow, *self.outflow, *self.transfer.values()):
            pts.update(s.breakpoints)
        return tuple(sorted(pts))

    def _unique(self):
        # evaluate each distinct schedule once per time
        seen: dict[int, RateSchedule] = {}
        for s in (*self.inflow, *self.outflow, *self.transfer.values()):
            seen.setdefault(id(s), s)
        return seen

    def rates_at(self, t: float):
        cache = {key: float(s(t)) for key, s in self._unique().items()}
        lam = np.array([cache[id(s)] for s in self.inflow])
        kappa = np.array([cache[id(s)] for s in self.outflow])
        rho = {ij: cache[id(s)] for ij, s in self.transfer.items()}
        return lam, kappa, rho


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    values: np.ndarray  # shape (len(times), n)
    tol: float

    def __post_init__(self):
        if self.values.shape[0] != self.times.shape[0]:
            raise ValueError("times and values lengths differ")

    def at(self, index: int) -> np.ndarray:
        return self.values[:, index]

    def to_csv(self, path) -> None:
        n = self.values.shape[1]
        header = ",".join(["t"] + [f"q{i + 1}" for i in range(n)])
        rows = np.column_stack([self.times, self.values])
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def _matrix(n: int, kappa: np.ndarray, rho: Mapping[tuple[int, int], float]) -> np.ndarray:
    m = np.zeros((n, n))
    for (i, j), r in rho.items():
        m[j, i] += r
        m[i, i] -= r
    m[np.diag_indices(n)] -= kappa
    return m


def transfer_matrix(system: CompartmentalSystem, t: float) -> np.ndarray:
    """``M(t)``: entry ``(j, i)`` is the rate from ``i`` to ``j``; the diagonal
    holds minus the total transfer-out plus outflow of each compartment."""
    _, kappa, rho = system.rates_at(t)
    return _matrix(system.n, kappa, rho)


def drift(system: CompartmentalSystem, t: float, Q) -> np.ndarray:
    """Affine drift ``lambda(t) + M(t) Q`` of the mean dynamics."""
    q = np.asarray(Q, dtype=float)
    if q.shape != (system.n,):
        raise ValueError(f"state must have length {system.n}, got shape {q.shape}")
    lam, kappa, rho = system.rates_at(t)
    return lam + _matrix(system.n, kappa, rho) @ q


def resolvent_constant(M, dt: float) -> np.ndarray:
    """``exp(dt * M)`` by scaling and squaring with a Pade approximant."""
    m = np.asarray(M, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("M must be square")
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if not np.all(np.isfinite(m)) or not math.isfinite(dt):
        raise ValueError("non-finite entries")
    return scipy.linalg.expm(dt * m)


def integrate(
    system: CompartmentalSystem,
    Q0,
    t0: float,
    t1: float,
    tol: float = DEFAULT_TOL,
    t_eval: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Solve ``dQ/dt = M(t) Q + lambda(t)`` on ``[t0, t1]``.

    Dormand-Prince 5(4) with mixed relative/absolute error control ``tol``,
    restarted at every schedule breakpoint inside the window.  Without
    ``t_eval`` the trajectory holds every accepted step (breakpoints
    included); with it, values come from the 4th-order dense output.

    Raises
    ------
    StiffnessError
        If the step size underflows.
    IntegrationError
        If the state becomes non-finite.
    """
    y = np.asarray(Q0, dtype=float).copy()
    if y.shape != (system.n,):
        raise ValueError(f"Q0 must have length {system.n}")
    if t1 < t0:
        raise ValueError("require t1 >= t0")
    if tol <= 0:
        raise ValueError("tol must be positive")

    edges = [t0, *[b for b in system.breakpoints if t0 < b < t1], t1]
    user = None if t_eval is None else np.asarray(t_eval, dtype=float)
    if user is not None and (np.any(user < t0) or np.any(user > t1)):
        raise ValueError("t_eval outside [t0, t1]")

    def rhs(t, q):
        return drift(system, t, q)

    times, values = [t0], [y.copy()]
    out_t: list[np.ndarray] = []
    out_y: list[np.ndarray] = []
    if user is not None and np.any(user == t0):
        hits = user[user == t0]
        out_t.append(hits)
        out_y.append(np.tile(y, (hits.size, 1)))
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        sol = solve_ivp(
            rhs, (a, b), y, method="RK45", rtol=tol, atol=tol, dense_output=user is not None
        )
        if sol.status == -1:
            raise StiffnessError(f"integration failed on [{a}, {b}]: {sol.message}")
        y = sol.y[:, -1]
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at t={b}")
        if user is None:
            times.extend(sol.t[1:])
            values.extend(sol.y[:, 1:].T)
        else:
            pts = user[(user > a) & (user <= b)]
            if pts.size:
                out_t.append(pts)
                out_y.append(sol.sol(pts).T)
    if user is None:
        traj_t, traj_y = np.asarray(times), np.asarray(values)
    else:
        traj_t = np.concatenate(out_t) if out_t else np.zeros(0)
        traj_y = np.concatenate(out_y) if out_y else np.zeros((0, system.n))
        order = np.argsort(traj_t, kind="stable")
        traj_t, traj_y = traj_t[order], traj_y[order]
    if not np.all(np.isfinite(traj_y)):
        raise IntegrationError("non-finite state")
    return Trajectory(traj_t, traj_y, tol)


def catenary_system(
    n: int,
    lam: float,
    rho: float,
    mu: float,
    gamma: float = 0.0,
    n0: int = 1,
    q: Optional[RateSchedule] = None,
) -> CompartmentalSystem:
    """Catenary chain: inflow ``lam`` into compartment 1, transit ``rho``
    along the chain, killing ``gamma * q(t)`` on compartments ``1..n0`` and
    elimination ``mu`` from compartment ``n``.
    """
    if n < 2:
        raise ValueError("a catenary chain needs at least two compartments")
    if not 1 <= n0 <= n - 1:
        raise ValueError(f"n0 must lie in 1..{n - 1}, got {n0}")
    if min(lam, rho, mu, gamma) < 0:
        raise ValueError("rates must be nonnegative")
    none = zero()
    inflow = (Constant(float(lam)),) + (none,) * (n - 1)
    transit = Constant(float(rho))
    if gamma != 0.0 and q is not None:
        killing = q.scaled(gamma)
    else:
        killing = none
    outflow = tuple(killing if i < n0 else none for i in range(n - 1)) + (Constant(float(mu)),)
    transfer = {(i, i + 1): transit for i in range(n - 1)}
    return CompartmentalSystem(n, inflow, outflow, transfer)


# explicit step count beyond which the catenary path switches to SDIRK
STIFF_STEPS = 5000


def equilibrium_init(lam: float, rho: float, mu: float, n: int) -> np.ndarray:
    """Drug-free steady state ``(lam/rho, ..., lam/rho, lam/mu)``."""
    if rho == 0 or mu == 0:
        raise ValueError("rho and mu must be nonzero")
    if n < 1:
        raise ValueError("n must be positive")
    out = np.full(n, lam / rho, dtype=float)
    out[-1] = lam / mu
    return out


def integrate_catenary(
    n: int,
    lam: float,
    rho: float,
    mu: float,
    gamma: float,
    n0: int,
    q: Optional[RateSchedule],
    Q0,
    times: Sequence[float],
    t0: float = 0.0,
    tol: float = DEFAULT_TOL,
    method: str = "auto",
) -> np.ndarray:
    """Catenary chain states at ``times`` (shape ``(len(times), n)``).

    Compiled fast path for piecewise-exponential drug profiles; any other
    schedule goes through :func:`integrate`.  ``method`` is ``"explicit"``
    (Dormand-Prince), ``"implicit"`` (SDIRK, for stiff chains) or ``"auto"``,
    which picks SDIRK once the explicit stability limit would force more
    than about ``STIFF_STEPS`` steps over the span.
    """
    from . import _catenary_kernel as kern

    times = np.asarray(times, dtype=float)
    if times.size and (np.any(np.diff(times) < 0) or times[0] < t0):
        raise ValueError("times must be sorted and not precede t0")
    if not 1 <= n0 <= n - 1:
        raise ValueError(f"n0 must lie in 1..{n - 1}, got {n0}")
    if q is None or gamma == 0.0:
        terms = np.zeros((0, 6))
    elif isinstance(q, PiecewiseExponential):
        terms = q.as_arrays()
    else:
        system = catenary_system(n, lam, rho, mu, gamma, n0, q)
        t_end = float(times[-1]) if times.size else t0
        return integrate(system, Q0, t0, t_end, tol, t_eval=times).values

    y0 = np.asarray(Q0, dtype=float)
    if y0.shape != (n,):
        raise ValueError(f"Q0 must have length {n}")
    if times.size == 0:
        return np.zeros((0, n))
    bps = np.array([b for b in (q.breakpoints if terms.size else ()) if t0 < b < times[-1]])
    stops = np.union1d(times[times > t0], bps)
    record = np.isin(stops, times)
    if method not in ("auto", "explicit", "implicit"):
        raise ValueError("method must be 'auto', 'explicit' or 'implicit'")
    if method == "auto":
        q_sup = q.sup(t0, float(times[-1])) if terms.size else 0.0
        stiffness = (abs(rho) + abs(gamma) * q_sup + abs(mu)) * (float(times[-1]) - t0)
        method = "implicit" if stiffness > 3.3 * STIFF_STEPS else "explicit"
    solver = kern.integrate_catenary_sdirk if method == "implicit" else kern.integrate_catenary
    status, states, _ = solver(
        float(lam), float(rho), float(mu), float(gamma), int(n0), terms,
        y0, float(t0), stops, record, float(tol), float(tol),
    )
    if status == kern.STATUS_UNDERFLOW:
        raise StiffnessError("step size underflow in catenary integration")
    if status == kern.STATUS_NONFINITE:
        raise IntegrationError("non-finite state in catenary integration")
    out = np.empty((times.size, n))
    idx = np.searchsorted(stops, times)
    at_start = times == t0
    out[at_start] = y0
    out[~at_start] = states[idx[~at_start]]
    return out

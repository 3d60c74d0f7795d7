"""Monte-Carlo engines.

* :func:`simulate_network` - exact jump paths of the interacting M/M/inf
  queue network attached to a :class:`CompartmentalSystem`, by thinning.
* :func:`simulate_particle_chain` - one particle hopping along ``n + 1``
  maturation states with time-dependent killing.
* :func:`simulate_limit_particle` - its continuous limit (deterministic
  drift across ``[0, 1]`` and killing by the field ``g``).
* :func:`simulate_counting_process` - count of living mature particles built
  from Poisson initiations, Bernoulli survival marks, the deterministic lag
  and independent post-maturation lifetimes.

Randomness comes from :class:`RngStream` objects keyed by ``(seed, index)``.
Vectorised engines key their streams by *block* index, a block being
``BLOCK_SIZE`` consecutive replicas, so results do not depend on how blocks
are spread over workers.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .compartmental_ode import CompartmentalSystem
from .explicit_model import ContinuousModel, survival_curve
from .rates import Constant, RateSchedule

__all__ = [
    "RngStream",
    "NetworkState",
    "JumpPath",
    "ParticleOutcome",
    "PointSet",
    "MajorantError",
    "simulate_network",
    "simulate_network_replicas",
    "simulate_particle_chain",
    "simulate_particle_chains",
    "chain_killing_from_model",
    "simulate_limit_particle",
    "simulate_limit_particles",
    "sample_inhomogeneous_poisson",
    "simulate_counting_process",
    "simulate_counting_replicas",
    "empirical_pmf",
    "worker_count",
    "BLOCK_SIZE",
]

BLOCK_SIZE = 4096
MAJORANT_PIECES = 64


class MajorantError(RuntimeError):
    """The thinning majorant was exceeded or could not be built."""


@dataclass(frozen=True)
class RngStream:
    """Independent random stream keyed by ``(seed, index)``.

    Uses a counter-based Philox generator seeded through ``SeedSequence``
    with the index as spawn key, so any stream can be rebuilt in isolation.
    """

    seed: int
    index: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.index),))
        return np.random.Generator(np.random.Philox(ss))


def worker_count() -> int:
    cap = os.environ.get("MATURIX_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)


def _blocks(replicas: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int, int]]:
    """(block index, first replica, size) triples covering ``replicas``."""
    out = []
    for k, start in enumerate(range(0, replicas, block_size)):
        out.append((k, start, min(block_size, replicas - start)))
    return out


def _map_blocks(fn: Callable, replicas: int, workers: Optional[int] = None) -> list:
    blocks = _blocks(replicas)
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(blocks) == 1:
        return [fn(*b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))


# -- data types --------------------------------------------------------------


@dataclass(frozen=True)
class NetworkState:
    x: tuple[int, ...]
    time: float

    def __post_init__(self):
        if any(v < 0 for v in self.x):
            raise ValueError("occupation numbers must be nonnegative")


@dataclass(frozen=True)
class JumpPath:
    """Jump times and the state right after each jump (first row: initial)."""

    times: np.ndarray
    states: np.ndarray

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        if np.any(idx < 0):
            raise ValueError("time precedes the path start")
        return self.states[idx]

    def to_csv(self, path, component: int | None = None) -> None:
        vals = self.states.sum(axis=1) if component is None else self.states[:, component]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,n\n")
            for t, v in zip(self.times, vals):
                fh.write(f"{t:.17g},{int(v)}\n")


@dataclass(frozen=True)
class ParticleOutcome:
    status: str  # "matured" or "killed"
    maturation_time: Optional[float] = None
    killing_time: Optional[float] = None

    def __post_init__(self):
        if self.status not in ("matured", "killed"):
            raise ValueError("status must be 'matured' or 'killed'")
        if (self.status == "matured") != (self.maturation_time is not None):
            raise ValueError("maturation_time is present iff the particle matured")
        if (self.status == "killed") != (self.killing_time is not None):
            raise ValueError("killing_time is present iff the particle was killed")


@dataclass(frozen=True)
class PointSet:
    times: np.ndarray
    window: tuple[float, float]

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("points must be strictly increasing")

    def __len__(self) -> int:
        return int(self.times.size)

    def count(self, a: float, b: float) -> int:
        return int(np.sum((self.times >= a) & (self.times < b)))


# -- inhomogeneous Poisson sampling -----------------------------------------


def _majorant_pieces(intensity: RateSchedule, t0: float, t1: float):
    """Piecewise-constant majorant: edges and level on each piece."""
    cuts = [t0, *intensity.breakpoints_in(t0, t1), t1]
    edges = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        sub = np.linspace(a, b, max(2, int(MAJORANT_PIECES * (b - a) / max(t1 - t0, 1e-300)) + 1))
        edges.extend(sub[:-1])
    edges.append(t1)
    edges = np.asarray(edges)
    levels = np.array([intensity.sup(a, b) for a, b in zip(edges[:-1], edges[1:])])
    if not np.all(np.isfinite(levels)):
        raise MajorantError("intensity is unbounded on the window")
    return edges, levels


def _thin_batch(intensity, edges, levels, replicas, rng):
    """Points of ``replicas`` independent paths; returns (times, replica ids)."""
    widths = np.diff(edges)
    counts = rng.poisson(levels * widths, size=(replicas, levels.size))
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    piece = np.repeat(np.tile(np.arange(levels.size), replicas), counts.ravel())
    owner = np.repeat(np.arange(replicas), counts.sum(axis=1))
    times = edges[piece] + widths[piece] * rng.random(total)
    values = np.asarray(intensity(times), dtype=float)
    if np.any(values > levels[piece] * (1 + 1e-12)):
        raise MajorantError("intensity exceeded its sampled majorant")
    keep = rng.random(total) * levels[piece] < values
    return times[keep], owner[keep]


def sample_inhomogeneous_poisson(
    intensity: RateSchedule, t0: float, t1: float, rng: np.random.Generator
) -> PointSet:
    """One path of a Poisson process with the given intensity on ``[t0, t1)``,
    by thinning against a piecewise-constant majorant."""
    if t1 < t0:
        raise ValueError("require t1 >= t0")
    if t1 == t0:
        return PointSet(np.zeros(0), (t0, t1))
    edges, levels = _majorant_pieces(intensity, t0, t1)
    times, _ = _thin_batch(intensity, edges, levels, 1, rng)
    return PointSet(np.sort(times), (t0, t1))


# -- post-maturation lifetimes -----------------------------------------------


def _death_times(mu: RateSchedule, start: np.ndarray, rng, horizon: float) -> np.ndarray:
    """First event after each ``start`` of a hazard ``mu``; ``inf`` if after
    ``horizon``."""
    start = np.asarray(start, dtype=float)
    if isinstance(mu, Constant) and mu.support_start == -math.inf:
        if mu.value == 0:
            return np.full(start.shape, np.inf)
        return start + rng.exponential(1.0 / mu.value, start.shape)
    out = np.full(start.shape, np.inf)
    if start.size == 0:
        return out
    lo = float(start.min())
    if lo >= horizon:
        return out
    edges, levels = _majorant_pieces(mu, lo, horizon)
    t = start.copy()
    alive = np.flatnonzero(t < horizon)
    piece = np.clip(np.searchsorted(edges, t[alive], side="right") - 1, 0, levels.size - 1)
    while alive.size:
        lev = levels[piece]
        step = np.where(lev > 0, rng.exponential(1.0, alive.size) / np.where(lev > 0, lev, 1), np.inf)
        cand = t[alive] + step
        right = edges[piece + 1]
        beyond = cand >= right
        # move to the next piece without an event
        t[alive[beyond]] = right[beyond]
        piece[beyond] += 1
        hit = ~beyond
        idx = alive[hit]
        t[idx] = cand[hit]
        u = rng.random(idx.size) * lev[hit]
        val = np.asarray(mu(cand[hit]), dtype=float)
        if np.any(val > lev[hit] * (1 + 1e-12)):
            raise MajorantError("mu exceeded its sampled majorant")
        accepted = u < val
        out[idx[accepted]] = cand[hit][accepted]
        still = np.ones(alive.size, dtype=bool)
        still[np.flatnonzero(hit)[accepted]] = False
        still &= piece < levels.size
        alive = alive[still]
        piece = piece[still]
    return out


# -- counting process ----------------------------------------------------------


def simulate_counting_replicas(
    model: ContinuousModel,
    N0,
    t0: float,
    sample_times: Sequence[float],
    replicas: int,
    seed: int,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Counts of living mature particles for many replicas.

    Parameters
    ----------
    N0 : int or callable
        Fixed initial count, or ``N0(size, rng)`` returning initial counts.
    sample_times : sequence of float
        Sorted times ``>= t0``.

    Returns
    -------
    ndarray of shape ``(replicas, len(sample_times))``.
    """
    times = np.asarray(sample_times, dtype=float)
    if times.size == 0 or np.any(np.diff(times) < 0) or times[0] < t0:
        raise ValueError("sample_times must be sorted, nonempty and >= t0")
    if replicas < 1:
        raise ValueError("replicas must be positive")
    tau = model.tau
    lam = model.lam
    lo = max(t0 - tau, lam.support_start)
    hi = float(times[-1]) - tau
    edges = levels = None
    if hi > lo:
        edges, levels = _majorant_pieces(lam, lo, hi)

    def run(block, start, size):
        rng = RngStream(seed, block).generator()
        if callable(N0):
            m = np.asarray(N0(size, rng), dtype=np.int64)
        else:
            m = np.full(size, int(N0), dtype=np.int64)
        counts = np.zeros((size, times.size), dtype=np.int64)
        # initial mature particles: lifetimes from t0
        owners0 = np.repeat(np.arange(size), m)
        death0 = _death_times(model.mu, np.full(owners0.size, t0), rng, float(times[-1]))
        for j, t in enumerate(times):
            np.add.at(counts[:, j], owners0[death0 > t], 1)
        if edges is None:
            return counts
        init, owner = _thin_batch(lam, edges, levels, size, rng)
        # survival marks, independent of the initiation process
        p = survival_curve(model, init) if init.size else init
        survived = rng.random(init.size) < p
        matured = init[survived] + tau
        owner = owner[survived]
        death = _death_times(model.mu, matured, rng, float(times[-1]))
        for j, t in enumerate(times):
            alive = (matured <= t) & (death > t)
            np.add.at(counts[:, j], owner[alive], 1)
        return counts

    return np.concatenate(_map_blocks(run, replicas, workers), axis=0)


def simulate_counting_process(
    model: ContinuousModel,
    N0: int,
    t0: float,
    t1: float,
    sample_times: Sequence[float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Counts at ``sample_times`` (within ``[t0, t1]``) for a single path."""
    times = np.asarray(sample_times, dtype=float)
    if np.any(times > t1):
        raise ValueError("sample_times beyond t1")
    seed = int(rng.integers(0, 2**63 - 1))
    return simulate_counting_replicas(model, N0, t0, times, 1, seed, workers=1)[0]


# -- single particles ----------------------------------------------------------


def chain_killing_from_model(model: ContinuousModel, n: int):
    """``kappa(t, i) = g(t, i / n)`` for ``i < n`` and ``mu(t)`` at ``i = n``."""

    def kappa(t, i):
        t = np.asarray(t, dtype=float)
        i = np.asarray(i)
        inner = model.killing(t, i / n)
        return np.where(i >= n, np.asarray(model.mu(t)), inner)

    return kappa


def _killing_bound(kappa, n, T, horizon):
    grid = np.linspace(T, T + horizon, 4097)
    states = np.arange(n)
    vals = kappa(grid[:, None], states[None, :])
    top = float(np.max(vals))
    if not math.isfinite(top):
        raise MajorantError("killing rate is unbounded")
    return max(top, 0.0) * 1.05


def simulate_particle_chains(
    n: int,
    rho: float,
    kappa: Callable,
    T: float,
    size: int,
    rng: np.random.Generator,
    bound: Optional[float] = None,
    horizon: Optional[float] = None,
):
    """Vectorised :func:`simulate_particle_chain` for ``size`` particles.

    Hops occur at rate ``n * rho``; killing at rate ``kappa(t, i)`` in state
    ``i < n`` is thinned against a constant bound (sampled on
    ``[T, T + horizon]`` with a 1.05 safety factor unless given).

    Returns ``(matured, time)`` arrays: the maturation time when matured,
    else the killing time.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    hop = n * rho
    if horizon is None:
        horizon = 20.0 / rho
    if bound is None:
        bound = _killing_bound(kappa, n, T, horizon)
    total = hop + bound
    state = np.zeros(size, dtype=np.int64)
    t = np.full(size, float(T))
    matured = np.zeros(size, dtype=bool)
    done = np.zeros(size, dtype=bool)
    active = np.arange(size)
    while active.size:
        t[active] += rng.exponential(1.0 / total, active.size)
        u = rng.random(active.size) * total
        is_hop = u < hop
        k = np.zeros(active.size)
        cand = ~is_hop
        if np.any(cand):
            k[cand] = kappa(t[active[cand]], state[active[cand]])
            if np.any(k[cand] > bound * (1 + 1e-12)):
                raise MajorantError("killing rate exceeded its bound")
        killed = cand & (u < hop + k)
        state[active[is_hop]] += 1
        reached = is_hop & (state[active] >= n)
        matured[active[reached]] = True
        done[active[reached | killed]] = True
        active = active[~(reached | killed)]
    return matured, t


def simulate_particle_chain(
    n: int, rho: float, kappa: Callable, T: float, rng: np.random.Generator
) -> ParticleOutcome:
    """One particle started in state 0 at ``T``; matured iff it reaches ``n``."""
    matured, t = simulate_particle_chains(n, rho, kappa, T, 1, rng)
    if matured[0]:
        return ParticleOutcome("matured", maturation_time=float(t[0]))
    return ParticleOutcome("killed", killing_time=float(t[0]))


def simulate_limit_particles(
    model: ContinuousModel, T: float, size: int, rng: np.random.Generator, horizon: float = math.inf
):
    """Vectorised :func:`simulate_limit_particle`.

    Returns ``(matured, maturation_time, death_time)``; ``maturation_time``
    is ``nan`` for particles killed during maturation and ``death_time`` is
    ``inf`` when no death occurs before ``horizon``.
    """
    tau = model.tau
    rho = model.rho
    g = model.g
    kill_time = np.full(size, np.inf)
    if g is not None:
        # thinning of t -> g(t, rho (t - T)) on [T, T + tau)
        sched = _PathKilling(model, T)
        edges, levels = _majorant_pieces(sched, T, T + tau)
        times, owner = _thin_batch(sched, edges, levels, size, rng)
        if times.size:
            order = np.lexsort((times, owner))
            times, owner = times[order], owner[order]
            first = np.ones(owner.size, dtype=bool)
            first[1:] = owner[1:] != owner[:-1]
            kill_time[owner[first]] = times[first]
    matured = ~np.isfinite(kill_time)
    mat_time = np.where(matured, T + tau, np.nan)
    death = kill_time.copy()
    m_idx = np.flatnonzero(matured)
    death[m_idx] = _death_times(model.mu, np.full(m_idx.size, T + tau), rng, horizon)
    return matured, mat_time, death


class _PathKilling(RateSchedule):
    """Killing rate seen along the deterministic path started at ``T``."""

    kind = "function"

    def __init__(self, model: ContinuousModel, T: float):
        self.model = model
        self.T = T
        tau = model.tau
        g = model.g
        pts = {b for b in g.time_breakpoints if T < b < T + tau}
        pts |= {T + x * tau for x in g.space_breakpoints if 0 < x < 1}
        self.breakpoints = tuple(sorted(pts))
        self.support_start = T

    def _eval(self, t):
        x = np.clip(self.model.rho * (t - self.T), 0.0, 1.0)
        vals = np.where(x < 1.0, self.model.killing(t, np.minimum(x, np.nextafter(1.0, 0))), 0.0)
        if np.any(vals < 0):
            raise MajorantError("thinning needs a nonnegative killing rate")
        return vals


def simulate_limit_particle(
    model: ContinuousModel, T: float, rng: np.random.Generator
) -> ParticleOutcome:
    """Limit particle initiated at ``T``.

    Returns ``killed`` with the killing time when it dies during maturation
    and ``matured`` at ``T + tau`` otherwise.  The post-maturation death
    time is available through :func:`simulate_limit_particles`.
    """
    matured, mat, death = simulate_limit_particles(model, T, 1, rng)
    if matured[0]:
        return ParticleOutcome("matured", maturation_time=float(mat[0]))
    return ParticleOutcome("killed", killing_time=float(death[0]))


# -- network -------------------------------------------------------------------


def _network_bounds(system: CompartmentalSystem, a: float, b: float):
    lam = np.array([s.sup(a, b) for s in system.inflow])
    kap = np.array([max(s.sup(a, b), 0.0) for s in system.outflow])
    out = np.zeros(system.n)
    for (i, _), s in system.transfer.items():
        out[i] += s.sup(a, b)
    return lam, kap + out


def simulate_network(
    system: CompartmentalSystem,
    x0: NetworkState,
    t1: float,
    rng: np.random.Generator,
    t0: Optional[float] = None,
) -> JumpPath:
    """Exact jump path of the interacting queue network on ``[t0, t1]``.

    Transitions: birth in ``i`` at rate ``lam_i(t)``, transfer ``i -> j`` at
    ``x_i rho_ij(t)``, death in ``i`` at ``x_i kappa_i(t)``.  Candidate events
    are drawn at the rate of a piecewise-constant bound of the total
    intensity (refreshed at breakpoints and after every jump) and accepted
    with the true-to-bound ratio.
    """
    if t0 is None:
        t0 = x0.time
    if t1 < t0:
        raise ValueError("require t1 >= t0")
    n = system.n
    x = np.array(x0.x, dtype=np.int64)
    if x.size != n:
        raise ValueError("state dimension mismatch")
    if system.allow_amplification:
        raise ValueError("negative outflow has no jump-process interpretation")
    cuts = [t0, *[b for b in system.breakpoints if t0 < b < t1], t1]
    bounds = [_network_bounds(system, a, b) for a, b in zip(cuts[:-1], cuts[1:])]
    transfers = list(system.transfer.items())
    times = [t0]
    states = [x.copy()]
    t = t0
    for (a, b), (lam_b, leave_b) in zip(zip(cuts[:-1], cuts[1:]), bounds):
        t = max(t, a)
        while True:
            rate = float(lam_b.sum() + x @ leave_b)
            if rate <= 0:
                break
            t += rng.exponential(1.0 / rate)
            if t >= b:
                break
            lam, kappa, rho = system.rates_at(t)
            # actual event rates in a fixed order
            events = [("birth", i, -1, lam[i]) for i in range(n)]
            events += [("move", i, j, x[i] * rho[(i, j)]) for (i, j), _ in transfers]
            events += [("death", i, -1, x[i] * kappa[i]) for i in range(n)]
            u = rng.random() * rate
            acc = 0.0
            for kind, i, j, r in events:
                acc += r
                if u < acc:
                    if kind == "birth":
                        x[i] += 1
                    elif kind == "move":
                        x[i] -= 1
                        x[j] += 1
                    else:
                        x[i] -= 1
                    times.append(t)
                    states.append(x.copy())
                    break
            else:
                if acc > rate * (1 + 1e-12):
                    raise MajorantError("network intensity exceeded its bound")
    return JumpPath(np.asarray(times), np.asarray(states))


def simulate_network_replicas(
    system: CompartmentalSystem,
    x0: NetworkState,
    sample_times: Sequence[float],
    replicas: int,
    seed: int,
    workers: Optional[int] = None,
) -> np.ndarray:
    """States at ``sample_times`` for many replicas; shape ``(R, T, n)``.

    Replica ``r`` uses stream ``RngStream(seed, r)``.
    """
    times = np.asarray(sample_times, dtype=float)
    t_end = float(times.max())

    def one(r):
        path = simulate_network(system, x0, t_end, RngStream(seed, r).generator())
        return path.state_at(times)

    workers = worker_count() if workers is None else workers
    if workers == 1:
        return np.stack([one(r) for r in range(replicas)])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.stack(list(pool.map(one, range(replicas))))


def empirical_pmf(samples) -> np.ndarray:
    x = np.asarray(samples)
    if x.size == 0:
        raise ValueError("no samples")
    if np.any(x < 0):
        raise ValueError("counts must be nonnegative")
    return np.bincount(x.astype(np.int64).ravel()) / x.size

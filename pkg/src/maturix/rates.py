"""Scalar rate schedules of time.

A schedule is a piecewise-smooth function ``t -> rate`` with a list of
breakpoints where smoothness may fail and a ``support_start`` before which
the value is zero.  Schedules are immutable, vectorised over numpy arrays,
and carry an exact primitive whenever one is cheap to write down.

All primitives are anchored at zero: ``schedule.primitive(t)`` returns the
signed integral of the schedule over ``[0, t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "RateSchedule",
    "Constant",
    "ExpTerm",
    "PiecewiseExponential",
    "Tabulated",
    "FunctionSchedule",
    "Composite",
    "constant",
    "zero",
]

# Safety factor applied to sampled suprema when building thinning majorants.
MAJORANT_SAFETY = 1.05
_MAJORANT_SAMPLES = 257


def _as_output(values: np.ndarray, scalar: bool):
    return float(values) if scalar else values


class RateSchedule:
    """Base class; subclasses implement ``_eval`` and optionally ``_prim``."""

    kind: str = "abstract"
    breakpoints: tuple[float, ...] = ()
    support_start: float = -math.inf

    def __call__(self, t):
        arr = np.asarray(t, dtype=float)
        out = self._eval(arr)
        if self.support_start > -math.inf:
            out = np.where(arr < self.support_start, 0.0, out)
        return _as_output(out, arr.ndim == 0)

    def _eval(self, t: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def has_primitive(self) -> bool:
        return False

    def primitive(self, t):
        """Exact integral over ``[0, t]``."""
        raise NotImplementedError(f"{type(self).__name__} has no exact primitive")

    def integral(self, a: float, b: float, tol: float = 1e-12) -> float:
        """Integral over ``[a, b]``; exact when a primitive exists."""
        if self.has_primitive:
            return float(self.primitive(b) - self.primitive(a))
        from .quadrature import integrate_adaptive

        lo = max(a, self.support_start) if a <= b else a
        if b <= lo:
            return 0.0
        return integrate_adaptive(self, lo, b, self.breakpoints, tol)

    def breakpoints_in(self, a: float, b: float) -> list[float]:
        pts = [x for x in self.breakpoints if a < x < b]
        if a < self.support_start < b:
            pts.append(self.support_start)
        return sorted(set(pts))

    def sup(self, a: float, b: float) -> float:
        """Upper bound of the schedule on ``[a, b]`` for thinning.

        Dense sampling plus the breakpoints and their left limits, inflated by
        ``MAJORANT_SAFETY``.  Exact for constants.
        """
        if b < a:
            raise ValueError("empty window")
        grid = np.linspace(a, b, _MAJORANT_SAMPLES)
        bps = np.array(self.breakpoints_in(a, b), dtype=float)
        if bps.size:
            eps = 1e-9 * np.maximum(1.0, np.abs(bps))
            grid = np.concatenate([grid, bps, bps - eps])
        values = np.asarray(self(grid), dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("schedule is unbounded on the requested window")
        return float(values.max()) * MAJORANT_SAFETY

    def min_value(self, a: float, b: float) -> float:
        grid = np.linspace(a, b, _MAJORANT_SAMPLES)
        bps = np.array(self.breakpoints_in(a, b), dtype=float)
        if bps.size:
            grid = np.concatenate([grid, bps])
        return float(np.min(self(grid)))

    # composition helpers -------------------------------------------------
    def scaled(self, factor: float) -> "Composite":
        return Composite(((float(factor), 0.0, self),))

    def shifted(self, delay: float) -> "Composite":
        """Schedule ``t -> self(t - delay)``."""
        return Composite(((1.0, float(delay), self),))

    def __add__(self, other: "RateSchedule") -> "Composite":
        return Composite(((1.0, 0.0, self), (1.0, 0.0, other)))


@dataclass(frozen=True)
class Constant(RateSchedule):
    """Constant ``value`` on ``[support_start, inf)``, zero before."""

    value: float
    support_start: float = -math.inf
    kind: str = field(default="constant", init=False)

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("constant rate must be finite")

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return () if self.support_start == -math.inf else (self.support_start,)

    def _eval(self, t):
        return np.full_like(t, self.value, dtype=float)

    @property
    def has_primitive(self) -> bool:
        return True

    def primitive(self, t):
        arr = np.asarray(t, dtype=float)
        s0 = self.support_start
        if s0 == -math.inf:
            out = self.value * arr
        else:
            out = self.value * (np.maximum(arr, s0) - max(0.0, s0))
        return _as_output(out, arr.ndim == 0)

    def sup(self, a, b):
        return max(self.value, 0.0) if b >= self.support_start else 0.0

    @property
    def is_zero(self) -> bool:
        return self.value == 0.0


def constant(value: float, support_start: float = -math.inf) -> Constant:
    return Constant(float(value), float(support_start))


def zero() -> Constant:
    return Constant(0.0)


@dataclass(frozen=True)
class ExpTerm:
    """``const + coef * exp(-rate * (t - anchor))`` on ``[start, end)``."""

    start: float
    end: float
    const: float
    coef: float
    rate: float
    anchor: float

    def antiderivative(self, x: np.ndarray) -> np.ndarray:
        # expm1 form stays accurate as rate -> 0
        d = x - self.anchor
        if self.rate == 0.0:
            return self.const * x + self.coef * d
        return self.const * x - self.coef * np.expm1(-self.rate * d) / self.rate


@dataclass(frozen=True)
class PiecewiseExponential(RateSchedule):
    """Sum of exponential terms, each active on its own half-open window.

    This covers infusion/decay drug profiles and bi-exponential pulses and
    admits a closed-form primitive.
    """

    terms: tuple[ExpTerm, ...]
    kind: str = field(default="piecewise-exponential", init=False)

    def __post_init__(self):
        for term in self.terms:
            if not term.start < term.end:
                raise ValueError("each term needs start < end")

    @property
    def breakpoints(self) -> tuple[float, ...]:
        pts = set()
        for term in self.terms:
            for x in (term.start, term.end):
                if math.isfinite(x):
                    pts.add(x)
        return tuple(sorted(pts))

    @property
    def support_start(self) -> float:
        return min((term.start for term in self.terms), default=math.inf)

    def __call__(self, t):
        # each term already vanishes outside its window
        arr = np.asarray(t, dtype=float)
        return _as_output(self._eval(arr), arr.ndim == 0)

    def _eval(self, t):
        out = np.zeros_like(t, dtype=float)
        for term in self.terms:
            inside = (t >= term.start) & (t < term.end)
            if not np.any(inside):
                continue
            tt = np.where(inside, t, term.anchor)
            out = out + np.where(
                inside, term.const + term.coef * np.exp(-term.rate * (tt - term.anchor)), 0.0
            )
        return out

    @property
    def has_primitive(self) -> bool:
        return True

    def primitive(self, t):
        arr = np.asarray(t, dtype=float)
        out = np.zeros_like(arr, dtype=float)
        for term in self.terms:
            hi = np.clip(arr, term.start, term.end)
            lo = min(max(0.0, term.start), term.end)
            out = out + term.antiderivative(hi) - term.antiderivative(np.asarray(lo))
        return _as_output(out, arr.ndim == 0)

    def as_arrays(self) -> np.ndarray:
        """Terms packed as an ``(k, 6)`` float array for compiled kernels."""
        return np.array(
            [[t.start, t.end, t.const, t.coef, t.rate, t.anchor] for t in self.terms],
            dtype=float,
        ).reshape(-1, 6)


@dataclass(frozen=True)
class Tabulated(RateSchedule):
    """Piecewise-linear interpolation of ``(times, values)``.

    Zero before the first knot, held at the last value afterwards.
    """

    times: tuple[float, ...]
    values: tuple[float, ...]
    kind: str = field(default="tabulated", init=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.size < 1 or times.size != len(self.values):
            raise ValueError("times and values must be nonempty and of equal length")
        if np.any(np.diff(times) <= 0):
            raise ValueError("tabulated times must be strictly increasing")

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.times)

    @property
    def support_start(self) -> float:
        return float(self.times[0])

    def _eval(self, t):
        return np.interp(t, self.times, self.values)

    @property
    def has_primitive(self) -> bool:
        return True

    def _cumulative(self, x: np.ndarray) -> np.ndarray:
        # integral from times[0] to x of the interpolant
        knots = np.asarray(self.times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        seg = 0.5 * (vals[1:] + vals[:-1]) * np.diff(knots)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        xc = np.maximum(x, knots[0])
        idx = np.clip(np.searchsorted(knots, xc, side="right") - 1, 0, knots.size - 1)
        base = cum[idx]
        left = vals[idx]
        right_val = np.interp(xc, knots, vals)
        return base + 0.5 * (left + right_val) * (xc - knots[idx])

    def primitive(self, t):
        arr = np.asarray(t, dtype=float)
        out = self._cumulative(arr) - self._cumulative(np.asarray(0.0))
        return _as_output(out, arr.ndim == 0)


@dataclass(frozen=True)
class FunctionSchedule(RateSchedule):
    """Arbitrary vectorised callable with declared breakpoints."""

    fn: Callable[[np.ndarray], np.ndarray]
    breakpoints: tuple[float, ...] = ()
    support_start: float = -math.inf
    prim: Optional[Callable[[np.ndarray], np.ndarray]] = None
    kind: str = field(default="function", init=False)

    def _eval(self, t):
        return np.asarray(self.fn(t), dtype=float) * np.ones_like(t)

    @property
    def has_primitive(self) -> bool:
        return self.prim is not None

    def primitive(self, t):
        if self.prim is None:
            return super().primitive(t)
        arr = np.asarray(t, dtype=float)
        out = np.asarray(self.prim(arr), dtype=float) - float(self.prim(np.asarray(0.0)))
        return _as_output(out, arr.ndim == 0)


@dataclass(frozen=True)
class Composite(RateSchedule):
    """``t -> sum_k coef_k * schedule_k(t - shift_k)``."""

    parts: tuple[tuple[float, float, RateSchedule], ...]
    kind: str = field(default="composite", init=False)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        pts = set()
        for _, shift, sched in self.parts:
            pts.update(b + shift for b in sched.breakpoints)
            if sched.support_start > -math.inf:
                pts.add(sched.support_start + shift)
        return tuple(sorted(pts))

    @property
    def support_start(self) -> float:
        return min(s.support_start + d for _, d, s in self.parts)

    def __call__(self, t):
        arr = np.asarray(t, dtype=float)
        out = np.zeros_like(arr, dtype=float)
        for coef, shift, sched in self.parts:
            out = out + coef * np.asarray(sched(arr - shift), dtype=float)
        return _as_output(out, arr.ndim == 0)

    def _eval(self, t):
        return np.asarray(self(t), dtype=float)

    @property
    def has_primitive(self) -> bool:
        return all(s.has_primitive for _, _, s in self.parts)

    def primitive(self, t):
        arr = np.asarray(t, dtype=float)
        out = np.zeros_like(arr, dtype=float)
        for coef, shift, sched in self.parts:
            out = out + coef * (
                np.asarray(sched.primitive(arr - shift)) - sched.primitive(-shift)
            )
        return _as_output(out, arr.ndim == 0)


def check_nonnegative(schedule: RateSchedule, window: Sequence[float] | None = None) -> bool:
    """Sampled check that a schedule is nonnegative on a window.

    The window defaults to one spanning the breakpoints with a margin.
    """
    if isinstance(schedule, Constant):
        return schedule.value >= 0.0
    bps = list(schedule.breakpoints)
    if window is None:
        lo = (min(bps) if bps else 0.0) - 10.0
        hi = (max(bps) if bps else 0.0) + 100.0
    else:
        lo, hi = window
    grid = np.linspace(lo, hi, 2001)
    if bps:
        grid = np.concatenate([grid, bps])
    return bool(np.all(np.asarray(schedule(grid)) >= 0.0))

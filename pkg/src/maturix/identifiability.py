"""Transformations of the continuous model that leave the output law unchanged.

Only the compound input ``lam_g(t) = lam(t) p(t)`` enters the law of the
mature count, so ``(lam, g)`` is not identifiable from it.  The functions
below build the equivalent models explicitly; each returns a new
:class:`ContinuousModel` whose ``alpha`` is identical and whose ``beta``
agrees with the original up to quadrature error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .explicit_model import (
    ContinuousModel,
    KillingField,
    _outer_breakpoints,
    killing_integral,
    survival_curve,
)
from .rates import Constant, FunctionSchedule, RateSchedule

__all__ = [
    "ModelQuadruple",
    "ShiftedKilling",
    "effective_input_rate",
    "theta_transform",
    "normalize_unit_input",
    "split_killing",
]

# The quadruple (tau, mu, g, lam) is carried by ContinuousModel itself.
ModelQuadruple = ContinuousModel


@dataclass(frozen=True)
class ShiftedKilling:
    """``g(t, x) + shift`` for a base field ``g`` (``None`` meaning zero)."""

    base: object
    shift: float

    @property
    def time_breakpoints(self):
        return tuple(getattr(self.base, "time_breakpoints", ()))

    @property
    def space_breakpoints(self):
        return tuple(getattr(self.base, "space_breakpoints", ()))

    @property
    def initiation_breakpoints(self):
        return tuple(getattr(self.base, "initiation_breakpoints", ()))

    def __call__(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast(t, x).shape
        base = np.zeros(shape) if self.base is None else np.asarray(self.base(t, x), dtype=float)
        return base + self.shift


def effective_input_rate(model: ContinuousModel, t):
    """``lam(t) p(t)``: initiation rate of particles that will mature."""
    arr = np.asarray(t, dtype=float)
    out = np.asarray(model.lam(arr), dtype=float) * survival_curve(model, arr)
    return float(out) if arr.ndim == 0 else out


def _scaled_input(lam: RateSchedule, theta: float) -> RateSchedule:
    if isinstance(lam, Constant):
        return Constant(lam.value * theta, lam.support_start)
    return lam.scaled(theta)


def theta_transform(
    model: ContinuousModel, theta: float, allow_amplification: bool = False
) -> ContinuousModel:
    """``(tau, mu, g + rho log theta, theta lam)``.

    ``theta < 1`` lowers the killing below ``g`` and may make it negative,
    so it requires ``allow_amplification`` (also set on the result).
    """
    if not (theta > 0 and math.isfinite(theta)):
        raise ValueError("theta must be positive and finite")
    if theta == 1.0:
        return model
    amplify = model.allow_amplification
    if theta < 1.0:
        if not (allow_amplification or amplify):
            raise ValueError("theta < 1 may give negative killing; pass allow_amplification")
        amplify = True
    shift = model.rho * math.log(theta)
    g = model.g
    if isinstance(g, ShiftedKilling):
        g_new = ShiftedKilling(g.base, g.shift + shift)
    else:
        g_new = ShiftedKilling(g, shift)
    return ContinuousModel(model.rho, _scaled_input(model.lam, theta), model.mu, g_new, amplify)


def normalize_unit_input(model: ContinuousModel) -> ContinuousModel:
    """Equivalent model with unit input: ``(tau, mu, G, 1)`` where
    ``G(v, y) = g(v, y) - rho log lam(v - y / rho)``.

    The unit input keeps the support start of ``lam``.  ``lam`` must be
    positive wherever ``G`` samples it; a violation raises ``ValueError``
    (eagerly for constants, otherwise when first evaluated).
    """
    lam = model.lam
    if isinstance(lam, Constant) and lam.value <= 0:
        raise ValueError("normalization needs a positive input rate")
    rho = model.rho
    g = model.g

    def G(v, y):
        v = np.asarray(v, dtype=float)
        y = np.asarray(y, dtype=float)
        start = v - y / rho
        lv = np.asarray(lam(start), dtype=float)
        if np.any(lv <= 0):
            raise ValueError("input rate must be positive where G is evaluated")
        base = np.zeros(np.broadcast(v, y).shape) if g is None else np.asarray(g(v, y), dtype=float)
        return base - rho * np.log(lv)

    inits = tuple(lam.breakpoints)
    if g is not None:
        inits += tuple(g.initiation_breakpoints)
    field = KillingField(
        G,
        time_breakpoints=tuple(g.time_breakpoints) if g is not None else (),
        space_breakpoints=tuple(g.space_breakpoints) if g is not None else (),
        initiation_breakpoints=tuple(sorted(set(inits))),
    )
    unit = Constant(1.0, lam.support_start)
    return ContinuousModel(model.rho, unit, model.mu, field, allow_amplification=True)


def split_killing(model: ContinuousModel, g1) -> ContinuousModel:
    """Move the part ``g1`` of the killing into the input:
    ``(tau, mu, g - g1, lam_{g1})`` with
    ``lam_{g1}(t) = lam(t) exp(-int_0^tau g1(t + w, rho w) dw)``.

    ``g1 is model.g`` gives the extreme case with no killing left.  When
    ``g1`` exceeds ``g`` (or is negative) a ``ValueError`` is raised on
    evaluation, unless the model allows amplification.
    """
    g = model.g
    if g1 is None:
        return model
    part = ContinuousModel(model.rho, model.lam, model.mu, g1, allow_amplification=True)
    lam = model.lam
    amplify = model.allow_amplification

    def lam_g1(t):
        t = np.asarray(t, dtype=float)
        return np.asarray(lam(t), dtype=float) * np.exp(-np.asarray(killing_integral(part, t)))

    lo, hi = -1e300, 1e300
    bps = _outer_breakpoints(
        ContinuousModel(model.rho, lam, Constant(0.0), g1, allow_amplification=True), lo, hi
    )
    new_lam = FunctionSchedule(lam_g1, tuple(bps), lam.support_start)

    if g1 is g:
        return ContinuousModel(model.rho, new_lam, model.mu, None, amplify)

    def rest(t, x):
        base = np.zeros(np.broadcast(np.asarray(t), np.asarray(x)).shape) if g is None else g(t, x)
        sub = np.asarray(g1(t, x), dtype=float)
        out = np.asarray(base, dtype=float) - sub
        if not amplify and (np.any(sub < 0) or np.any(out < -1e-12 * np.maximum(1.0, np.abs(sub)))):
            raise ValueError("g1 must satisfy 0 <= g1 <= g")
        return out

    def union(name):
        pts = set(getattr(g1, name, ()))
        if g is not None:
            pts |= set(getattr(g, name, ()))
        return tuple(sorted(pts))

    field = KillingField(
        rest,
        union("time_breakpoints"),
        union("space_breakpoints"),
        union("initiation_breakpoints"),
    )
    return ContinuousModel(model.rho, new_lam, model.mu, field, allow_amplification=True)

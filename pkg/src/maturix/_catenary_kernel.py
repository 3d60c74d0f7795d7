"""Compiled integrators for the catenary chain.

:func:`integrate_catenary` is an explicit Dormand-Prince 5(4) pair.
:func:`integrate_catenary_sdirk` is an L-stable, stiffly accurate SDIRK
4(3) pair (Hairer-Wanner, gamma = 1/4).  The chain matrix is lower
bidiagonal, so every implicit stage is a forward substitution and the
cost of a step does not grow with ``rho``.

The chain has a single inflow at the head, transit ``rho`` from compartment
``i`` to ``i + 1``, killing ``gamma * q(t)`` on the first ``n0``
compartments and elimination ``mu`` from the last one.  ``q`` is passed as
the packed term array of a :class:`~maturix.rates.PiecewiseExponential`.
Integration stops exactly at every entry of ``stops`` (breakpoints and
output times), so no interpolation is needed.
"""

import math

import numpy as np
from numba import njit

# Dormand-Prince tableau
C2, C3, C4, C5 = 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9
A21 = 1.0 / 5
A31, A32 = 3.0 / 40, 9.0 / 40
A41, A42, A43 = 44.0 / 45, -56.0 / 15, 32.0 / 9
A51, A52, A53, A54 = 19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729
A61, A62, A63, A64, A65 = 9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656
B1, B3, B4, B5, B6 = 35.0 / 384, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84
E1, E3, E4, E5, E6, E7 = (
    71.0 / 57600,
    -71.0 / 16695,
    71.0 / 1920,
    -17253.0 / 339200,
    22.0 / 525,
    -1.0 / 40,
)

# SDIRK 4(3) tableau; b equals the last row of A
SG = 0.25
SC = np.array([0.25, 0.75, 11.0 / 20, 0.5, 1.0])
SA = np.array(
    [
        [0.25, 0.0, 0.0, 0.0, 0.0],
        [0.5, 0.25, 0.0, 0.0, 0.0],
        [17.0 / 50, -1.0 / 25, 0.25, 0.0, 0.0],
        [371.0 / 1360, -137.0 / 2720, 15.0 / 544, 0.25, 0.0],
        [25.0 / 24, -49.0 / 48, 125.0 / 16, -85.0 / 12, 0.25],
    ]
)
# b - b_hat
SE = np.array([25.0 / 24 - 59.0 / 48, -49.0 / 48 + 17.0 / 96, 125.0 / 16 - 225.0 / 32, 0.0, 0.25])

STATUS_OK = 0
STATUS_UNDERFLOW = 1
STATUS_NONFINITE = 2


@njit(cache=True, nogil=True)
def _q_value(terms, t):
    total = 0.0
    for k in range(terms.shape[0]):
        if terms[k, 0] <= t < terms[k, 1]:
            total += terms[k, 2] + terms[k, 3] * math.exp(-terms[k, 4] * (t - terms[k, 5]))
    return total


@njit(cache=True, nogil=True)
def _rhs(t, y, out, lam, rho, mu, gamma, n0, terms):
    n = y.shape[0]
    kill = gamma * _q_value(terms, t) if gamma != 0.0 else 0.0
    prev = 0.0
    for i in range(n - 1):
        flux = rho * y[i]
        inflow = lam if i == 0 else prev
        k = kill if i < n0 else 0.0
        out[i] = inflow - flux - k * y[i]
        prev = flux
    out[n - 1] = (prev if n > 1 else lam) - mu * y[n - 1]


@njit(cache=True, nogil=True)
def integrate_catenary(lam, rho, mu, gamma, n0, terms, y0, t0, stops, record, rtol, atol):
    """Integrate from ``t0`` through the sorted ``stops``.

    Returns ``(status, states, n_steps)`` where ``states[k]`` is the state at
    the k-th stop with ``record[k]`` set (other rows are left at zero).
    """
    n = y0.shape[0]
    y = y0.copy()
    states = np.zeros((stops.shape[0], n))
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    k7 = np.empty(n)
    tmp = np.empty(n)
    ynew = np.empty(n)
    t = t0
    span = stops[-1] - t0 if stops.shape[0] > 0 else 0.0
    h = min(0.01 * max(span, 1e-3), 0.1 / max(rho + mu + 1e-12, 1e-12))
    n_steps = 0
    _rhs(t, y, k1, lam, rho, mu, gamma, n0, terms)
    for s in range(stops.shape[0]):
        target = stops[s]
        # left limit of the stop, so a jump in q there is not seen early
        t_left = target - 1e-13 * max(1.0, abs(target))
        # restart at every stop: kinks of q live there
        _rhs(t, y, k1, lam, rho, mu, gamma, n0, terms)
        while t < target:
            last = False
            h_saved = h
            if t + 1.01 * h >= target:
                h = target - t
                last = True
            if h <= 1e-14 * max(1.0, abs(t)):
                return STATUS_UNDERFLOW, states, n_steps
            for i in range(n):
                tmp[i] = y[i] + h * A21 * k1[i]
            _rhs(t + C2 * h, tmp, k2, lam, rho, mu, gamma, n0, terms)
            for i in range(n):
                tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i])
            _rhs(t + C3 * h, tmp, k3, lam, rho, mu, gamma, n0, terms)
            for i in range(n):
                tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i])
            _rhs(t + C4 * h, tmp, k4, lam, rho, mu, gamma, n0, terms)
            for i in range(n):
                tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i])
            _rhs(t + C5 * h, tmp, k5, lam, rho, mu, gamma, n0, terms)
            for i in range(n):
                tmp[i] = y[i] + h * (
                    A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]
                )
            t_end = t_left if last else t + h
            _rhs(t_end, tmp, k6, lam, rho, mu, gamma, n0, terms)
            for i in range(n):
                ynew[i] = y[i] + h * (
                    B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]
                )
            _rhs(t_end, ynew, k7, lam, rho, mu, gamma, n0, terms)
            err = 0.0
            for i in range(n):
                e = h * (
                    E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]
                )
                sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
                err += (e / sc) ** 2
            err = math.sqrt(err / n)
            if not math.isfinite(err):
                return STATUS_NONFINITE, states, n_steps
            if err <= 1.0:
                t = target if last else t + h
                for i in range(n):
                    y[i] = ynew[i]
                    k1[i] = k7[i]
                n_steps += 1
                fac = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** -0.2)
                h = max(h_saved, h * fac) if last else h * fac
            else:
                h = h * max(0.2, 0.9 * err ** -0.2)
        if record[s]:
            for i in range(n):
                states[s, i] = y[i]
    return STATUS_OK, states, n_steps


@njit(cache=True, nogil=True)
def _solve_shifted(r, out, hg, lam, rho, mu, kill, n0):
    """Solve ``(I - hg A) out = r`` for the lower bidiagonal chain matrix ``A``."""
    n = r.shape[0]
    prev = 0.0
    for i in range(n):
        if i == n - 1:
            d = -mu
        else:
            d = -rho - (kill if i < n0 else 0.0)
        inflow = hg * rho * prev if i > 0 else 0.0
        out[i] = (r[i] + inflow) / (1.0 - hg * d)
        prev = out[i]


@njit(cache=True, nogil=True)
def integrate_catenary_sdirk(lam, rho, mu, gamma, n0, terms, y0, t0, stops, record, rtol, atol):
    """Same contract as :func:`integrate_catenary`."""
    n = y0.shape[0]
    y = y0.copy()
    states = np.zeros((stops.shape[0], n))
    F = np.zeros((5, n))
    rhs = np.empty(n)
    ynew = np.empty(n)
    err_v = np.empty(n)
    err_f = np.empty(n)
    t = t0
    span = stops[-1] - t0 if stops.shape[0] > 0 else 0.0
    h = 0.01 * max(span, 1e-3)
    n_steps = 0
    for s in range(stops.shape[0]):
        target = stops[s]
        t_left = target - 1e-13 * max(1.0, abs(target))
        # first step after a kink is kept small
        h = min(h, 0.05)
        while t < target:
            last = False
            h_saved = h
            if t + 1.01 * h >= target:
                h = target - t
                last = True
            if h <= 1e-14 * max(1.0, abs(t)):
                return STATUS_UNDERFLOW, states, n_steps
            hg = h * SG
            for st in range(5):
                ts = t + SC[st] * h
                if last and ts > t_left:
                    ts = t_left
                kill = gamma * _q_value(terms, ts) if gamma != 0.0 else 0.0
                for i in range(n):
                    acc = y[i]
                    for j in range(st):
                        acc += h * SA[st, j] * F[j, i]
                    rhs[i] = acc
                rhs[0] += hg * lam
                _solve_shifted(rhs, ynew, hg, lam, rho, mu, kill, n0)
                for i in range(n):
                    F[st, i] = (ynew[i] - rhs[i]) / hg
                F[st, 0] += lam
            # ynew holds the last stage, which is the 4th-order solution
            for i in range(n):
                e = 0.0
                for j in range(5):
                    e += SE[j] * F[j, i]
                err_v[i] = h * e
            # filter the estimate through the stage matrix for stiff components
            kill = gamma * _q_value(terms, t_left if last else t + h) if gamma != 0.0 else 0.0
            _solve_shifted(err_v, err_f, hg, lam, rho, mu, kill, n0)
            err = 0.0
            for i in range(n):
                sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
                err += (err_f[i] / sc) ** 2
            err = math.sqrt(err / n)
            if not math.isfinite(err):
                return STATUS_NONFINITE, states, n_steps
            if err <= 1.0:
                t = target if last else t + h
                for i in range(n):
                    y[i] = ynew[i]
                n_steps += 1
                fac = 5.0 if err == 0.0 else min(5.0, 0.9 * err ** -0.25)
                h = max(h_saved, h * fac) if last else h * fac
            else:
                h = h * max(0.2, 0.9 * err ** -0.25)
        if record[s]:
            for i in range(n):
                states[s, i] = y[i]
    return STATUS_OK, states, n_steps

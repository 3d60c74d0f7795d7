import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maturix.compartmental_ode import (
    CompartmentalSystem,
    IntegrationError,
    StiffnessError,
    catenary_system,
    drift,
    equilibrium_init,
    integrate,
    integrate_catenary,
    resolvent_constant,
    transfer_matrix,
)
from maturix.rates import Constant, Tabulated, zero

from conftest import pulse


def taylor_expm(m, terms=60):
    out = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, terms):
        term = term @ m / k
        out = out + term
    return out


def const_system(lam, kappa, transfer):
    n = len(lam)
    return CompartmentalSystem(
        n,
        tuple(Constant(v) for v in lam),
        tuple(Constant(v) for v in kappa),
        {ij: Constant(v) for ij, v in transfer.items()},
    )


# -- transfer_matrix -------------------------------------------------------------


def test_transfer_matrix_two_compartment_catenary():
    sys_ = catenary_system(2, 1.0, 1.0, 0.5)
    assert np.allclose(transfer_matrix(sys_, 0.0), [[-1.0, 0.0], [1.0, -0.5]])


def test_transfer_matrix_single_compartment():
    sys_ = const_system([1.0], [0.7], {})
    assert np.allclose(transfer_matrix(sys_, 3.0), [[-0.7]])


def test_transfer_matrix_killing_entries_match_brute_force(drug_q):
    lam, rho, mu, gamma, n0 = 2.0, 1.3, 0.4, 0.8, 2
    sys_ = catenary_system(3, lam, rho, mu, gamma, n0, drug_q)
    for t in (0.2, 0.5, 3.0, 24.3):
        qt = drug_q(t)
        # entry (j, i) is d(dQ_j/dt)/dQ_i of the chain right-hand side
        expected = np.array(
            [
                [-rho - gamma * qt, 0.0, 0.0],
                [rho, -rho - gamma * qt, 0.0],
                [0.0, rho, -mu],
            ]
        )
        assert np.allclose(transfer_matrix(sys_, t), expected, rtol=1e-14, atol=1e-14)


def test_transfer_matrix_column_sums_are_minus_outflow():
    sys_ = const_system([1, 0, 0], [0.1, 0.2, 0.3], {(0, 1): 1.0, (1, 2): 2.0, (2, 0): 0.5, (0, 2): 0.25})
    m = transfer_matrix(sys_, 0.0)
    assert np.allclose(m.sum(axis=0), [-0.1, -0.2, -0.3])


# -- drift ---------------------------------------------------------------------------


def test_drift_at_zero_is_inflow():
    sys_ = const_system([1.5, 0.5], [0.1, 0.2], {(0, 1): 1.0})
    assert np.allclose(drift(sys_, 0.0, [0.0, 0.0]), [1.5, 0.5])


def test_drift_vanishes_at_drug_free_equilibrium():
    lam, rho, mu, n = 3.0, 0.7, 0.2, 6
    sys_ = catenary_system(n, lam, rho, mu)
    assert np.allclose(drift(sys_, 1.0, equilibrium_init(lam, rho, mu, n)), 0.0, atol=1e-13)


def test_drift_matches_matrix_vector(rng, drug_q):
    sys_ = catenary_system(4, 2.0, 1.0, 0.3, 0.5, 2, drug_q)
    for _ in range(10):
        t = rng.uniform(0, 100)
        q = rng.uniform(0, 5, 4)
        lam = np.array([2.0, 0, 0, 0])
        assert np.allclose(drift(sys_, t, q), transfer_matrix(sys_, t) @ q + lam, rtol=1e-14)


def test_drift_dimension_mismatch():
    sys_ = catenary_system(3, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        drift(sys_, 0.0, [1.0, 2.0])


# -- system validation ------------------------------------------------------------


def test_system_rejects_diagonal_transfer():
    with pytest.raises(ValueError):
        const_system([1.0, 0.0], [0.0, 0.0], {(0, 0): 1.0})


def test_system_rejects_negative_outflow_without_flag():
    with pytest.raises(ValueError):
        CompartmentalSystem(1, (Constant(1.0),), (Constant(-0.1),))
    ok = CompartmentalSystem(1, (Constant(1.0),), (Constant(-0.1),), allow_amplification=True)
    assert transfer_matrix(ok, 0.0)[0, 0] == pytest.approx(0.1)


def test_system_rejects_negative_transfer():
    with pytest.raises(ValueError):
        const_system([1.0, 0.0], [0.0, 0.0], {(0, 1): -1.0})


# -- integrate ---------------------------------------------------------------------


def test_integrate_scalar_closed_form():
    lam, mu, tol = 2.0, 0.5, 1e-9
    sys_ = const_system([lam], [mu], {})
    times = np.linspace(0, 10, 21)
    traj = integrate(sys_, [0.0], 0.0, 10.0, tol, t_eval=times)
    exact = lam / mu * (1 - np.exp(-mu * times))
    assert np.max(np.abs(traj.at(0) - exact)) < 10 * tol * max(1, exact.max())


def test_integrate_matches_resolvent():
    lam = np.array([1.0, 0.0, 0.5])
    sys_ = const_system(lam, [0.1, 0.0, 0.4], {(0, 1): 1.2, (1, 2): 0.8, (2, 0): 0.3})
    m = transfer_matrix(sys_, 0.0)
    q0 = np.array([1.0, 2.0, 0.5])
    t1 = 3.0
    traj = integrate(sys_, q0, 0.0, t1, 1e-10, t_eval=[t1])
    # augmented exponential gives the forced response exactly
    aug = np.zeros((4, 4))
    aug[:3, :3] = m
    aug[:3, 3] = lam
    expected = (resolvent_constant(aug, t1) @ np.append(q0, 1.0))[:3]
    assert np.allclose(traj.values[-1], expected, rtol=1e-8, atol=1e-9)


def test_integrate_continuous_across_breakpoints(drug_q):
    sys_ = catenary_system(5, 5.0, 0.8, 0.04, 0.3, 2, drug_q)
    q0 = equilibrium_init(5.0, 0.8, 0.04, 5)
    times = np.array([0.25, 0.5, 0.75, 24.5, 48.0, 100.0])
    a = integrate(sys_, q0, 0.0, 100.0, 1e-8, t_eval=times).values
    b = integrate(sys_, q0, 0.0, 100.0, 1e-9, t_eval=times).values
    assert np.max(np.abs(a - b) / np.maximum(1, np.abs(b))) < 1e-8


def test_integrate_restarts_at_breakpoints(drug_q):
    sys_ = catenary_system(3, 1.0, 1.0, 0.1, 0.5, 1, drug_q)
    traj = integrate(sys_, [0.0, 0.0, 0.0], 0.0, 50.0)
    for b in (0.5, 24.0, 24.5, 48.0, 48.5):
        assert np.any(traj.times == b)


def test_integrate_nonfinite_raises():
    sys_ = CompartmentalSystem(1, (Constant(0.0),), (Constant(-50.0),), allow_amplification=True)
    with pytest.raises(IntegrationError):
        integrate(sys_, [1e300], 0.0, 100.0)


def test_stiffness_error_is_integration_error():
    assert issubclass(StiffnessError, IntegrationError)


def test_trajectory_csv(tmp_path):
    sys_ = catenary_system(2, 1.0, 1.0, 0.5)
    traj = integrate(sys_, [0.0, 0.0], 0.0, 1.0, t_eval=[0.0, 0.5, 1.0])
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,q1,q2"
    assert len(lines) == 4


# -- resolvent -----------------------------------------------------------------------


def test_resolvent_identity_at_zero():
    m = np.array([[-1.0, 0.3], [0.2, -0.5]])
    assert np.array_equal(resolvent_constant(m, 0.0), np.eye(2))


def test_resolvent_diagonal():
    d = np.array([-1.0, 0.5, -2.0])
    assert np.allclose(resolvent_constant(np.diag(d), 0.7), np.diag(np.exp(0.7 * d)), rtol=1e-14)


def test_resolvent_matches_taylor():
    m = transfer_matrix(catenary_system(3, 1.0, 1.5, 0.5), 0.0)
    assert np.allclose(resolvent_constant(m, 0.1), taylor_expm(0.1 * m), rtol=0, atol=1e-10)


def test_resolvent_rejects_nonfinite():
    with pytest.raises(ValueError):
        resolvent_constant(np.array([[np.nan]]), 1.0)


# -- catenary & equilibrium ------------------------------------------------------


def test_catenary_no_killing_is_plain_chain():
    sys_ = catenary_system(4, 1.0, 2.0, 0.5, 0.0, 1, pulse())
    assert all(float(k(12.0)) == 0.0 for k in sys_.outflow[:-1])
    assert set(sys_.transfer) == {(0, 1), (1, 2), (2, 3)}


def test_catenary_two_equation_system(drug_q):
    lam, rho, mu, gamma = 2.0, 1.0, 0.3, 0.7
    sys_ = catenary_system(2, lam, rho, mu, gamma, 1, drug_q)
    q = np.array([1.3, 4.0])
    for t in (0.3, 10.0):
        qt = drug_q(t)
        expected = [lam - rho * q[0] - gamma * qt * q[0], rho * q[0] - mu * q[1]]
        assert np.allclose(drift(sys_, t, q), expected, rtol=1e-14)


def test_catenary_n0_out_of_range():
    with pytest.raises(ValueError):
        catenary_system(3, 1.0, 1.0, 1.0, 0.1, 3, pulse())
    with pytest.raises(ValueError):
        catenary_system(3, 1.0, 1.0, 1.0, 0.1, 0, pulse())


def test_equilibrium_init_values():
    assert np.allclose(equilibrium_init(2.0, 1.0, 0.5, 3), [2.0, 2.0, 4.0])
    assert np.all(equilibrium_init(0.0, 1.0, 0.5, 4) == 0)
    with pytest.raises(ValueError):
        equilibrium_init(1.0, 0.0, 1.0, 3)


@settings(max_examples=30, deadline=None)
@given(
    lam=st.floats(0.0, 10.0),
    rho=st.floats(0.05, 10.0),
    mu=st.floats(0.01, 5.0),
    n=st.integers(2, 12),
)
def test_equilibrium_is_fixed_point(lam, rho, mu, n):
    sys_ = catenary_system(n, lam, rho, mu)
    q = equilibrium_init(lam, rho, mu, n)
    assert np.allclose(drift(sys_, 0.0, q), 0.0, atol=1e-12 * max(1.0, q.max()))


# -- invariants ------------------------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(
    rates=st.lists(st.floats(0.0, 3.0), min_size=6, max_size=6),
    q0=st.lists(st.floats(0.0, 10.0), min_size=3, max_size=3),
)
def test_closed_system_conserves_mass(rates, q0):
    pairs = [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)]
    sys_ = const_system([0, 0, 0], [0, 0, 0], dict(zip(pairs, rates)))
    traj = integrate(sys_, q0, 0.0, 5.0, 1e-9)
    total = traj.values.sum(axis=1)
    assert np.max(np.abs(total - sum(q0))) < 10 * 1e-9 * max(1.0, sum(q0))


@settings(max_examples=15, deadline=None)
@given(
    lam=st.floats(0.0, 5.0),
    rho=st.floats(0.1, 5.0),
    gamma=st.floats(0.0, 5.0),
    n0=st.integers(1, 3),
)
def test_nonnegativity(lam, rho, gamma, n0):
    q = pulse(start=1.0)
    sys_ = catenary_system(4, lam, rho, 0.2, gamma, n0, q)
    traj = integrate(sys_, [0.0, 1.0, 0.0, 0.0], 0.0, 30.0, 1e-8)
    assert traj.values.min() >= -10 * 1e-8


@settings(max_examples=10, deadline=None)
@given(split=st.floats(0.05, 0.95))
def test_semigroup_against_resolvent(split):
    sys_ = const_system([0, 0, 0], [0.2, 0.0, 0.5], {(0, 1): 1.0, (1, 2): 0.7})
    m = transfer_matrix(sys_, 0.0)
    q0 = np.array([3.0, 1.0, 0.0])
    t1 = 4.0
    u = split * t1
    via = resolvent_constant(m, t1 - u) @ resolvent_constant(m, u) @ q0
    traj = integrate(sys_, q0, 0.0, t1, 1e-10, t_eval=[t1])
    assert np.allclose(traj.values[-1], via, rtol=0, atol=10 * 1e-10 * 3)


def test_equilibrium_persists():
    lam, rho, mu, n = 5.0, 2.0, 0.04, 10
    q0 = equilibrium_init(lam, rho, mu, n)
    traj = integrate(catenary_system(n, lam, rho, mu), q0, 0.0, 500.0, 1e-8, t_eval=[100.0, 500.0])
    assert np.max(np.abs(traj.values - q0)) < 10 * 1e-8 * q0.max()


# -- compiled catenary path -----------------------------------------------------------


def test_fast_path_matches_generic(drug_q):
    n, lam, rho, mu, gamma, n0 = 8, 5.0, 1.4, 0.04, 0.3, 3
    q0 = equilibrium_init(lam, rho, mu, n)
    times = np.arange(1, 41) * 3.0
    fast = integrate_catenary(n, lam, rho, mu, gamma, n0, drug_q, q0, times)
    generic = integrate(catenary_system(n, lam, rho, mu, gamma, n0, drug_q), q0, 0.0, times[-1], 1e-9, t_eval=times).values
    assert np.max(np.abs(fast - generic) / np.maximum(1, np.abs(generic))) < 1e-6


def test_fast_path_falls_back_for_tabulated_q():
    q = Tabulated(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 0.0]))
    out = integrate_catenary(3, 1.0, 1.0, 0.5, 0.5, 1, q, equilibrium_init(1.0, 1.0, 0.5, 3), [1.0, 3.0])
    assert out.shape == (2, 3)
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("n,rho,gamma,n0", [(8, 1.4, 0.3, 3), (30, 60.0, 4.5, 29), (100, 495.0, 2.0, 50)])
def test_implicit_path_matches_explicit(drug_q, n, rho, gamma, n0):
    lam, mu = 5.0, 0.04
    q0 = equilibrium_init(lam, rho, mu, n)
    times = np.arange(1, 41) * 12.0
    ref = integrate_catenary(n, lam, rho, mu, gamma, n0, drug_q, q0, times, tol=1e-11, method="explicit")
    imp = integrate_catenary(n, lam, rho, mu, gamma, n0, drug_q, q0, times, tol=1e-8, method="implicit")
    assert np.max(np.abs(imp - ref) / np.maximum(1, np.abs(ref))) < 1e-7


def test_implicit_path_keeps_equilibrium():
    q0 = equilibrium_init(2.0, 300.0, 0.1, 50)
    out = integrate_catenary(50, 2.0, 300.0, 0.1, 0.0, 1, None, q0, [10.0, 400.0], method="implicit")
    assert np.allclose(out, q0, rtol=1e-9)


def test_catenary_method_validated(drug_q):
    with pytest.raises(ValueError):
        integrate_catenary(3, 1.0, 1.0, 0.5, 0.5, 1, drug_q, equilibrium_init(1.0, 1.0, 0.5, 3), [1.0], method="euler")

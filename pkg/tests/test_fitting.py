import csv
import io
import math

import numpy as np
import pytest
from scipy import integrate

from maturix.explicit_model import alpha, beta
from maturix.fitting import (
    BENCH_COLUMNS,
    REFERENCE_PARAMS,
    REFERENCE_TIMES,
    BenchmarkRow,
    DegenerateDataError,
    DrugKinetics,
    FitProblem,
    benchmark_csv,
    chain_from_continuous,
    continuous_model,
    drug_concentration,
    drug_concentration_primitive,
    fit,
    generate_synthetic,
    predict_catenary,
    predict_continuous,
    rss,
)

KIN = DrugKinetics()
PEAK = 1.0 - math.exp(-0.93)


# -- drug kinetics -----------------------------------------------------------------------


def test_kinetics_defaults():
    assert (KIN.a_kin, KIN.b_kin, KIN.n_doses, KIN.dose_interval, KIN.infusion_duration) == (1.86, 0.51, 5, 24.0, 0.5)
    with pytest.raises(ValueError):
        DrugKinetics(a_kin=-1.0)


def test_concentration_values():
    assert drug_concentration(KIN, 0.5) == pytest.approx(0.6054, abs=1e-4)
    assert drug_concentration(KIN, 0.5) == pytest.approx(PEAK, rel=1e-14)
    assert drug_concentration(KIN, -3.0) == 0.0
    assert drug_concentration(KIN, 24.5) == pytest.approx(PEAK + PEAK * math.exp(-0.51 * 24.0), rel=1e-13)


def direct_formula(t):
    # dose-by-dose rise and decay, written out independently
    out = 0.0
    for d in range(5):
        s = 24.0 * d
        if s <= t < s + 0.5:
            out += 1 - math.exp(-1.86 * (t - s))
        elif t >= s + 0.5:
            out += PEAK * math.exp(-0.51 * (t - s - 0.5))
    return out


def test_concentration_matches_direct_formula():
    for t in np.linspace(-1.0, 130.0, 263):
        assert drug_concentration(KIN, t) == pytest.approx(direct_formula(t), rel=1e-12, abs=1e-15)


def test_concentration_continuous_at_infusion_end():
    for d in range(5):
        end = 24.0 * d + 0.5
        assert drug_concentration(KIN, end - 1e-12) == pytest.approx(drug_concentration(KIN, end), abs=1e-10)


def test_primitive_values():
    assert drug_concentration_primitive(KIN, 0.0) == 0.0
    assert drug_concentration_primitive(KIN, 0.5) == pytest.approx(0.5 - PEAK / 1.86, rel=1e-13)
    points = [24.0 * d + e for d in range(5) for e in (0.0, 0.5)]
    ref, _ = integrate.quad(direct_formula, 0.0, 120.0, points=points, limit=500, epsabs=1e-13, epsrel=1e-13)
    assert drug_concentration_primitive(KIN, 120.0) == pytest.approx(ref, abs=1e-9)


def test_primitive_derivative():
    for t in (0.2, 3.0, 24.3, 30.0, 100.0):
        h = 1e-6
        fd = (drug_concentration_primitive(KIN, t + h) - drug_concentration_primitive(KIN, t - h)) / (2 * h)
        assert fd == pytest.approx(drug_concentration(KIN, t), rel=1e-6)


# -- predictions ----------------------------------------------------------------------------


def test_continuous_prediction_without_killing():
    p = {**REFERENCE_PARAMS, "gamma": 0.0}
    assert np.allclose(predict_continuous(p, KIN, REFERENCE_TIMES), 125.0, rtol=1e-12)


def test_continuous_prediction_at_zero():
    assert predict_continuous(REFERENCE_PARAMS, KIN, [0.0])[0] == pytest.approx(125.0, rel=1e-14)


def test_continuous_prediction_general_path():
    m = continuous_model(REFERENCE_PARAMS, KIN)
    pred = predict_continuous(REFERENCE_PARAMS, KIN, [6.0, 60.0, 240.0])
    for t, v in zip((6.0, 60.0, 240.0), pred):
        assert v == pytest.approx(125.0 * alpha(m, 0.0, t) + beta(m, 0.0, t), rel=1e-8)


def test_catenary_prediction_without_killing():
    p = {**chain_from_continuous(REFERENCE_PARAMS, 10), "gamma": 0.0}
    assert np.allclose(predict_catenary(p, 10, KIN, REFERENCE_TIMES), 125.0, rtol=1e-9)


def test_catenary_prediction_tolerance_consistency():
    p = chain_from_continuous(REFERENCE_PARAMS, 10)
    a = predict_catenary(p, 10, KIN, REFERENCE_TIMES, tol=1e-8)
    b = predict_catenary(p, 10, KIN, REFERENCE_TIMES, tol=2e-8)
    assert np.max(np.abs(a - b) / 125.0) < 2e-8


def test_chain_mapping():
    c = chain_from_continuous(REFERENCE_PARAMS, 11)
    assert c["rho"] == pytest.approx(2.0) and c["n0"] == 3
    assert chain_from_continuous({**REFERENCE_PARAMS, "delta": 0.0}, 5)["n0"] == 1
    with pytest.raises(ValueError):
        chain_from_continuous(REFERENCE_PARAMS, 1)


# -- problem validation --------------------------------------------------------------------


def test_problem_validation():
    t, y = REFERENCE_TIMES, np.ones(40)
    with pytest.raises(ValueError):
        FitProblem(t[::-1], y)
    with pytest.raises(ValueError):
        FitProblem(t, -y)
    with pytest.raises(ValueError):
        FitProblem(t[:3], y[:3])
    with pytest.raises(ValueError):
        FitProblem(t, y, "catenary")
    with pytest.raises(ValueError):
        FitProblem(t, y, "spline")


def test_constant_data_rejected():
    with pytest.raises(DegenerateDataError):
        fit(FitProblem(REFERENCE_TIMES, np.full(40, 125.0)), 0)


# -- synthesis --------------------------------------------------------------------------------


def test_synthetic_noiseless_is_prediction():
    y = generate_synthetic(REFERENCE_PARAMS, "continuous", REFERENCE_TIMES, 0.0, np.random.default_rng(0))
    assert np.array_equal(y, predict_continuous(REFERENCE_PARAMS, KIN, REFERENCE_TIMES))


def test_synthetic_reproducible():
    a = generate_synthetic(REFERENCE_PARAMS, "continuous", REFERENCE_TIMES, 2.0, np.random.default_rng(4))
    b = generate_synthetic(REFERENCE_PARAMS, "continuous", REFERENCE_TIMES, 2.0, np.random.default_rng(4))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        generate_synthetic(REFERENCE_PARAMS, "continuous", REFERENCE_TIMES, -1.0, np.random.default_rng(4))


def test_synthetic_noise_level():
    t = np.linspace(0.0, 480.0, 10000)
    y = generate_synthetic(REFERENCE_PARAMS, "continuous", t, 1.5, np.random.default_rng(5))
    sd = np.std(y - predict_continuous(REFERENCE_PARAMS, KIN, t), ddof=1)
    assert sd == pytest.approx(1.5, rel=0.03)


# -- estimation -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def hourly_fit():
    # hourly sampling through the dosing period keeps every parameter identifiable
    t = np.arange(1.0, 161.0)
    y = generate_synthetic(REFERENCE_PARAMS, "continuous", t, 0.0, None)
    problem = FitProblem(t, y, "continuous", starts=4)
    return problem, fit(problem, 1)


def test_round_trip_recovers_parameters(hourly_fit):
    problem, res = hourly_fit
    for k, v in REFERENCE_PARAMS.items():
        assert res.parameters[k] == pytest.approx(v, rel=0.05), k
    assert res.rss < 1e-8 * float(problem.observations @ problem.observations)


def test_reported_rss_is_recomputed(hourly_fit):
    problem, res = hourly_fit
    assert res.rss == pytest.approx(rss(problem, res.parameters), rel=1e-10, abs=1e-10)
    assert res.rss >= 0


def test_rss_not_above_any_start(hourly_fit):
    _, res = hourly_fit
    assert len(res.start_rss) == 4
    assert all(res.rss <= s for s in res.start_rss)


def test_rss_sensitivity_matches_secant(hourly_fit):
    problem, _ = hourly_fit
    base = {**REFERENCE_PARAMS, "gamma": 0.4}
    for k in ("lam", "mu", "gamma"):
        h = 1e-4 * base[k]
        up, down = {**base, k: base[k] + h}, {**base, k: base[k] - h}
        central = (rss(problem, up) - rss(problem, down)) / (2 * h)
        forward = (rss(problem, up) - rss(problem, base)) / h
        assert forward == pytest.approx(central, rel=0.05), k


def test_nested_model_without_killing():
    truth = {**REFERENCE_PARAMS, "gamma": 0.0}
    y = generate_synthetic(truth, "continuous", REFERENCE_TIMES, 1e-3, np.random.default_rng(2))
    free = FitProblem(REFERENCE_TIMES, y, "continuous", starts=2)
    res = fit(free, 1)
    assert res.rss <= rss(free, truth)
    # gamma is only visible through a nonempty killing zone; pin delta to see it
    pinned = FitProblem(REFERENCE_TIMES, y, "continuous", starts=2, bounds={"delta": (0.29, 0.31)})
    res = fit(pinned, 1)
    assert res.parameters["gamma"] < 1e-3 * 5.0
    assert res.rss <= rss(pinned, {**truth, "delta": res.parameters["delta"]})


def test_n0_screen_returns_minimum():
    p = chain_from_continuous(REFERENCE_PARAMS, 5)
    y = generate_synthetic(p, "catenary", REFERENCE_TIMES, 0.5, np.random.default_rng(3), n=5)
    guess = {k: v for k, v in p.items() if k != "n0"}
    res = fit(FitProblem(REFERENCE_TIMES, y, "catenary", n=5, starts=0, x0=guess, maxiter=300, polish=False), 0)
    assert [c for c, _ in res.screen] == [1, 2, 3, 4]
    best = min(res.screen, key=lambda cr: (cr[1], cr[0]))
    assert res.parameters["n0"] == best[0]
    assert res.rss == best[1]


def test_chain_rss_close_to_continuous():
    y = generate_synthetic(REFERENCE_PARAMS, "continuous", REFERENCE_TIMES, 6.25, np.random.default_rng(8))
    cont = fit(FitProblem(REFERENCE_TIMES, y, "continuous", starts=4), 0)
    guess = chain_from_continuous(cont.parameters, 10)
    guess.pop("n0")
    chain = fit(FitProblem(REFERENCE_TIMES, y, "catenary", n=10, starts=0, x0=guess, maxiter=300, polish=False), 0)
    assert chain.rss < 2.0 * cont.rss


# -- benchmark output ---------------------------------------------------------------------------


def test_benchmark_csv_format():
    rows = [
        BenchmarkRow("continuous", dict(REFERENCE_PARAMS), 1.5, 0.2, 0.2, 100, True),
        BenchmarkRow("catenary_5", chain_from_continuous(REFERENCE_PARAMS, 5), 1.7, 4.0, 1.0, 300, False),
    ]
    parsed = list(csv.DictReader(io.StringIO(benchmark_csv(rows))))
    assert tuple(parsed[0].keys()) == BENCH_COLUMNS
    assert [r["model"] for r in parsed] == ["continuous", "catenary_5"]
    assert parsed[0]["n0"] == "" and parsed[1]["delta"] == ""
    assert parsed[1]["n0"] == "1" and parsed[1]["converged"] == "false"
    assert all(float(r["rss"]) >= 0 for r in parsed)

import math

import numpy as np
import pytest

from maturix.explicit_model import ContinuousModel, PartialKilling
from maturix.fitting import REFERENCE_PARAMS, DrugKinetics, continuous_model
from maturix.rates import Constant, ExpTerm, PiecewiseExponential


def pulse(start=10.0, slow=10.0, fast=2.0):
    """exp(-(t - start)/slow) - exp(-(t - start)/fast) for t >= start."""
    return PiecewiseExponential(
        (
            ExpTerm(start, math.inf, 0.0, 1.0, 1.0 / slow, start),
            ExpTerm(start, math.inf, 0.0, -1.0, 1.0 / fast, start),
        )
    )


def pulse_model():
    return ContinuousModel(
        rho=1.0, lam=Constant(1.0, 0.0), mu=Constant(1.0), g=PartialKilling(1.0, 0.5, pulse())
    )


@pytest.fixture
def drug_q():
    return DrugKinetics().schedule()


@pytest.fixture
def reference_model():
    return continuous_model(REFERENCE_PARAMS, DrugKinetics())


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``record(number, ok, detail)`` stores one acceptance verdict and returns ``ok``."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[k])

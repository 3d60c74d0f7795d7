"""Maturation chains, their continuous limit and Binomial-Poisson occupation laws."""

from .compartmental_ode import (
    CompartmentalSystem,
    Trajectory,
    catenary_system,
    drift,
    equilibrium_init,
    integrate,
    resolvent_constant,
    transfer_matrix,
)
from .distributions import BinomialPoissonLaw, chi_square_gof, total_variation
from .explicit_model import (
    ContinuousModel,
    KillingField,
    PartialKilling,
    alpha,
    beta,
    beta_partial_killing,
    maturation_lag,
    mean_count,
    occupation_law,
    q_infinity,
    survival_probability,
)
from .quadrature import integrate_adaptive
from .rates import Constant, ExpTerm, PiecewiseExponential, RateSchedule, Tabulated

__version__ = "0.1.0"

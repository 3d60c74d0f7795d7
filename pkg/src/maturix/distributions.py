"""Binomial-Poisson convolution law and goodness-of-fit helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

__all__ = [
    "BinomialPoissonLaw",
    "pmf",
    "mean",
    "variance",
    "poisson_pmf",
    "poisson_mixture_pmf",
    "total_variation",
    "chi_square_gof",
    "ChiSquareResult",
]


@dataclass(frozen=True)
class BinomialPoissonLaw:
    """Law of ``B + P`` with ``B ~ Binomial(m, alpha)``, ``P ~ Poisson(beta)``
    independent."""

    m: int
    alpha: float
    beta: float

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("m must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")

    @property
    def tail_bound(self) -> int:
        """Truncation point keeping the neglected tail mass below 1e-12."""
        return int(math.ceil(self.m + self.beta + 12.0 * math.sqrt(self.beta + 1.0) + 20.0))

    def pmf(self, k):
        return pmf(self, k)

    def pmf_vector(self, kmax: int | None = None) -> np.ndarray:
        kmax = self.tail_bound if kmax is None else int(kmax)
        return np.asarray(pmf(self, np.arange(kmax + 1)))

    def mean(self) -> float:
        return mean(self)

    def variance(self) -> float:
        return variance(self)

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return rng.binomial(self.m, self.alpha, size) + rng.poisson(self.beta, size)


def _log_binom_terms(m: int, alpha: float, j: np.ndarray) -> np.ndarray:
    # log C(m, j) alpha^j (1 - alpha)^(m - j), with 0 * log 0 = 0
    out = gammaln(m + 1) - gammaln(j + 1) - gammaln(m - j + 1)
    with np.errstate(divide="ignore"):
        la = math.log(alpha) if alpha > 0 else -math.inf
        lb = math.log1p(-alpha) if alpha < 1 else -math.inf
    with np.errstate(invalid="ignore"):
        out = out + np.where(j > 0, j * la, 0.0) + np.where(m - j > 0, (m - j) * lb, 0.0)
    return out


def _log_poisson(beta: float, k: np.ndarray) -> np.ndarray:
    if beta == 0:
        return np.where(k == 0, 0.0, -np.inf)
    return k * math.log(beta) - beta - gammaln(k + 1)


def pmf(law: BinomialPoissonLaw, k):
    """Probability of ``k`` living particles; vectorised over ``k``."""
    karr = np.asarray(k)
    if np.any(karr < 0):
        raise ValueError("k must be nonnegative")
    flat = karr.ravel().astype(np.int64)
    out = np.zeros(flat.size)
    j_all = np.arange(law.m + 1)
    log_b = _log_binom_terms(law.m, law.alpha, j_all)
    for idx, kk in enumerate(flat):
        j = j_all[: min(law.m, kk) + 1]
        terms = log_b[j] + _log_poisson(law.beta, kk - j)
        top = np.max(terms)
        if top == -np.inf:
            continue
        out[idx] = math.exp(top) * np.sum(np.exp(terms - top))
    out = out.reshape(karr.shape)
    return float(out) if karr.ndim == 0 else out


def mean(law: BinomialPoissonLaw) -> float:
    return law.m * law.alpha + law.beta


def variance(law: BinomialPoissonLaw) -> float:
    return law.m * law.alpha * (1.0 - law.alpha) + law.beta


def poisson_pmf(c: float, kmax: int) -> np.ndarray:
    return stats.poisson.pmf(np.arange(kmax + 1), c)


def poisson_mixture_pmf(c: float, alpha: float, beta: float, kmax: int) -> np.ndarray:
    """pmf on ``0..kmax`` of the law obtained by drawing ``m ~ Poisson(c)``
    and then a count from ``BinomialPoissonLaw(m, alpha, beta)``."""
    mmax = int(math.ceil(c + 12.0 * math.sqrt(c + 1.0) + 20.0))
    weights = poisson_pmf(c, mmax)
    out = np.zeros(kmax + 1)
    ks = np.arange(kmax + 1)
    for m, w in enumerate(weights):
        if w == 0.0:
            continue
        out += w * np.asarray(pmf(BinomialPoissonLaw(m, alpha, beta), ks))
    return out


def _fold(p: np.ndarray, length: int) -> np.ndarray:
    out = np.zeros(length + 1)
    out[: min(length, p.size)] = p[:length]
    out[length] = max(0.0, 1.0 - out[:length].sum())
    return out


def total_variation(p, q) -> float:
    """Half the L1 distance; missing mass of each vector goes to a tail bin."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.ndim != 1 or q.ndim != 1 or p.size == 0 or q.size == 0:
        raise ValueError("pmfs must be nonempty vectors")
    if np.any(p < -1e-15) or np.any(q < -1e-15):
        raise ValueError("pmfs must be nonnegative")
    n = max(p.size, q.size)
    return 0.5 * float(np.abs(_fold(p, n) - _fold(q, n)).sum())


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    pvalue: float
    dof: int
    bins: int


def chi_square_gof(samples, law: BinomialPoissonLaw, min_expected: float = 5.0) -> ChiSquareResult:
    """Pearson goodness of fit of integer samples to ``law``.

    Bins ``0..K`` with ``K`` the law's tail bound, the last bin absorbing the
    upper tail; adjacent bins are merged left to right until every expected
    count reaches ``min_expected`` (a short remainder joins the last bin).
    """
    x = np.asarray(samples)
    if x.size == 0:
        raise ValueError("no samples")
    if np.any(x < 0):
        raise ValueError("samples must be nonnegative")
    n = x.size
    kmax = max(law.tail_bound, int(x.max()))
    probs = law.pmf_vector(kmax)
    probs[-1] += max(0.0, 1.0 - probs.sum())
    observed = np.bincount(x.astype(np.int64), minlength=kmax + 1).astype(float)
    expected = n * probs

    obs_bins, exp_bins = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs_bins.append(acc_o)
            exp_bins.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp_bins:
            obs_bins[-1] += acc_o
            exp_bins[-1] += acc_e
        else:
            obs_bins.append(acc_o)
            exp_bins.append(acc_e)
    if len(exp_bins) < 2:
        raise ValueError("degenerate binning: fewer than two bins with enough expected mass")
    o = np.array(obs_bins)
    e = np.array(exp_bins)
    stat = float(np.sum((o - e) ** 2 / e))
    dof = len(e) - 1
    return ChiSquareResult(stat, float(stats.chi2.sf(stat, dof)), dof, len(e))

"""Weibull penetrance curves, age distributions and age-weighted quadrature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

QUADRATURE_ORDER = 64
SUPPORT_HALF_WIDTH = 8.0  # in standard deviations


def _check_ages(t) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("age must be finite")
    if np.any(arr < 0):
        raise ValueError("age must be non-negative")
    return arr


def _scalar_or_array(x: np.ndarray):
    return float(x) if x.ndim == 0 else x


def weibull_log_survival(t, shape, scale):
    """-(t/scale)**shape, broadcasting over all arguments (no validation)."""
    return -np.power(np.asarray(t, dtype=float) / scale, shape)


def weibull_cdf_values(t, shape, scale):
    return -np.expm1(weibull_log_survival(t, shape, scale))


def weibull_pdf_values(t, shape, scale):
    t = np.asarray(t, dtype=float)
    z = t / scale
    with np.errstate(divide="ignore", invalid="ignore"):
        zk1 = np.power(z, shape - 1.0)
    return (shape / scale) * zk1 * np.exp(-np.power(z, shape))


def weibull_logit_cdf(t, shape, scale):
    """logit(F(t)) computed without forming F, so tiny and near-one values stay finite."""
    x = -weibull_log_survival(t, shape, scale)
    with np.errstate(divide="ignore"):
        return np.log(-np.expm1(-x)) + x


@dataclass(frozen=True)
class PenetranceModel:
    """Weibull cumulative penetrance with ``shape`` (dimensionless) and ``scale`` (years)."""

    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and math.isfinite(self.shape)):
            raise ValueError(f"Weibull shape must be positive, got {self.shape}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"Weibull scale must be positive, got {self.scale}")

    def cdf(self, t):
        return weibull_cdf(self, t)

    def pdf(self, t):
        return weibull_pdf(self, t)

    def survival(self, t):
        return 1.0 - weibull_cdf(self, t)


@dataclass(frozen=True)
class TruncatedWeibull:
    """Weibull distribution renormalised on ``(0, truncation]``."""

    shape: float
    scale: float
    truncation: float

    def __post_init__(self):
        PenetranceModel(self.shape, self.scale)
        if not self.truncation > 0:
            raise ValueError("truncation age must be positive")

    @property
    def mass(self) -> float:
        """Untruncated probability of the event before the truncation age."""
        return float(weibull_cdf_values(self.truncation, self.shape, self.scale))

    def cdf(self, t):
        t = _check_ages(t)
        out = np.where(
            t >= self.truncation,
            1.0,
            weibull_cdf_values(np.minimum(t, self.truncation), self.shape, self.scale) / self.mass,
        )
        return _scalar_or_array(out)

    def pdf(self, t):
        t = _check_ages(t)
        out = np.where(
            t > self.truncation, 0.0, weibull_pdf_values(t, self.shape, self.scale) / self.mass
        )
        return _scalar_or_array(out)

    def survival(self, t):
        return 1.0 - self.cdf(t)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        # inverse cdf of the renormalised distribution
        u = rng.random(size)
        return self.scale * np.power(-np.log1p(-u * self.mass), 1.0 / self.shape)


@dataclass(frozen=True)
class AgeDistribution:
    """Normal distribution of ages (years) described by its mean and standard deviation."""

    mean: float
    sd: float

    def __post_init__(self):
        if not (self.sd > 0 and math.isfinite(self.sd)):
            raise ValueError(f"age distribution sd must be positive, got {self.sd}")
        if not math.isfinite(self.mean):
            raise ValueError("age distribution mean must be finite")

    @property
    def variance(self) -> float:
        return self.sd**2

    def pdf(self, a):
        z = (np.asarray(a, dtype=float) - self.mean) / self.sd
        return np.exp(-0.5 * z * z) / (self.sd * math.sqrt(2.0 * math.pi))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd}


#: Mean and SD of breast cancer onset age in the US population, used whenever
#: a study does not report an age summary.
DEFAULT_AGE_DISTRIBUTION = AgeDistribution(63.0, 14.00726)


def weibull_cdf(model: PenetranceModel, t):
    """Cumulative penetrance ``1 - exp(-(t/scale)**shape)`` at age(s) ``t``."""
    t = _check_ages(t)
    return _scalar_or_array(weibull_cdf_values(t, model.shape, model.scale))


def weibull_pdf(model: PenetranceModel, t):
    """Weibull density at age(s) ``t`` (per year)."""
    t = _check_ages(t)
    return _scalar_or_array(weibull_pdf_values(t, model.shape, model.scale))


def logit(p):
    """Log-odds of ``p``; raises for p outside the open unit interval.

    Probabilities of exactly 0 or 1 should be clamped when studies are read in
    (see :func:`penmeta.studies.clamp_probability`), not here.
    """
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0) | ~(arr < 1)):
        raise ValueError(
            "logit requires 0 < p < 1; clamp reported probabilities at ingestion "
            "(e.g. to [1e-6, 1 - 1e-6])"
        )
    return _scalar_or_array(np.log(arr) - np.log1p(-arr))


def inv_logit(x):
    arr = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _scalar_or_array(out)


@lru_cache(maxsize=8)
def _legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def age_quadrature(q: AgeDistribution, order: int = QUADRATURE_ORDER) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and density-weighted weights for integrals against ``q``.

    ``sum(w * f(x))`` approximates ``int f(a) q(a) da`` over
    ``[max(0, mean - 8 sd), mean + 8 sd]``. Mass below age 0 is dropped, not
    renormalised.
    """
    if not q.sd > 0:
        raise ValueError("degenerate age distribution (sd <= 0)")
    lo = max(0.0, q.mean - SUPPORT_HALF_WIDTH * q.sd)
    hi = q.mean + SUPPORT_HALF_WIDTH * q.sd
    if hi <= lo:
        raise ValueError("age distribution has no support on positive ages")
    x, w = _legendre(order)
    half = 0.5 * (hi - lo)
    nodes = lo + half * (x + 1.0)
    weights = half * w * q.pdf(nodes)
    return nodes, weights


def expect_under_age_dist(f, q: AgeDistribution, order: int = QUADRATURE_ORDER) -> float:
    """``int f(a) q(a) da`` by fixed-order Gauss-Legendre quadrature.

    ``f`` must accept a numpy array of ages.
    """
    nodes, weights = age_quadrature(q, order)
    return float(np.dot(weights, np.asarray(f(nodes), dtype=float)))

"""Fixed-effects baseline: one Weibull curve shared by every study.

The same per-study likelihood terms as the hierarchical model are used, with
``theta_s = (kappa, lambda)`` for all s.  The maximum is found by Nelder-Mead
from a small grid of starting points; pointwise intervals come from sampling
the asymptotic normal distribution of the MLE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .dist import weibull_cdf_values
from .likelihood import StudyBatch
from .sampler import DEFAULT_AGES

START_SHAPES = (2.0, 4.0, 6.0)
START_SCALES = (70.0, 95.0, 130.0)


class FixedEffectsError(RuntimeError):
    pass


@dataclass
class FixedEffectsFit:
    kappa_hat: float
    lambda_hat: float
    ages: tuple[float, ...]
    penetrance: np.ndarray
    loglik: float
    converged: bool
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    hessian_repaired: bool = False
    starts: list[dict] = field(default_factory=list)

    def rows(self):
        lo = self.lower if self.lower is not None else [math.nan] * len(self.ages)
        hi = self.upper if self.upper is not None else [math.nan] * len(self.ages)
        return [(a, float(p), float(l), float(u)) for a, p, l, u in zip(self.ages, self.penetrance, lo, hi)]


def _as_batch(studies, baseline) -> StudyBatch:
    if isinstance(studies, StudyBatch):
        return studies
    return StudyBatch(list(studies), baseline)


def common_loglik(batch: StudyBatch, kappa: float, lam: float) -> float:
    """Total log-likelihood when every study shares (kappa, lam)."""
    if not (kappa > 0 and lam > 0):
        return -math.inf
    return float(np.sum(batch.loglik(np.full(batch.size, kappa), np.full(batch.size, lam))))


def fit_fixed_effects(
    studies,
    baseline=None,
    ages: Sequence[float] = DEFAULT_AGES,
    intervals: bool = True,
    draws: int = 10_000,
    seed: int | None = None,
) -> FixedEffectsFit:
    """Maximum-likelihood common Weibull curve, optionally with 95% intervals."""
    batch = _as_batch(studies, baseline)
    if batch.size == 0:
        raise FixedEffectsError("no studies to fit")

    def objective(x):
        val = common_loglik(batch, math.exp(x[0]), math.exp(x[1]))
        return -val if math.isfinite(val) else 1e300

    best = None
    starts = []
    for k0 in START_SHAPES:
        for l0 in START_SCALES:
            res = minimize(
                objective,
                x0=np.log([k0, l0]),
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000, "maxfev": 8000},
            )
            ok = bool(res.success) and res.fun < 1e300
            starts.append({"start": (k0, l0), "fun": float(res.fun), "converged": ok})
            if ok and (best is None or res.fun < best.fun):
                best = res
    if best is None:
        raise FixedEffectsError(f"Nelder-Mead failed from every start: {starts}")
    kappa, lam = (float(v) for v in np.exp(best.x))
    fit = FixedEffectsFit(
        kappa_hat=kappa,
        lambda_hat=lam,
        ages=tuple(float(a) for a in ages),
        penetrance=weibull_cdf_values(np.asarray(ages, float), kappa, lam),
        loglik=-float(best.fun),
        converged=True,
        starts=starts,
    )
    if intervals:
        fixed_effects_intervals(fit, batch, baseline, ages, draws, seed)
    return fit


def negloglik_hessian(batch: StudyBatch, kappa: float, lam: float, rel_step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Hessian of the negative log-likelihood in (kappa, lambda)."""
    x0 = np.array([kappa, lam], float)
    h = rel_step * x0

    def f(x):
        return -common_loglik(batch, x[0], x[1])

    H = np.empty((2, 2))
    f0 = f(x0)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h[i]
        H[i, i] = (f(x0 + e) - 2.0 * f0 + f(x0 - e)) / h[i] ** 2
    e0 = np.array([h[0], 0.0])
    e1 = np.array([0.0, h[1]])
    H[0, 1] = H[1, 0] = (
        f(x0 + e0 + e1) - f(x0 + e0 - e1) - f(x0 - e0 + e1) + f(x0 - e0 - e1)
    ) / (4.0 * h[0] * h[1])
    return H


def fixed_effects_intervals(
    fit: FixedEffectsFit,
    studies,
    baseline=None,
    ages: Sequence[float] | None = None,
    draws: int = 10_000,
    seed: int | None = None,
    level: float = 0.95,
):
    """Pointwise intervals by sampling (kappa, lambda) from the asymptotic normal at the MLE.

    Updates ``fit`` in place and returns ``(lower, upper)``.  A Hessian that
    is not positive definite is repaired by clipping eigenvalues at 1e-8 and
    flagged on the fit.
    """
    batch = _as_batch(studies, baseline)
    ages = np.asarray(fit.ages if ages is None else ages, float)
    H = negloglik_hessian(batch, fit.kappa_hat, fit.lambda_hat)
    H = 0.5 * (H + H.T)
    vals, vecs = np.linalg.eigh(H)
    if not np.all(np.isfinite(vals)):
        raise FixedEffectsError("Hessian at the MLE is not finite")
    if vals.min() < 1e-8:
        vals = np.maximum(vals, 1e-8)
        fit.hessian_repaired = True
    cov = (vecs / vals) @ vecs.T
    rng = np.random.default_rng(seed)
    sample = rng.multivariate_normal([fit.kappa_hat, fit.lambda_hat], cov, size=draws, method="eigh")
    sample = sample[(sample[:, 0] > 0) & (sample[:, 1] > 0)]
    curves = weibull_cdf_values(ages[None, :], sample[:, :1], sample[:, 1:])
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(curves, [tail, 100.0 - tail], axis=0)
    point = weibull_cdf_values(ages, fit.kappa_hat, fit.lambda_hat)
    # percentile bounds of a skewed sample can miss the point estimate by rounding
    fit.lower = np.minimum(lo, point)
    fit.upper = np.maximum(hi, point)
    return fit.lower, fit.upper

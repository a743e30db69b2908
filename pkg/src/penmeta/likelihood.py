"""Study log-likelihoods as functions of Weibull penetrance parameters.

Every reported measure is modelled as normal on a transformed scale whose
mean is written in terms of the study's Weibull curve:

* penetrance curves: MVN on the logit scale with covariance W*;
* RR: ``log RR ~ N(log(E_q1[f_s] / E_q0[f_0]), w*)``;
* SIR: as RR but with the general-population denominator
  ``P(g=0) E_q0[f_0] + P(g=1) E_q1[f_s]`` when a carrier prevalence is given;
* OR: ``log OR ~ N(log nu, w*)`` with
  ``nu = (E_qc1[f_s] / E_qc0[f_0]) / (E_qh1[1 - F_s] / E_qh0[1 - F_0])``.

Degenerate parameter values (a model cdf of exactly 0 or 1 at a reported
age, or a zero integral) give a log-likelihood of ``-inf``; callers treat any
non-finite value as a rejection.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .dist import (
    AgeDistribution,
    PenetranceModel,
    TruncatedWeibull,
    age_quadrature,
    expect_under_age_dist,
    weibull_cdf_values,
    weibull_logit_cdf,
    weibull_pdf_values,
)
from .studies import OR, PENETRANCE, RR, SIR, LikelihoodInputs

LOG_2PI = math.log(2.0 * math.pi)
REJECT = -math.inf


class DegenerateIntegralError(ValueError):
    pass


# --- non-carrier baseline ---------------------------------------------------

class TabulatedBaseline:
    """Registry-style cumulative risk table with monotone cubic interpolation.

    The table is anchored at (0, 0) when it does not start at age 0 and held
    flat past the last age.
    """

    def __init__(self, ages, cumulative_risk):
        ages = np.asarray(ages, dtype=float)
        risk = np.asarray(cumulative_risk, dtype=float)
        if ages.ndim != 1 or ages.shape != risk.shape or len(ages) < 2:
            raise ValueError("baseline table needs at least two (age, risk) rows")
        if np.any(np.diff(ages) <= 0):
            raise ValueError("baseline ages must be strictly increasing")
        if np.any(np.diff(risk) < 0) or risk.min() < 0 or risk.max() >= 1:
            raise ValueError("baseline cumulative risk must be non-decreasing within [0, 1)")
        if ages[0] > 0:
            ages = np.concatenate([[0.0], ages])
            risk = np.concatenate([[0.0], risk])
        self.ages = ages
        self.risk = risk
        self._interp = PchipInterpolator(ages, risk, extrapolate=False)
        self._deriv = self._interp.derivative()

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where(t >= self.ages[-1], self.risk[-1], self._interp(np.clip(t, self.ages[0], self.ages[-1])))
        return float(out) if out.ndim == 0 else out

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t >= self.ages[0]) & (t <= self.ages[-1])
        out = np.where(inside, self._deriv(np.clip(t, self.ages[0], self.ages[-1])), 0.0)
        out = np.maximum(out, 0.0)
        return float(out) if out.ndim == 0 else out

    def survival(self, t):
        return 1.0 - self.cdf(t)


def parse_baseline(source: str):
    """Baseline from ``weibull:SHAPE,SCALE[,TRUNCATION]`` or a two-column CSV path."""
    text = str(source).strip()
    if text.lower().startswith("weibull:"):
        parts = [float(p) for p in text.split(":", 1)[1].split(",")]
        if len(parts) == 2:
            return PenetranceModel(*parts)
        if len(parts) == 3:
            return TruncatedWeibull(*parts)
        raise ValueError("expected weibull:SHAPE,SCALE or weibull:SHAPE,SCALE,TRUNCATION")
    return load_baseline_table(text)


def load_baseline_table(path) -> TabulatedBaseline:
    ages, risk = [], []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                a, r = float(row[0]), float(row[1])
            except ValueError:
                continue  # header
            ages.append(a)
            risk.append(r)
    return TabulatedBaseline(ages, risk)


def _expect_positive(f, q: AgeDistribution, what: str) -> float:
    val = expect_under_age_dist(f, q)
    if not val > 0:
        raise DegenerateIntegralError(f"{what} integral is not positive ({val})")
    return val


# --- scalar modality means ---------------------------------------------------

def rr_mean(theta: PenetranceModel, baseline, q1: AgeDistribution, q0: AgeDistribution) -> float:
    """Log of the model-implied relative risk."""
    den = _expect_positive(baseline.pdf, q0, "non-carrier density")
    with np.errstate(divide="ignore"):
        num = expect_under_age_dist(lambda a: weibull_pdf_values(a, theta.shape, theta.scale), q1)
        return math.log(num) - math.log(den) if num > 0 else REJECT


def sir_mean(theta, baseline, q1, q0, prevalence: float) -> float:
    """Log of the model-implied SIR with a carrier/non-carrier mixture denominator."""
    if not 0 < prevalence < 1:
        raise ValueError(f"carrier prevalence must lie in (0, 1), got {prevalence}")
    den0 = _expect_positive(baseline.pdf, q0, "non-carrier density")
    num = expect_under_age_dist(lambda a: weibull_pdf_values(a, theta.shape, theta.scale), q1)
    if not num > 0:
        return REJECT
    return math.log(num) - math.log((1.0 - prevalence) * den0 + prevalence * num)


def or_mean(theta, baseline, qc1, qc0, qh1, qh0) -> float:
    """Log of the model-implied odds ratio ``nu``."""
    cases0 = _expect_positive(baseline.pdf, qc0, "non-carrier case density")
    healthy0 = _expect_positive(lambda a: 1.0 - np.asarray(baseline.cdf(a)), qh0, "non-carrier survival")
    cases1 = expect_under_age_dist(lambda a: weibull_pdf_values(a, theta.shape, theta.scale), qc1)
    healthy1 = expect_under_age_dist(lambda a: 1.0 - weibull_cdf_values(a, theta.shape, theta.scale), qh1)
    if not (cases1 > 0 and healthy1 > 0):
        return REJECT
    return math.log(cases1) - math.log(cases0) - math.log(healthy1) + math.log(healthy0)


def _normal_logpdf(x: float, mean: float, variance: float) -> float:
    if not math.isfinite(mean):
        return REJECT
    r = x - mean
    return -0.5 * (LOG_2PI + math.log(variance) + r * r / variance)


# --- per-study log-likelihoods -------------------------------------------------

def _mvn_parts(cov: np.ndarray):
    chol = np.linalg.cholesky(cov)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return chol, logdet


def loglik_penetrance(inputs: LikelihoodInputs, theta: PenetranceModel) -> float:
    if inputs.modality != PENETRANCE:
        raise ValueError(f"study {inputs.id!r} is not a penetrance study")
    with np.errstate(over="ignore", invalid="ignore"):
        mean = weibull_logit_cdf(inputs.ages, theta.shape, theta.scale)
    if not np.all(np.isfinite(mean)):
        return REJECT
    chol, logdet = _mvn_parts(inputs.covariance)
    z = np.linalg.solve(chol, inputs.target - mean)
    return -0.5 * (len(mean) * LOG_2PI + logdet + float(z @ z))


def loglik_rr(inputs: LikelihoodInputs, theta: PenetranceModel, baseline) -> float:
    if inputs.modality not in (RR, SIR):
        raise ValueError(f"study {inputs.id!r} is not an RR study")
    return _normal_logpdf(inputs.target, rr_mean(theta, baseline, inputs.q1, inputs.q0), inputs.variance)


def loglik_sir(inputs: LikelihoodInputs, theta: PenetranceModel, baseline) -> float:
    """Uses the mixture denominator when the record carries a prevalence, else the RR form."""
    if inputs.modality != SIR:
        raise ValueError(f"study {inputs.id!r} is not an SIR study")
    p = inputs.record.carrier_prevalence
    if p is None:
        return loglik_rr(inputs, theta, baseline)
    return _normal_logpdf(inputs.target, sir_mean(theta, baseline, inputs.q1, inputs.q0, p), inputs.variance)


def loglik_or(inputs: LikelihoodInputs, theta: PenetranceModel, baseline) -> float:
    if inputs.modality != OR:
        raise ValueError(f"study {inputs.id!r} is not an OR study")
    mu = or_mean(theta, baseline, inputs.qc1, inputs.qc0, inputs.qh1, inputs.qh0)
    return _normal_logpdf(inputs.target, mu, inputs.variance)


def study_loglik(inputs: LikelihoodInputs, theta: PenetranceModel, baseline) -> float:
    if inputs.modality == PENETRANCE:
        return loglik_penetrance(inputs, theta)
    if inputs.modality == RR:
        return loglik_rr(inputs, theta, baseline)
    if inputs.modality == SIR:
        return loglik_sir(inputs, theta, baseline)
    return loglik_or(inputs, theta, baseline)


def total_loglik(studies: Sequence[LikelihoodInputs], thetas: Sequence[PenetranceModel], baseline) -> float:
    """Sum of per-study terms; studies are independent given their parameters."""
    if len(studies) != len(thetas):
        raise ValueError("need one parameter pair per study")
    total = 0.0
    for inputs, theta in zip(studies, thetas):
        term = study_loglik(inputs, theta, baseline)
        if not math.isfinite(term):
            return REJECT
        total += term
    return total


# --- vectorised evaluation ----------------------------------------------------

class StudyBatch:
    """Per-study log-likelihoods for arrays of (kappa, lambda), over one or more slots.

    A slot is one dataset: a list of prepared studies.  All slots must share
    the same modality layout (and, for penetrance studies, the same number of
    ages at each position) so their terms stack into arrays of shape
    ``(slots, studies)``.  Baseline integrals do not depend on the carrier
    parameters and are computed once here.  Results agree with
    :func:`study_loglik` to rounding.
    """

    def __init__(self, studies: Sequence[LikelihoodInputs] | Sequence[Sequence[LikelihoodInputs]], baseline):
        slots = [list(studies)] if not studies or isinstance(studies[0], LikelihoodInputs) else [list(s) for s in studies]
        self.slots = slots
        self.studies = slots[0]
        self.baseline = baseline
        self.n_slots = len(slots)
        self.size = len(self.studies)
        self.modalities = [s.modality for s in self.studies]
        for other in slots[1:]:
            if [s.modality for s in other] != self.modalities:
                raise ValueError("all slots must share the same modality layout")

        self._pen_idx = [i for i, m in enumerate(self.modalities) if m == PENETRANCE]
        self._pen = []
        for i in self._pen_idx:
            ages = np.array([slot[i].ages for slot in slots], dtype=float)
            target = np.array([slot[i].target for slot in slots], dtype=float)
            linv, const = [], []
            for slot in slots:
                chol, logdet = _mvn_parts(slot[i].covariance)
                linv.append(np.linalg.inv(chol))
                const.append(-0.5 * (len(slot[i].ages) * LOG_2PI + logdet))
            self._pen.append((i, ages, target, np.array(linv), np.array(const)))

        self._scalar_idx = np.array([i for i, m in enumerate(self.modalities) if m != PENETRANCE], dtype=int)
        if len(self._scalar_idx) == 0:
            return
        rows = [[self._scalar_row(slot[i], baseline) for i in self._scalar_idx] for slot in slots]

        def stack(k):
            return np.array([[r[k] for r in slot_rows] for slot_rows in rows])

        self._num_x, self._num_w = stack("num_x"), stack("num_w")
        self._surv_x, self._surv_w = stack("surv_x"), stack("surv_w")
        self._target, self._var = stack("target"), stack("var")
        self._prev, self._den0 = stack("prev"), stack("den0")
        self._offset = stack("offset")
        self._is_or = stack("is_or").astype(bool)
        self._norm = -0.5 * (LOG_2PI + np.log(self._var))

    @staticmethod
    def _scalar_row(s: LikelihoodInputs, baseline) -> dict:
        if s.modality == OR:
            xc, wc = age_quadrature(s.qc1)
            xh, wh = age_quadrature(s.qh1)
            cases0 = _expect_positive(baseline.pdf, s.qc0, f"study {s.id}: non-carrier case density")
            healthy0 = _expect_positive(lambda a: 1.0 - np.asarray(baseline.cdf(a)), s.qh0,
                                        f"study {s.id}: non-carrier survival")
            return dict(num_x=xc, num_w=wc, surv_x=xh, surv_w=wh, target=s.target, var=s.variance,
                        prev=0.0, den0=1.0, offset=math.log(healthy0) - math.log(cases0), is_or=True)
        x1, w1 = age_quadrature(s.q1)
        d0 = _expect_positive(baseline.pdf, s.q0, f"study {s.id}: non-carrier density")
        p = s.record.carrier_prevalence if s.modality == SIR else None
        return dict(num_x=x1, num_w=w1, surv_x=x1, surv_w=np.zeros_like(w1), target=s.target,
                    var=s.variance, prev=0.0 if p is None else p, den0=d0, offset=0.0, is_or=False)

    def _shape_args(self, kappa, lam):
        kappa = np.asarray(kappa, float)
        lam = np.asarray(lam, float)
        squeeze = kappa.ndim <= 1 and lam.ndim <= 1
        shape = (self.n_slots, self.size)
        return np.broadcast_to(kappa, shape), np.broadcast_to(lam, shape), squeeze and self.n_slots == 1

    def _scalar_means(self, k, l):
        # k, l: (slots, n_scalar)
        k = k[..., None]
        l = l[..., None]
        z = self._num_x / l
        num = np.sum(self._num_w * (k / l) * np.power(z, k - 1.0) * np.exp(-np.power(z, k)), axis=-1)
        log_num = np.log(num)
        # RR and SIR: log(num / ((1 - p) den0 + p num)); p = 0 gives the RR form
        rr = log_num - np.log((1.0 - self._prev) * self._den0 + self._prev * num)
        healthy = np.sum(self._surv_w * np.exp(-np.power(self._surv_x / l, k)), axis=-1)
        orm = log_num - np.log(healthy) + self._offset
        return np.where(self._is_or, orm, rr)

    def means(self, kappa, lam) -> np.ndarray:
        """Model-implied log measure of each scalar study (NaN for penetrance studies)."""
        kappa, lam, squeeze = self._shape_args(kappa, lam)
        out = np.full((self.n_slots, self.size), np.nan)
        if len(self._scalar_idx):
            with np.errstate(all="ignore"):
                out[:, self._scalar_idx] = self._scalar_means(kappa[:, self._scalar_idx], lam[:, self._scalar_idx])
        return out[0] if squeeze else out

    def loglik(self, kappa, lam) -> np.ndarray:
        """Per-study log-likelihoods; ``-inf`` marks degenerate parameter values.

        Accepts vectors of length ``size`` (single slot) or arrays of shape
        ``(n_slots, size)``.
        """
        kappa, lam, squeeze = self._shape_args(kappa, lam)
        out = np.empty((self.n_slots, self.size))
        with np.errstate(all="ignore"):
            if len(self._scalar_idx):
                sk = kappa[:, self._scalar_idx]
                sl = lam[:, self._scalar_idx]
                mu = self._scalar_means(sk, sl)
                r = self._target - mu
                ll = self._norm - 0.5 * r * r / self._var
                out[:, self._scalar_idx] = np.where(np.isfinite(mu), ll, -np.inf)
            for i, ages, target, linv, const in self._pen:
                k = kappa[:, i:i + 1]
                x = np.power(ages / lam[:, i:i + 1], k)
                mean = np.log(-np.expm1(-x)) + x
                z = np.einsum("cij,cj->ci", linv, target - mean)
                ll = const - 0.5 * np.sum(z * z, axis=1)
                out[:, i] = np.where(np.all(np.isfinite(mean), axis=1), ll, -np.inf)
        return out[0] if squeeze else out

    def total(self, kappa, lam):
        ll = self.loglik(kappa, lam)
        tot = np.sum(ll, axis=-1)
        return float(tot) if np.ndim(tot) == 0 else tot

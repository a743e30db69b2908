"""Simulation harness: synthetic studies, true-penetrance oracle and replicate metrics.

One replicate draws study-specific Weibull parameters from normal
distributions, then produces for each planned study either a Kaplan-Meier
penetrance curve (carriers only) or an RR/OR estimate sampled from a
synthetic population of carriers and non-carriers.  The replicates are fed
to the Bayesian sampler and to the fixed-effects fit, and per-age mean,
MSE and interval coverage are reported against the mixture truth.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dist import AgeDistribution, TruncatedWeibull, weibull_cdf_values
from .dist import PenetranceModel
from .fixed import fit_fixed_effects
from .likelihood import StudyBatch
from .sampler import (
    DEFAULT_AGES,
    HyperPriorConfig,
    PosteriorDraws,
    chain_starts,
    consensus_penetrance,
    proposal_kinds,
    run_chains,
)
from .studies import OR, PENETRANCE, RR, Z_975, StudyRecord, prepare_studies

NONCARRIER_MODEL = TruncatedWeibull(3.65, 143.2426, 185.0)
MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class PlannedStudy:
    """One study in a replicate.

    ``n`` is the total sample size.  For RR studies ``n_exposed`` is the
    number of carriers, for OR studies the number of cases; it defaults to
    half of ``n``.  ``reports_ages`` marks a study that supplies its own age
    summaries under Scenario 1.
    """

    modality: str
    n: int
    reports_ages: bool = False
    n_exposed: int | None = None

    def __post_init__(self):
        if self.modality not in (PENETRANCE, RR, OR):
            raise ValueError(f"simulated studies are Penetrance, RR or OR, not {self.modality!r}")
        if self.n <= 0:
            raise ValueError("sample sizes must be positive")
        if self.modality == PENETRANCE and self.reports_ages:
            raise ValueError("penetrance studies carry no age summaries")
        if self.n_exposed is not None and not 0 < self.n_exposed < self.n:
            raise ValueError("n_exposed must lie strictly between 0 and n")

    @property
    def split(self) -> tuple[int, int]:
        first = self.n_exposed if self.n_exposed is not None else self.n // 2
        return first, self.n - first


@dataclass(frozen=True)
class SimulationSetting:
    name: str
    kappa_mean: float
    kappa_sd: float
    lambda_mean: float
    lambda_sd: float
    plan: tuple[PlannedStudy, ...]
    scenario: int = 1
    population_size: int = 2_000_000
    carrier_prob: float = 0.01
    noncarrier: TruncatedWeibull = NONCARRIER_MODEL
    censor_mean: float = 85.0
    censor_sd: float = 10.0
    max_age: float = 95.0
    ages: tuple[float, ...] = DEFAULT_AGES

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ValueError("scenario must be 1 or 2")
        if self.kappa_sd < 0 or self.lambda_sd < 0:
            raise ValueError("standard deviations must be non-negative")
        if not (self.kappa_mean > 0 and self.lambda_mean > 0):
            raise ValueError("parameter means must be positive")
        if not 0 <= self.carrier_prob <= 1:
            raise ValueError("carrier probability must lie in [0, 1]")
        if self.population_size <= 0:
            raise ValueError("population size must be positive")

    def reports_ages(self, index: int) -> bool:
        return self.scenario == 1 and self.plan[index].reports_ages

    def with_scenario(self, scenario: int) -> "SimulationSetting":
        return replace(self, scenario=scenario)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kappa": [self.kappa_mean, self.kappa_sd],
            "lambda": [self.lambda_mean, self.lambda_sd],
            "scenario": self.scenario,
            "population_size": self.population_size,
            "carrier_prob": self.carrier_prob,
            "noncarrier": [self.noncarrier.shape, self.noncarrier.scale, self.noncarrier.truncation],
            "censoring": [self.censor_mean, self.censor_sd],
            "max_age": self.max_age,
            "ages": list(self.ages),
            "plan": [
                {"modality": p.modality, "n": p.n, "reports_ages": p.reports_ages, "n_exposed": p.n_exposed}
                for p in self.plan
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSetting":
        base = preset(d["preset"]) if "preset" in d else None
        kw = {}
        if "kappa" in d:
            kw["kappa_mean"], kw["kappa_sd"] = map(float, d["kappa"])
        if "lambda" in d:
            kw["lambda_mean"], kw["lambda_sd"] = map(float, d["lambda"])
        if "plan" in d:
            kw["plan"] = tuple(
                PlannedStudy(p["modality"], int(p["n"]), bool(p.get("reports_ages", False)), p.get("n_exposed"))
                for p in d["plan"]
            )
        for key in ("scenario", "population_size"):
            if key in d:
                kw[key] = int(d[key])
        for key in ("carrier_prob", "max_age"):
            if key in d:
                kw[key] = float(d[key])
        if "name" in d:
            kw["name"] = d["name"]
        if "noncarrier" in d:
            kw["noncarrier"] = TruncatedWeibull(*map(float, d["noncarrier"]))
        if "censoring" in d:
            kw["censor_mean"], kw["censor_sd"] = map(float, d["censoring"])
        if "ages" in d:
            kw["ages"] = tuple(float(a) for a in d["ages"])
        if base is not None:
            return replace(base, **kw)
        return cls(**kw)


def _plan(rows) -> tuple[PlannedStudy, ...]:
    return tuple(PlannedStudy(m, n, r) for m, n, r in rows)


# Table-1 composition; SIR studies are generated as RR.  Under Scenario 1 the
# first two RR and the first two OR studies report their age summaries.
ATM_PLAN = _plan(
    [(PENETRANCE, 156, False), (PENETRANCE, 1160, False)]
    + [(RR, n, i < 2) for i, n in enumerate([919, 5173, 660, 712, 708])]
    + [(OR, n, i < 2) for i, n in enumerate([95561, 18292, 97997, 64791, 200, 193, 2231, 2133, 298, 603])]
)

PALB2_PLAN = _plan(
    [(PENETRANCE, n, False) for n in (1000, 500, 1000, 500)]
    + [(RR, n, i < 2) for i, n in enumerate([1000, 1800, 2500, 5000])]
    + [(OR, n, i < 2) for i, n in enumerate([500, 1000, 3000, 5000])]
)

DESK_POPULATION = 200_000


def atm_setting(scenario: int = 1) -> SimulationSetting:
    return SimulationSetting("atm", 4.55, 0.525, 95.25, 12.375, ATM_PLAN, scenario)


def palb2_setting(scenario: int = 1) -> SimulationSetting:
    return SimulationSetting("palb2", 3.7, 0.35, 84.5, 7.25, PALB2_PLAN, scenario)


def preset(name: str, scenario: int = 1, desk_scale: bool = False) -> SimulationSetting:
    makers = {"atm": atm_setting, "palb2": palb2_setting}
    try:
        setting = makers[name.lower()](scenario)
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(makers)}") from None
    return replace(setting, population_size=DESK_POPULATION) if desk_scale else setting


# --- study-level parameters and truth -----------------------------------------

def _positive_normal(mean: float, sd: float, size: int, rng: np.random.Generator) -> np.ndarray:
    out = rng.normal(mean, sd, size)
    bad = out <= 0
    while bad.any():
        out[bad] = rng.normal(mean, sd, int(bad.sum()))
        bad = out <= 0
    return out


def generate_study_params(setting: SimulationSetting, rng: np.random.Generator, n: int | None = None):
    """Independent (kappa_s, lambda_s) per planned study, redrawing non-positive values."""
    n = len(setting.plan) if n is None else n
    kappa = _positive_normal(setting.kappa_mean, setting.kappa_sd, n, rng)
    lam = _positive_normal(setting.lambda_mean, setting.lambda_sd, n, rng)
    return kappa, lam


def true_penetrance_oracle(
    setting: SimulationSetting,
    ages: Sequence[float] | None = None,
    n_outer: int = 1_000_000,
    n_inner: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Mean Weibull penetrance over the study-parameter distribution at each age.

    With ``n_inner`` set, each (kappa, lambda) pair contributes the empirical
    cdf of ``n_inner`` simulated onset ages instead of the analytic cdf.
    """
    if n_outer < 1:
        raise ValueError("n_outer must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    ages = np.asarray(setting.ages if ages is None else ages, float)
    total = np.zeros(len(ages))
    chunk = 200_000 if n_inner is None else max(1, 2_000_000 // n_inner)
    done = 0
    while done < n_outer:
        m = min(chunk, n_outer - done)
        kappa, lam = generate_study_params(setting, rng, m)
        if n_inner is None:
            total += weibull_cdf_values(ages[None, :], kappa[:, None], lam[:, None]).sum(axis=0)
        else:
            t = lam[:, None] * rng.weibull(kappa[:, None], (m, n_inner))
            total += (t[:, :, None] <= ages).mean(axis=1).sum(axis=0)
        done += m
    return total / n_outer


# --- Kaplan-Meier -----------------------------------------------------------

def kaplan_meier(times, events, at) -> tuple[np.ndarray, np.ndarray]:
    """Kaplan-Meier survival and Greenwood sum ``sum d / (n (n - d))`` at each age in ``at``.

    An observation with time equal to a query age counts as already observed.
    """
    times = np.asarray(times, float)
    events = np.asarray(events, bool)
    at = np.asarray(at, float)
    order = np.sort(times)
    event_times, deaths = np.unique(times[events], return_counts=True)
    at_risk = len(times) - np.searchsorted(order, event_times, side="left")
    with np.errstate(divide="ignore", invalid="ignore"):
        factors = 1.0 - deaths / at_risk
        green = np.where(at_risk > deaths, deaths / (at_risk * (at_risk - deaths)), np.inf)
    surv = np.concatenate([[1.0], np.cumprod(factors)])
    gsum = np.concatenate([[0.0], np.cumsum(green)])
    idx = np.searchsorted(event_times, at, side="right")
    return surv[idx], gsum[idx]


def km_penetrance_ci(survival, greenwood, z: float = Z_975):
    """Cumulative incidence ``1 - S`` with a complementary log-log CI on S.

    The interval stays inside (0, 1) whenever 0 < S < 1.
    """
    s = np.asarray(survival, float)
    g = np.asarray(greenwood, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.sqrt(g) / np.abs(np.log(s))
    s_low = s ** np.exp(z * se)
    s_high = s ** np.exp(-z * se)
    return 1.0 - s, 1.0 - s_high, 1.0 - s_low


def _onset_times(kappa, lam, n, setting, rng):
    event = lam * rng.weibull(kappa, n)
    censor = rng.normal(setting.censor_mean, setting.censor_sd, n)
    observed = np.minimum(np.minimum(event, censor), setting.max_age)
    return observed, event <= observed


def simulate_penetrance_study(
    kappa: float,
    lam: float,
    n: int,
    ages: Sequence[float] = DEFAULT_AGES,
    rng: np.random.Generator | None = None,
    setting: SimulationSetting | None = None,
    study_id: str = "P",
    counters: Counter | None = None,
) -> StudyRecord:
    """Kaplan-Meier penetrance estimates and CIs from ``n`` simulated carriers.

    A draw whose curve is not strictly increasing across ``ages`` (for
    example no events before the first age) is regenerated and counted
    under ``"penetrance_regenerated"``.
    """
    if n < 30:
        raise ValueError("penetrance studies need n >= 30")
    rng = rng if rng is not None else np.random.default_rng()
    setting = setting or atm_setting()
    ages = np.asarray(ages, float)
    for _ in range(MAX_ATTEMPTS):
        observed, events = _onset_times(kappa, lam, n, setting, rng)
        surv, green = kaplan_meier(observed, events, ages)
        est, lo, hi = km_penetrance_ci(surv, green)
        ok = (
            np.all(np.diff(est) > 0)
            and est[0] > 0
            and np.all(surv > 0)
            and np.all((lo > 0) & (lo < est) & (est < hi) & (hi < 1))
        )
        if ok:
            return StudyRecord(study_id, PENETRANCE, n, tuple(est), tuple(lo), tuple(hi), ages=tuple(ages))
        if counters is not None:
            counters["penetrance_regenerated"] += 1
    raise RuntimeError(f"study {study_id}: no usable Kaplan-Meier curve after {MAX_ATTEMPTS} attempts")


# --- cohorts and sampled studies ------------------------------------------------

@dataclass
class SyntheticCohort:
    carrier: np.ndarray
    event_age: np.ndarray
    censor_age: np.ndarray
    observed_age: np.ndarray
    affected: np.ndarray

    def __len__(self):
        return len(self.carrier)

    def concat(self, other: "SyntheticCohort") -> "SyntheticCohort":
        return SyntheticCohort(*(np.concatenate([getattr(self, f), getattr(other, f)])
                                 for f in ("carrier", "event_age", "censor_age", "observed_age", "affected")))


def simulate_cohort(
    setting: SimulationSetting,
    kappa: float,
    lam: float,
    rng: np.random.Generator,
    size: int | None = None,
) -> SyntheticCohort:
    """Population with Weibull(kappa, lam) carriers and truncated-Weibull non-carriers."""
    size = setting.population_size if size is None else size
    carrier = rng.random(size) < setting.carrier_prob
    n1 = int(carrier.sum())
    event = np.empty(size)
    event[carrier] = lam * rng.weibull(kappa, n1)
    event[~carrier] = setting.noncarrier.sample(size - n1, rng)
    censor = rng.normal(setting.censor_mean, setting.censor_sd, size)
    observed = np.minimum(np.minimum(event, censor), setting.max_age)
    return SyntheticCohort(carrier, event, censor, observed, event <= observed)


def _summary(ages: np.ndarray) -> AgeDistribution | None:
    if len(ages) < 2:
        return None
    sd = float(np.std(ages, ddof=1))
    return AgeDistribution(float(np.mean(ages)), sd) if sd > 0 else None


def _ci(estimate: float, se: float) -> tuple[float, float, float]:
    log_est = math.log(estimate)
    return estimate, math.exp(log_est - Z_975 * se), math.exp(log_est + Z_975 * se)


def sample_rr_study(
    cohort: SyntheticCohort,
    n_carriers: int,
    n_noncarriers: int,
    rng: np.random.Generator,
    report_ages: bool = False,
    study_id: str = "RR",
    counters: Counter | None = None,
) -> StudyRecord:
    """RR of disease for sampled carriers versus sampled non-carriers.

    The log-scale SE is ``sqrt(1/x1 - 1/n1 + 1/x0 - 1/n0)``.  When
    ``report_ages`` is set the record carries normal summaries of the
    onset ages of affected carriers and affected non-carriers.
    """
    carriers = np.flatnonzero(cohort.carrier)
    noncarriers = np.flatnonzero(~cohort.carrier)
    if len(carriers) < n_carriers or len(noncarriers) < n_noncarriers:
        raise ValueError(f"study {study_id}: cohort too small for the requested sample")
    for _ in range(MAX_ATTEMPTS):
        s1 = rng.choice(carriers, n_carriers, replace=False)
        s0 = rng.choice(noncarriers, n_noncarriers, replace=False)
        x1 = int(cohort.affected[s1].sum())
        x0 = int(cohort.affected[s0].sum())
        if x1 > 0 and x0 > 0 and (x1 < n_carriers or x0 < n_noncarriers):
            break
        if counters is not None:
            counters["rr_resampled"] += 1
    else:
        raise RuntimeError(f"study {study_id}: no affected subjects after {MAX_ATTEMPTS} resamples")
    rr = (x1 / n_carriers) / (x0 / n_noncarriers)
    se = math.sqrt(1 / x1 - 1 / n_carriers + 1 / x0 - 1 / n_noncarriers)
    est, lo, hi = _ci(rr, se)
    kw = {}
    if report_ages:
        kw["onset_carriers"] = _summary(cohort.event_age[s1][cohort.affected[s1]])
        kw["onset_noncarriers"] = _summary(cohort.event_age[s0][cohort.affected[s0]])
    return StudyRecord(study_id, RR, n_carriers + n_noncarriers, est, lo, hi, **kw)


def odds_ratio_table(a, b, c, d) -> tuple[float, float, bool]:
    """OR ``(a d) / (b c)`` and SE of its log, adding 0.5 to every cell if any is zero.

    ``a, b`` are carrier and non-carrier cases; ``c, d`` carrier and
    non-carrier controls.  Returns ``(or, se_log, corrected)``.
    """
    cells = np.array([a, b, c, d], float)
    corrected = bool(np.any(cells == 0))
    if corrected:
        cells = cells + 0.5
    a, b, c, d = cells
    return (a * d) / (b * c), math.sqrt(float(np.sum(1.0 / cells))), corrected


def sample_or_study(
    cohort: SyntheticCohort,
    n_cases: int,
    n_controls: int,
    rng: np.random.Generator,
    report_ages: bool = False,
    study_id: str = "OR",
    counters: Counter | None = None,
) -> StudyRecord:
    """OR from sampled cases (affected) and controls (unaffected) by carrier status.

    Age summaries, when reported, describe the controls' observed ages and
    are used for the cases as well (age-matched design).
    """
    cases = np.flatnonzero(cohort.affected)
    controls = np.flatnonzero(~cohort.affected)
    if len(cases) < n_cases or len(controls) < n_controls:
        raise ValueError(f"study {study_id}: cohort too small for the requested sample")
    for _ in range(MAX_ATTEMPTS):
        sc = rng.choice(cases, n_cases, replace=False)
        sh = rng.choice(controls, n_controls, replace=False)
        a = int(cohort.carrier[sc].sum())
        c = int(cohort.carrier[sh].sum())
        if a + c > 0:
            break
        if counters is not None:
            counters["or_resampled"] += 1
    else:
        raise RuntimeError(f"study {study_id}: no carriers sampled after {MAX_ATTEMPTS} resamples")
    odds, se, corrected = odds_ratio_table(a, n_cases - a, c, n_controls - c)
    if corrected and counters is not None:
        counters["or_continuity_corrected"] += 1
    est, lo, hi = _ci(odds, se)
    kw = {}
    if report_ages:
        q = _summary(cohort.observed_age[sh])
        kw = {"onset_cases": q, "inclusion_controls": q}
    return StudyRecord(study_id, OR, n_cases + n_controls, est, lo, hi, **kw)


def _cohort_for(setting, kappa, lam, enough, rng, counters) -> SyntheticCohort:
    cohort = simulate_cohort(setting, kappa, lam, rng)
    while not enough(cohort):
        cohort = cohort.concat(simulate_cohort(setting, kappa, lam, rng))
        if counters is not None:
            counters["cohort_extended"] += 1
    return cohort


def simulate_replicate(
    setting: SimulationSetting,
    rng: np.random.Generator,
    counters: Counter | None = None,
) -> list[StudyRecord]:
    """One synthetic meta-analysis dataset following ``setting.plan``.

    Each RR or OR study is sampled from its own population; the population
    is grown in ``population_size`` chunks when it cannot supply the
    requested subsample (counted under ``"cohort_extended"``).
    """
    kappa, lam = generate_study_params(setting, rng)
    records = []
    seen = Counter()
    for i, (study, k, l) in enumerate(zip(setting.plan, kappa, lam)):
        seen[study.modality] += 1
        sid = f"{study.modality}{seen[study.modality]}"
        report = setting.reports_ages(i)
        if study.modality == PENETRANCE:
            records.append(simulate_penetrance_study(k, l, study.n, setting.ages, rng, setting, sid, counters))
            continue
        n1, n2 = study.split
        if study.modality == RR:
            cohort = _cohort_for(setting, k, l, lambda c: c.carrier.sum() >= n1 and (~c.carrier).sum() >= n2,
                                 rng, counters)
            records.append(sample_rr_study(cohort, n1, n2, rng, report, sid, counters))
        else:
            cohort = _cohort_for(setting, k, l, lambda c: c.affected.sum() >= n1 and (~c.affected).sum() >= n2,
                                 rng, counters)
            records.append(sample_or_study(cohort, n1, n2, rng, report, sid, counters))
    return records


# --- registry conversions ---------------------------------------------------------

def rr_or_to_penetrance(measure: str, value: float, ages, baseline_risk) -> np.ndarray:
    """Carrier cumulative risk at ``ages`` implied by a constant RR or OR.

    ``baseline_risk`` is the non-carrier cumulative risk at ``ages``; the
    first interval starts at age 0.  Interval risks are converted one by one
    and summed.
    """
    ages = np.asarray(ages, float)
    base = np.asarray(baseline_risk, float)
    if ages.shape != base.shape or np.any(np.diff(ages) <= 0) or np.any(np.diff(base) < 0):
        raise ValueError("need increasing ages with non-decreasing baseline risks")
    if not value > 0:
        raise ValueError("risk ratio must be positive")
    p0 = np.diff(np.concatenate([[0.0], base]))
    kind = measure.upper()
    if kind in ("RR", "SIR"):
        p1 = value * p0
    elif kind == "OR":
        with np.errstate(divide="ignore", invalid="ignore"):
            odds = value * p0 / (1.0 - p0)
            p1 = np.where(np.isinf(odds), 1.0, odds / (1.0 + odds))
    else:
        raise ValueError(f"measure must be RR, SIR or OR, not {measure!r}")
    cum = np.cumsum(p1)
    if np.any(cum >= 1.0):
        warnings.warn(f"{kind} {value} implies carrier risk >= 1; clamping", RuntimeWarning, stacklevel=2)
        cum = np.minimum(cum, 1.0 - 1e-12)
    return cum


def fit_weibull_to_curve(ages, risks) -> PenetranceModel:
    """Least-squares Weibull fit on the complementary log-log scale."""
    ages = np.asarray(ages, float)
    risks = np.asarray(risks, float)
    if len(ages) < 2 or ages.shape != risks.shape:
        raise ValueError("need at least two (age, risk) points")
    if np.any(np.diff(ages) <= 0) or np.any(ages <= 0):
        raise ValueError("ages must be positive and strictly increasing")
    if np.any(np.diff(risks) <= 0) or risks[0] <= 0 or risks[-1] >= 1:
        raise ValueError("risks must be strictly increasing inside (0, 1)")
    x = np.log(ages)
    y = np.log(-np.log1p(-risks))
    slope, intercept = np.polyfit(x, y, 1)
    if not slope > 0:
        raise ValueError("fitted Weibull shape is not positive")
    return PenetranceModel(float(slope), float(math.exp(-intercept / slope)))


# --- replicate metrics -------------------------------------------------------------

@dataclass(frozen=True)
class ReplicateMetrics:
    mean: np.ndarray
    mse: np.ndarray
    coverage: np.ndarray


def evaluate_replicates(estimates, lower, upper, truth) -> ReplicateMetrics:
    """Per-age mean, MSE against ``truth`` and fraction of intervals covering it.

    Arrays are (replicates, ages); ``truth`` has one value per age.
    """
    est = np.atleast_2d(np.asarray(estimates, float))
    lo = np.atleast_2d(np.asarray(lower, float))
    hi = np.atleast_2d(np.asarray(upper, float))
    truth = np.asarray(truth, float)
    if not (est.shape == lo.shape == hi.shape) or est.shape[1] != truth.shape[0]:
        raise ValueError("estimates, intervals and truth must share one age grid")
    if est.shape[0] < 1:
        raise ValueError("no replicates")
    cover = (lo <= truth) & (truth <= hi)
    return ReplicateMetrics(est.mean(axis=0), ((est - truth) ** 2).mean(axis=0), cover.mean(axis=0))


# --- replicate runner ----------------------------------------------------------------

@dataclass(frozen=True)
class SimulationRun:
    setting: SimulationSetting
    replicates: int = 500
    iterations: int = 30_000
    burn_in: int = 15_000
    chains: int = 2
    seed: int = 0
    covariance_draws: int = 1_000_000
    fixed_effects: bool = True
    threads: int = 1
    hyper: HyperPriorConfig = field(default_factory=HyperPriorConfig)

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.chains < 1 or self.threads < 1:
            raise ValueError("chains and threads must be positive")

    @classmethod
    def desk(cls, setting: SimulationSetting, **kw) -> "SimulationRun":
        """50 replicates, 200k-person populations, 6000 iterations with 3000 burn-in."""
        defaults = dict(replicates=50, iterations=6000, burn_in=3000, covariance_draws=200_000)
        defaults.update(kw)
        return cls(replace(setting, population_size=DESK_POPULATION), **defaults)

    def to_dict(self) -> dict:
        return {
            "setting": self.setting.to_dict(),
            "replicates": self.replicates,
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "chains": self.chains,
            "seed": self.seed,
            "covariance_draws": self.covariance_draws,
            "fixed_effects": self.fixed_effects,
            "threads": self.threads,
        }


@dataclass
class SimulationResult:
    ages: tuple[float, ...]
    truth: np.ndarray
    estimates: dict[str, np.ndarray]
    lower: dict[str, np.ndarray]
    upper: dict[str, np.ndarray]
    rhat_max: np.ndarray  # per replicate, over all parameters
    counters: Counter

    def metrics(self, method: str) -> ReplicateMetrics:
        return evaluate_replicates(self.estimates[method], self.lower[method], self.upper[method], self.truth)

    @property
    def methods(self) -> list[str]:
        return list(self.estimates)

    def results_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "method", "age", "estimate", "lower", "upper"])
        for method in self.methods:
            for r in range(self.estimates[method].shape[0]):
                for j, age in enumerate(self.ages):
                    w.writerow([r, method, _fmt(age), *(f"{x[method][r, j]:.10g}"
                                                          for x in (self.estimates, self.lower, self.upper))])
        return buf.getvalue()

    def summary_rows(self) -> list[tuple]:
        rows = [("true", "penetrance", *self.truth)]
        for method in self.methods:
            m = self.metrics(method)
            rows += [(method, "mean", *m.mean), (method, "mse", *m.mse), (method, "coverage", *m.coverage)]
        return rows

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "statistic", *(_fmt(a) for a in self.ages)])
        for row in self.summary_rows():
            w.writerow([row[0], row[1], *(f"{v:.6g}" for v in row[2:])])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else str(x)


def _prepare_replicate(run: SimulationRun, seed_seq: np.random.SeedSequence):
    data_seq, cov_seq, fe_seq = seed_seq.spawn(3)
    counters = Counter()
    records = simulate_replicate(run.setting, np.random.default_rng(data_seq), counters)
    prepared = prepare_studies(records, covariance_draws=run.covariance_draws, seed=cov_seq)
    return prepared, counters, fe_seq


def _fixed_effects_rows(run: SimulationRun, prepared, fe_seq):
    fit = fit_fixed_effects(prepared, run.setting.noncarrier, run.setting.ages,
                            seed=np.random.default_rng(fe_seq).integers(2**63))
    return fit.penetrance, fit.lower, fit.upper


def _mcmc_group(run: SimulationRun, datasets, seed_seq):
    """Run every chain of every dataset in one lock-step batch."""
    chains = run.chains
    batch = StudyBatch([ds for ds in datasets for _ in range(chains)], run.setting.noncarrier)
    rng = np.random.default_rng(seed_seq)
    starts = [st for _ in datasets for st in chain_starts(batch.size, chains, run.hyper, rng)]
    traces = run_chains(batch.loglik, proposal_kinds(datasets[0]), run.hyper, run.iterations, run.burn_in,
                        rng, starts, run.setting.ages)
    out = []
    for r, ds in enumerate(datasets):
        draws = PosteriorDraws(traces[r * chains:(r + 1) * chains], tuple(run.setting.ages), run.iterations,
                               run.burn_in, 1, None, tuple(s.id for s in ds))
        summary = consensus_penetrance(draws)
        rhat = max(draws.gelman_rubin().values()) if chains > 1 else math.nan
        out.append((summary.mean, summary.lower, summary.upper, rhat))
    return out


def run_simulation(run: SimulationRun, truth_draws: int = 1_000_000) -> SimulationResult:
    """Generate, analyse and score ``run.replicates`` synthetic meta-analyses.

    Every replicate has its own seed stream for data generation, so the
    datasets do not depend on ``threads``.  MCMC chains are batched per
    worker; results are reproducible for a fixed seed and thread count.
    """
    root = np.random.SeedSequence(run.seed)
    rep_seqs = root.spawn(run.replicates)
    truth_seq, mcmc_seq = root.spawn(2)
    counters = Counter()
    datasets, fe_seqs = [], []
    for seq in rep_seqs:
        prepared, c, fe_seq = _prepare_replicate(run, seq)
        counters.update(c)
        datasets.append(prepared)
        fe_seqs.append(fe_seq)

    groups = np.array_split(np.arange(run.replicates), min(run.threads, run.replicates))
    group_seqs = mcmc_seq.spawn(len(groups))
    jobs = [([datasets[i] for i in g], s) for g, s in zip(groups, group_seqs)]
    if len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            parts = list(pool.map(_mcmc_group, [run] * len(jobs), *zip(*jobs)))
    else:
        parts = [_mcmc_group(run, *jobs[0])]
    bayes = [row for part in parts for row in part]

    A = len(run.setting.ages)
    estimates = {"bayesian": np.array([b[0] for b in bayes]).reshape(-1, A)}
    lower = {"bayesian": np.array([b[1] for b in bayes]).reshape(-1, A)}
    upper = {"bayesian": np.array([b[2] for b in bayes]).reshape(-1, A)}
    if run.fixed_effects:
        fe = [_fixed_effects_rows(run, ds, s) for ds, s in zip(datasets, fe_seqs)]
        estimates["fixed"] = np.array([f[0] for f in fe])
        lower["fixed"] = np.array([f[1] for f in fe])
        upper["fixed"] = np.array([f[2] for f in fe])
    truth = true_penetrance_oracle(run.setting, run.setting.ages, truth_draws, rng=np.random.default_rng(truth_seq))
    return SimulationResult(
        ages=tuple(run.setting.ages),
        truth=truth,
        estimates=estimates,
        lower=lower,
        upper=upper,
        rhat_max=np.array([b[3] for b in bayes]),
        counters=counters,
    )

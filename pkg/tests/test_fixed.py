import math

import numpy as np
import pytest

from penmeta.dist import PenetranceModel, TruncatedWeibull, logit
from penmeta.fixed import FixedEffectsError, common_loglik, fit_fixed_effects, negloglik_hessian
from penmeta.likelihood import StudyBatch
from penmeta.studies import StudyRecord, prepare_studies

BASE = TruncatedWeibull(3.65, 143.2426, 185.0)
AGES = (40.0, 50.0, 60.0, 70.0, 80.0)


def on_curve(model, ages, var, sid="p"):
    mu = logit(model.cdf(np.asarray(ages, float)))
    half = 1.959964 * math.sqrt(var)
    p = lambda x: tuple(1 / (1 + np.exp(-x)))
    return StudyRecord(sid, "Penetrance", 400, p(mu), p(mu - half), p(mu + half), ages=tuple(ages))


def prep(records, seed=0):
    return prepare_studies(records, covariance_draws=200_000, seed=seed)


def mixed_records():
    return [
        on_curve(PenetranceModel(4.2, 98.0), (45, 55, 65, 75), 0.06, "p1"),
        StudyRecord("r1", "RR", 919, 2.4, 1.3, 4.3),
        StudyRecord("s1", "SIR", 712, 2.9, 1.9, 4.4, carrier_prevalence=0.003),
        StudyRecord("o1", "OR", 5000, 1.74, 1.46, 2.07),
        StudyRecord("o2", "OR", 3000, 2.6, 1.5, 4.4),
    ]


def test_recovers_curve_of_single_exact_study():
    truth = PenetranceModel(4.55, 95.25)
    fit = fit_fixed_effects(prep([on_curve(truth, AGES, 0.05)]), BASE, intervals=False)
    assert fit.converged
    assert fit.kappa_hat == pytest.approx(4.55, rel=1e-3)
    assert fit.lambda_hat == pytest.approx(95.25, rel=1e-3)
    assert np.allclose(fit.penetrance, truth.cdf(np.array(AGES)), atol=1e-4)


def test_duplicate_studies_share_the_optimum():
    studies = prep(mixed_records())
    once = fit_fixed_effects(studies, BASE, intervals=False)
    twice = fit_fixed_effects(studies + studies, BASE, intervals=False)
    assert twice.kappa_hat == pytest.approx(once.kappa_hat, rel=1e-5)
    assert twice.lambda_hat == pytest.approx(once.lambda_hat, rel=1e-5)


def test_reordering_does_not_move_optimum():
    studies = prep(mixed_records())
    a = fit_fixed_effects(studies, BASE, intervals=False)
    b = fit_fixed_effects(studies[::-1], BASE, intervals=False)
    assert a.kappa_hat == pytest.approx(b.kappa_hat, rel=1e-8)
    assert a.lambda_hat == pytest.approx(b.lambda_hat, rel=1e-8)
    assert a.loglik == pytest.approx(b.loglik, abs=1e-8)


def test_gradient_vanishes_at_optimum():
    batch = StudyBatch(prep(mixed_records()), BASE)
    fit = fit_fixed_effects(batch, intervals=False)
    k, l = fit.kappa_hat, fit.lambda_hat
    h = 1e-5
    gk = (common_loglik(batch, k * (1 + h), l) - common_loglik(batch, k * (1 - h), l)) / (2 * h)
    gl = (common_loglik(batch, k, l * (1 + h)) - common_loglik(batch, k, l * (1 - h))) / (2 * h)
    assert math.hypot(gk, gl) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fixed_optimum_below_study_specific_maximum(seed):
    rng = np.random.default_rng(seed)
    recs = [on_curve(PenetranceModel(rng.uniform(3, 6), rng.uniform(70, 120)), AGES, 0.05, f"p{i}") for i in range(2)]
    recs += [StudyRecord(f"r{i}", "RR", 500, float(e), float(e) / 2, float(e) * 2)
             for i, e in enumerate(rng.uniform(1.5, 5, 2))]
    studies = prep(recs, seed)
    joint = fit_fixed_effects(studies, BASE, intervals=False).loglik
    separate = sum(fit_fixed_effects([s], BASE, intervals=False).loglik for s in studies)
    assert joint <= separate + 1e-8
    assert joint < separate - 1.0


def test_intervals_contain_estimate_and_are_monotone():
    fit = fit_fixed_effects(prep(mixed_records()), BASE, draws=20_000, seed=4)
    assert np.all(fit.lower <= fit.penetrance) and np.all(fit.penetrance <= fit.upper)
    assert np.all(np.diff(fit.penetrance) > 0)
    assert np.all(np.diff(fit.lower) >= 0) and np.all(np.diff(fit.upper) >= 0)
    assert fit.rows()[0][0] == 40.0 and len(fit.rows()) == 5


def test_intervals_are_seeded():
    studies = prep(mixed_records())
    a = fit_fixed_effects(studies, BASE, draws=5000, seed=8)
    b = fit_fixed_effects(studies, BASE, draws=5000, seed=8)
    assert np.array_equal(a.lower, b.lower) and np.array_equal(a.upper, b.upper)


def test_tight_data_shrinks_intervals():
    truth = PenetranceModel(4.55, 95.25)
    widths = []
    for var in (1e-2, 1e-4, 1e-6):
        fit = fit_fixed_effects(prep([on_curve(truth, AGES, var)]), BASE, draws=20_000, seed=1)
        widths.append(float(np.max(fit.upper - fit.lower)))
    assert widths[0] > widths[1] > widths[2]
    assert widths[2] < 1e-3


def test_hessian_is_positive_definite_at_optimum():
    batch = StudyBatch(prep(mixed_records()), BASE)
    fit = fit_fixed_effects(batch, intervals=False)
    H = negloglik_hessian(batch, fit.kappa_hat, fit.lambda_hat)
    assert np.allclose(H, H.T)
    assert np.linalg.eigvalsh(H).min() > 0
    assert not fit.hessian_repaired


def test_empty_input_is_an_error():
    with pytest.raises(FixedEffectsError):
        fit_fixed_effects([], BASE)

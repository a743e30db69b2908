import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from penmeta.dist import (
    DEFAULT_AGE_DISTRIBUTION,
    AgeDistribution,
    PenetranceModel,
    TruncatedWeibull,
    age_quadrature,
    expect_under_age_dist,
    inv_logit,
    logit,
    weibull_cdf,
    weibull_pdf,
)

shapes = st.floats(0.5, 8.0)
scales = st.floats(20.0, 200.0)


def test_cdf_at_origin_is_zero():
    assert weibull_cdf(PenetranceModel(4.55, 95.25), 0.0) == 0.0


def test_unit_exponential_cdf():
    assert weibull_cdf(PenetranceModel(1.0, 1.0), 1.0) == pytest.approx(1 - math.exp(-1), abs=1e-12)


def test_cdf_matches_monte_carlo():
    rng = np.random.default_rng(11)
    draws = 143.2426 * rng.weibull(3.65, 10_000_000)
    assert weibull_cdf(PenetranceModel(3.65, 143.2426), 80.0) == pytest.approx(np.mean(draws <= 80), abs=1e-3)


@pytest.mark.parametrize("t", [-1.0, math.inf, math.nan])
def test_cdf_rejects_bad_ages(t):
    with pytest.raises(ValueError):
        weibull_cdf(PenetranceModel(2.0, 50.0), t)


@pytest.mark.parametrize("shape,scale", [(0.0, 1.0), (1.0, -2.0), (math.nan, 1.0)])
def test_model_rejects_bad_parameters(shape, scale):
    with pytest.raises(ValueError):
        PenetranceModel(shape, scale)


def test_pdf_vanishes_at_origin_when_shape_above_one():
    assert weibull_pdf(PenetranceModel(2.0, 1.0), 0.0) == 0.0


def test_pdf_integrates_to_one():
    m = PenetranceModel(4.55, 95.25)
    total, _ = integrate.quad(lambda t: weibull_pdf(m, t), 0, 500, points=[95.25], limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_pdf_matches_cdf_derivative_at_60():
    m = PenetranceModel(4.55, 95.25)
    h = 1e-5
    fd = (weibull_cdf(m, 60 + h) - weibull_cdf(m, 60 - h)) / (2 * h)
    assert fd == pytest.approx(weibull_pdf(m, 60.0), rel=1e-6)


def test_pdf_cdf_consistency_random_triples():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = PenetranceModel(rng.uniform(1.0, 8.0), rng.uniform(40, 150))
        t = rng.uniform(20, 100)
        h = 1e-4 * t
        fd = (weibull_cdf(m, t + h) - weibull_cdf(m, t - h)) / (2 * h)
        assert fd == pytest.approx(weibull_pdf(m, t), rel=1e-6)


@given(shapes, scales, st.floats(0.1, 150.0), st.floats(0.01, 50.0))
def test_cdf_strictly_increasing(shape, scale, t, dt):
    m = PenetranceModel(shape, scale)
    lo, hi = weibull_cdf(m, t), weibull_cdf(m, t + dt)
    assert 0.0 <= lo <= hi <= 1.0
    if lo < 1 - 1e-12:
        assert hi > lo


def test_scipy_agrees():
    ages = np.linspace(1, 120, 50)
    m = PenetranceModel(3.2, 88.0)
    assert np.allclose(m.cdf(ages), stats.weibull_min(3.2, scale=88.0).cdf(ages), atol=1e-14)
    assert np.allclose(m.pdf(ages), stats.weibull_min(3.2, scale=88.0).pdf(ages), rtol=1e-12)


def test_logit_examples():
    assert logit(0.5) == 0.0
    assert inv_logit(0.0) == 0.5
    assert logit(0.253) == pytest.approx(math.log(0.253 / 0.747), abs=1e-15)
    assert logit(0.253) == pytest.approx(-1.0826, abs=1e-4)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_logit_domain_error_mentions_clamping(p):
    with pytest.raises(ValueError, match="clamp"):
        logit(p)


@given(st.floats(1e-12, 1 - 1e-12))
def test_logit_round_trip(p):
    assert inv_logit(logit(p)) == pytest.approx(p, rel=1e-12, abs=1e-15)


def test_inv_logit_is_stable_at_extremes():
    assert inv_logit(800.0) == 1.0
    assert inv_logit(-800.0) == pytest.approx(0.0, abs=1e-300)


def test_truncated_weibull_cdf_reaches_one_at_truncation():
    tw = TruncatedWeibull(3.65, 143.2426, 185.0)
    assert tw.cdf(185.0) == 1.0
    assert tw.cdf(250.0) == 1.0
    assert tw.pdf(190.0) == 0.0
    total, _ = integrate.quad(lambda t: tw.pdf(t), 0, 185)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_truncated_weibull_sampling_ks():
    tw = TruncatedWeibull(3.65, 143.2426, 185.0)
    draws = tw.sample(1_000_000, np.random.default_rng(5))
    assert draws.max() <= 185.0
    ks = stats.kstest(draws, tw.cdf).statistic
    assert ks < 0.002


def test_age_distribution_rejects_nonpositive_sd():
    with pytest.raises(ValueError):
        AgeDistribution(63.0, 0.0)


def test_expectation_of_one_and_of_age():
    q = DEFAULT_AGE_DISTRIBUTION
    # total probability, less the mass below age 0 that the support clipping drops
    dropped = stats.norm(q.mean, q.sd).cdf(0.0)
    assert expect_under_age_dist(lambda a: np.ones_like(a), q) == pytest.approx(1.0 - dropped, abs=1e-9)
    assert dropped < 1e-5
    assert expect_under_age_dist(lambda a: a, q) == pytest.approx(63.0, abs=0.01)


def test_expectation_of_weibull_density_matches_monte_carlo():
    m = PenetranceModel(4.55, 95.25)
    q = DEFAULT_AGE_DISTRIBUTION
    rng = np.random.default_rng(17)
    a = rng.normal(q.mean, q.sd, 10_000_000)
    mc = np.mean(np.where(a > 0, m.pdf(np.clip(a, 0, None)), 0.0))
    assert expect_under_age_dist(m.pdf, q) == pytest.approx(mc, rel=1e-3)


def test_quadrature_matches_monte_carlo_on_random_pairs():
    rng = np.random.default_rng(23)
    for _ in range(10):
        q = AgeDistribution(rng.uniform(40, 80), rng.uniform(3, 15))
        m = PenetranceModel(rng.uniform(2, 6), rng.uniform(60, 140))
        a = rng.normal(q.mean, q.sd, 10_000_000)
        vals = np.where(a > 0, m.pdf(np.clip(a, 0, None)), 0.0)
        se = vals.std() / math.sqrt(len(vals))
        assert abs(expect_under_age_dist(m.pdf, q) - vals.mean()) < 3 * se


def test_quadrature_clips_at_zero_without_renormalising():
    q = AgeDistribution(5.0, 10.0)
    nodes, weights = age_quadrature(q)
    assert nodes.min() >= 0.0
    assert weights.sum() == pytest.approx(stats.norm(5, 10).sf(0), abs=1e-10)


@settings(max_examples=25)
@given(st.floats(20, 90), st.floats(1, 20))
def test_quadrature_is_deterministic(mean, sd):
    q = AgeDistribution(mean, sd)
    f = PenetranceModel(3.0, 80.0).pdf
    assert expect_under_age_dist(f, q) == expect_under_age_dist(f, q)

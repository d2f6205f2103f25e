import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from tobart.stats_core import (
    CensoringBounds,
    Interval,
    as_bounds,
    error_dist_mean,
    normal_cdf,
    normal_pdf,
    normal_quantile,
    rng_stream,
    sample_dirichlet,
    sample_error_dist,
    sample_inverse_gamma,
    sample_truncated_normal,
    t_density,
    truncnorm_moments,
)


# ---------------------------------------------------------------- densities

def test_normal_pdf_values():
    assert normal_pdf(0.0) == pytest.approx(0.3989422804, abs=1e-10)
    assert normal_pdf(3.0) == pytest.approx(0.0044318484, abs=1e-10)
    assert normal_pdf(1.3, 1.3, 2.5) == pytest.approx(1 / (2.5 * math.sqrt(2 * math.pi)))


def test_normal_pdf_integrates_to_one():
    val, _ = integrate.quad(lambda x: normal_pdf(x, 0.7, 1.9), -np.inf, np.inf)
    assert val == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("fn", [normal_pdf, normal_cdf, normal_quantile])
def test_nonpositive_sigma_rejected(fn):
    with pytest.raises(ValueError):
        fn(0.5, 0.0, 0.0)
    with pytest.raises(ValueError):
        fn(0.5, 0.0, -1.0)


def test_normal_cdf_values():
    assert normal_cdf(0.0) == 0.5
    assert normal_cdf(np.inf) == 1.0
    assert normal_cdf(1.96) == pytest.approx(0.9750021, abs=1e-7)
    assert normal_cdf(4.0, 4.0, 3.0) == 0.5


def test_normal_cdf_against_quadrature():
    for x in (-3.0, -0.4, 0.0, 1.1, 2.7):
        ref, _ = integrate.quad(normal_pdf, -np.inf, x, epsabs=1e-14)
        assert abs(normal_cdf(x) - ref) < 1e-12


def test_quantile_roundtrip():
    p = np.concatenate([[1e-6, 1e-4], np.linspace(0.01, 0.99, 99), [1 - 1e-4, 1 - 1e-6]])
    assert np.max(np.abs(normal_cdf(normal_quantile(p)) - p)) < 1e-9


@given(st.floats(-30, 30), st.floats(-5, 5), st.floats(0.05, 20))
def test_cdf_monotone_and_bounded(x, mu, sigma):
    c1 = normal_cdf(x, mu, sigma)
    c2 = normal_cdf(x + 0.5, mu, sigma)
    assert 0.0 <= c1 <= c2 <= 1.0


def test_t_density_peak_and_limit():
    nu, loc, s2 = 5.0, 1.2, 2.3
    peak = special.gamma((nu + 1) / 2) / (special.gamma(nu / 2) * math.sqrt(nu * math.pi * s2))
    assert t_density(loc, nu, loc, s2) == pytest.approx(peak, rel=1e-12)
    assert t_density(0.0, 1e7) == pytest.approx(0.3989422804, abs=1e-6)
    np.testing.assert_allclose(t_density(np.linspace(-3, 3, 7), 3.0, 0.5, 1.7),
                               stats.t.pdf(np.linspace(-3, 3, 7), 3.0, 0.5, math.sqrt(1.7)),
                               rtol=1e-12)


@given(st.floats(-20, 20), st.floats(0.5, 50), st.floats(-5, 5), st.floats(0.1, 10))
def test_t_density_symmetric(x, nu, loc, s2):
    assert t_density(x, nu, loc, s2) == pytest.approx(t_density(2 * loc - x, nu, loc, s2),
                                                       rel=1e-10)


def test_t_density_rejects_bad_params():
    with pytest.raises(ValueError):
        t_density(0.0, 0.0)
    with pytest.raises(ValueError):
        t_density(0.0, 3.0, 0.0, -1.0)


# ---------------------------------------------------------------- rng

def test_rng_stream_reproducible_and_distinct():
    a = rng_stream(7, 0).random(5)
    b = rng_stream(7, 0).random(5)
    c = rng_stream(7, 1).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_samplers_are_pure_functions_of_stream():
    def run(seed):
        r = rng_stream(seed, 3)
        return (sample_truncated_normal(r, 0.3, 1.2, (1.0, np.inf), size=20),
                sample_inverse_gamma(r, 2.0, 3.0, size=5),
                sample_dirichlet(r, [0.5, 1.0, 2.0]))

    for x, y in zip(run(11), run(11)):
        assert np.array_equal(x, y)


# ---------------------------------------------------------------- truncated normal

def test_truncnorm_half_line_mean():
    x = sample_truncated_normal(rng_stream(1), 0.0, 1.0, (0.0, np.inf), size=10**6)
    assert np.all(x >= 0)
    assert abs(x.mean() - 2 * normal_pdf(0.0)) < 0.003


def test_truncnorm_untruncated_mean():
    x = sample_truncated_normal(rng_stream(2), 0.0, 1.0, (-np.inf, np.inf), size=10**6)
    assert abs(x.mean()) < 0.003


def test_truncnorm_deep_tail_support():
    x = sample_truncated_normal(rng_stream(3), 0.0, 1.0, (10.0, 11.0), size=10**4)
    assert np.all((x >= 10.0) & (x <= 11.0))
    mean, _ = truncnorm_moments(0.0, 1.0, 10.0, 11.0)
    assert abs(x.mean() - mean) < 4 * x.std() / 100


def test_truncnorm_empty_interval():
    with pytest.raises(ValueError):
        sample_truncated_normal(rng_stream(0), 0.0, 1.0, (1.0, 1.0))
    with pytest.raises(ValueError):
        sample_truncated_normal(rng_stream(0), 0.0, 1.0, (2.0, -1.0))


def test_truncnorm_moments_randomized():
    rng = np.random.default_rng(20)
    cases = [(0.0, 1.0, -np.inf, -9.0), (2.0, 0.5, 6.5, np.inf), (-1.0, 2.0, 15.0, 16.0)]
    for _ in range(17):
        mu, sigma = rng.normal(0, 2), rng.uniform(0.2, 3)
        kind = rng.integers(3)
        lo = mu + sigma * rng.uniform(-3, 3)
        hi = lo + sigma * rng.uniform(0.1, 4)
        cases.append((mu, sigma, lo if kind != 1 else -np.inf, hi if kind != 2 else np.inf))
    r = rng_stream(21)
    N = 40_000
    for mu, sigma, lo, hi in cases:
        x = sample_truncated_normal(r, mu, sigma, (lo, hi), size=N)
        m, v = truncnorm_moments(mu, sigma, lo, hi)
        assert np.all((x >= lo) & (x <= hi))
        se_m = math.sqrt(v / N)
        assert abs(x.mean() - m) < 4 * se_m, (mu, sigma, lo, hi)
        # variance of the sample variance, via the fourth central moment
        d = stats.truncnorm((lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma)
        mu4 = d.expect(lambda t: (t - m) ** 4)
        se_v = math.sqrt(max(mu4 - v * v, 1e-300) / N)
        assert abs(x.var() - v) < 4 * se_v + 1e-12, (mu, sigma, lo, hi)


@settings(max_examples=60, deadline=None)
@given(st.floats(-50, 50), st.floats(0.01, 10), st.floats(-60, 60), st.floats(0.01, 30))
def test_truncnorm_inside_bounds(mu, sigma, lo, width):
    x = sample_truncated_normal(rng_stream(0), mu, sigma, (lo, lo + width), size=50)
    assert np.all((x >= lo) & (x <= lo + width))


# ---------------------------------------------------------------- inverse gamma / Dirichlet

def test_inverse_gamma_mean_and_mode():
    x = sample_inverse_gamma(rng_stream(4), 3.0, 4.0, size=10**6)
    assert abs(x.mean() - 2.0) < 0.01
    hist, edges = np.histogram(x, bins=np.linspace(0, 4, 81))
    peak = 0.5 * (edges[hist.argmax()] + edges[hist.argmax() + 1])
    assert abs(peak - 1.0) < 0.1


@pytest.mark.parametrize("shape,scale", [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0)])
def test_inverse_gamma_domain(shape, scale):
    with pytest.raises(ValueError):
        sample_inverse_gamma(rng_stream(0), shape, scale)


def test_dirichlet_means():
    r = rng_stream(5)
    d = np.array([sample_dirichlet(r, [1.0, 1.0]) for _ in range(10**5)])
    assert abs(d[:, 0].mean() - 0.5) < 0.01
    d30 = np.array([sample_dirichlet(r, np.full(30, 1 / 30)) for _ in range(20_000)])
    assert np.all(np.abs(d30.mean(axis=0) - 1 / 30) < 0.005)
    assert np.array_equal(sample_dirichlet(r, [5.0]), [1.0])


@given(st.lists(st.floats(0.01, 50), min_size=2, max_size=20), st.integers(0, 2**32))
def test_dirichlet_on_simplex(w, seed):
    d = sample_dirichlet(rng_stream(seed), w)
    assert np.all(d >= 0)
    assert abs(d.sum() - 1.0) < 1e-12


def test_dirichlet_rejects_nonpositive():
    with pytest.raises(ValueError):
        sample_dirichlet(rng_stream(0), [1.0, 0.0])


# ---------------------------------------------------------------- error distributions

def test_error_distributions():
    r = rng_stream(6)
    w = sample_error_dist(r, "weibull", 10**6)
    assert abs(w.mean() - 0.4) < 0.01
    assert error_dist_mean("weibull") == pytest.approx(0.4)
    assert abs(sample_error_dist(r, "normal", 10**6).var() - 1.0) < 0.01
    assert abs(np.median(sample_error_dist(r, "t", 10**6))) < 0.01
    sk = sample_error_dist(r, "skew-t", 10**6)
    assert abs(sk.mean() - error_dist_mean("skew-t")) < 0.02
    assert stats.skew(sk[np.abs(sk) < 20]) > 0
    with pytest.raises(ValueError):
        sample_error_dist(r, "cauchy", 3)
    with pytest.raises(ValueError):
        sample_error_dist(r, "normal", 3, df=3)


# ---------------------------------------------------------------- bounds

def test_censoring_bounds_classify_and_censor():
    b = CensoringBounds(0.0, 2.0)
    assert b.classify([0.0, 1.0, 2.0]).tolist() == [-1, 0, 1]
    np.testing.assert_array_equal(b.censor([-1.0, 0.5, 3.0]), [0.0, 0.5, 2.0])
    with pytest.raises(ValueError, match="row 1"):
        b.classify([1.0, -0.5])
    with pytest.raises(ValueError):
        b.classify([np.nan])
    assert not as_bounds(None).censored
    with pytest.raises(ValueError):
        as_bounds((1.0, 1.0))
    with pytest.raises(ValueError):
        Interval(np.nan, 1.0).validate()

import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tobart.calibration import solve_k0, solve_lambda
from tobart.dp import (
    BaseMeasure,
    DpState,
    alpha_mixture_weight,
    assign_all,
    assign_observation,
    assignment_probs,
    draw_alpha,
    draw_oos_error,
    dp_step,
    remix_clusters,
    remove_observation,
)
from tobart.stats_core import rng_stream


def _state(gammas, sigmas, sizes, alpha=1.0, base=None):
    n = int(sum(sizes))
    st_ = DpState.single_cluster(n, 1.0, base or BaseMeasure(nu=10, lam=0.5, k0=2.0),
                                 alpha=alpha)
    st_.assign[:] = np.repeat(np.arange(len(sizes)), sizes)
    st_.k = len(sizes)
    st_.gamma_c[:st_.k] = gammas
    st_.sigma_c[:st_.k] = sigmas
    st_.size_c[:] = 0
    st_.size_c[:st_.k] = sizes
    st_.check()
    return st_


def test_single_observation_opens_new_cluster():
    s = DpState.single_cluster(1, 1.0, BaseMeasure())
    remove_observation(0, s)
    assert s.k == 0
    np.testing.assert_allclose(assignment_probs(0.3, s), [1.0])


def test_vanishing_alpha_keeps_existing_cluster():
    s = _state([0.0], [1.0], [3], alpha=1e-12)
    remove_observation(0, s)
    assert assignment_probs(0.1, s)[1] == pytest.approx(1.0, abs=1e-9)


def test_assignment_probs_brute_force():
    base = BaseMeasure(nu=5.0, lam=0.8, gamma0=0.0, k0=3.0)
    s = _state([-1.0, 0.5], [0.7, 1.3], [2, 1], alpha=1.7, base=base)
    remove_observation(0, s)
    u = 0.4
    q0 = 1.7 * stats.t.pdf(u, 5.0, 0.0, math.sqrt(0.8 * (1 + 1 / 3.0)))
    q = [q0, 1 * stats.norm.pdf(u, -1.0, 0.7), 1 * stats.norm.pdf(u, 0.5, 1.3)]
    np.testing.assert_allclose(assignment_probs(u, s), np.array(q) / sum(q), atol=1e-12)


def test_assignment_handles_underflow():
    s = _state([0.0], [1e-3], [4], alpha=1e-300)
    remove_observation(0, s)
    p = assignment_probs(1e6, s)
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


def test_new_cluster_draw_uses_displayed_conditionals():
    # with no competitors the new cluster's (sigma^2, gamma) follow the stated laws
    base = BaseMeasure(nu=4.0, lam=0.6, k0=2.0)
    u = 1.3
    rng = rng_stream(3)
    g, s2 = [], []
    for _ in range(40_000):
        st_ = DpState.single_cluster(1, 1.0, base)
        assign_observation(rng, 0, u, st_)
        g.append(st_.gamma_c[0])
        s2.append(st_.sigma_c[0] ** 2)
    shape = (4.0 + 1) / 2
    scale = 4.0 * 0.6 / 2 + u * u / (2 * (1 + 1 / 2.0))
    assert stats.kstest(s2, stats.invgamma(shape, scale=scale).cdf).pvalue > 0.01
    assert abs(np.mean(g) - u / 3.0) < 4 * math.sqrt(np.var(g) / len(g))


def test_remix_moments_single_cluster():
    rng = rng_stream(4)
    u = np.random.default_rng(4).normal(0.7, 1.2, 50)
    base = BaseMeasure(nu=6.0, lam=0.9, k0=1.5)
    n, ub = u.size, u.mean()
    shape = (6.0 + n) / 2
    scale = 6.0 * 0.9 / 2 + 0.5 * np.sum((u - ub) ** 2) + n * 1.5 / (1.5 + n) * ub**2 / 2
    gs, ss = [], []
    for _ in range(20_000):
        s = DpState.single_cluster(n, 1.0, base)
        remix_clusters(rng, s, u)
        gs.append(s.gamma_c[0])
        ss.append(s.sigma_c[0] ** 2)
        assert np.all(s.member_params()[0] == s.gamma_c[0])
    gs, ss = np.array(gs), np.array(ss)
    m_s2 = scale / (shape - 1)
    v_s2 = scale**2 / ((shape - 1) ** 2 * (shape - 2))
    assert abs(ss.mean() - m_s2) < 4 * math.sqrt(v_s2 / ss.size)
    m_g = n * ub / (1.5 + n)
    v_g = m_s2 / (1.5 + n)
    assert abs(gs.mean() - m_g) < 4 * math.sqrt(v_g / gs.size)


def test_remix_infinite_prior_precision_pins_gamma():
    s = DpState.single_cluster(20, 1.0, BaseMeasure(k0=1e12))
    remix_clusters(rng_stream(0), s, np.full(20, 3.0))
    assert abs(s.gamma_c[0]) < 1e-4


def test_alpha_mixture_weight():
    odds = 2.0 / (10 * (2.0 - math.log(0.5)))
    assert alpha_mixture_weight(1, 10, 0.5) == pytest.approx(odds / (1 + odds), abs=1e-12)
    assert alpha_mixture_weight(1, 10, 0.5) == pytest.approx(0.069127, abs=5e-6)
    k, n = 3, 40
    lim = (2.0 + k - 1) / (n * 2.0)
    assert alpha_mixture_weight(k, n, 1 - 1e-12) == pytest.approx(lim / (1 + lim), rel=1e-9)


def test_draw_alpha_positive_finite():
    rng = rng_stream(5)
    s = _state([0.0, 1.0], [1.0, 1.0], [6, 4])
    for _ in range(1000):
        draw_alpha(rng, s)
        assert 0 < s.alpha < np.inf


def test_oos_draws_limits():
    rng = rng_stream(6)
    s = _state([-1.0, 2.0], [0.5, 0.7], [3, 2], alpha=0.0)
    g, _ = draw_oos_error(rng, s, 500)
    assert set(np.unique(g)) <= {-1.0, 2.0}
    empty = DpState.single_cluster(0, 1.0, BaseMeasure())
    g0, s0 = draw_oos_error(rng, empty)
    assert np.isfinite(g0) and s0 > 0


def test_oos_selection_frequencies():
    rng = rng_stream(7)
    s = _state([-1.0, 0.0, 2.0], [0.5, 0.6, 0.7], [5, 3, 2], alpha=2.0)
    N = 100_000
    g, _ = draw_oos_error(rng, s, N)
    expected = {-1.0: 5 / 12, 0.0: 3 / 12, 2.0: 2 / 12}
    for val, p in expected.items():
        freq = np.mean(g == val)
        assert abs(freq - p) < 3 * math.sqrt(p * (1 - p) / N)
    fresh = np.mean(~np.isin(g, list(expected)))
    assert abs(fresh - 2 / 12) < 3 * math.sqrt((2 / 12) * (10 / 12) / N)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 30), st.floats(0.01, 20))
def test_state_valid_after_every_operation(seed, n, alpha):
    rng = rng_stream(seed)
    u = np.random.default_rng(seed).normal(0, 2, n)
    s = DpState.single_cluster(n, 1.0, BaseMeasure(nu=5, lam=1.0, k0=0.5), alpha=alpha)
    for _ in range(3):
        assign_all(rng, u, s)
        s.check()
        remix_clusters(rng, s, u)
        s.check()
        g, sg = s.member_params()
        assert np.array_equal(g, s.gamma_c[s.assign]) and np.array_equal(sg, s.sigma_c[s.assign])
        draw_alpha(rng, s)
        s.check()


def test_exchangeability_of_cluster_sizes():
    n = 10
    u = np.random.default_rng(8).normal(0, 1.5, n)
    perm = np.random.default_rng(9).permutation(n)
    base = BaseMeasure(nu=5, lam=0.5, k0=1.0)

    def sizes(vec, seed):
        s = DpState.single_cluster(n, 1.0, base, alpha=1.0)
        rng = rng_stream(seed)
        for _ in range(4):
            dp_step(rng, s, vec, update_alpha=False)
        return tuple(sorted(s.sizes.tolist()))

    a = Counter(sizes(u, r) for r in range(2000))
    b = Counter(sizes(u[perm], r) for r in range(2000, 4000))
    keys = sorted(set(a) | set(b))
    table = np.array([[a.get(k, 0) for k in keys], [b.get(k, 0) for k in keys]])
    # pool sparse categories so the chi-square approximation holds
    big = table.sum(axis=0) >= 20
    pooled = np.column_stack([table[:, big], table[:, ~big].sum(axis=1)])
    pooled = pooled[:, pooled.sum(axis=0) > 0]
    assert stats.chi2_contingency(pooled).pvalue > 0.01


def _mixture_density(seed):
    rng = np.random.default_rng(seed)
    u = np.where(rng.random(500) < 0.5, -2.0, 2.0) + 0.5 * rng.standard_normal(500)
    lam = solve_lambda(0.5, 0.9, 10.0)
    base = BaseMeasure(nu=10.0, lam=lam, k0=solve_k0(lam, u, 10.0))
    s = DpState.single_cluster(500, np.std(u), base, alpha=1.0)
    r = rng_stream(seed)
    grid = np.array([-2.0, 0.0, 2.0])
    dens = []
    # the single-cluster start is metastable for a few hundred sweeps
    for it in range(1500):
        dp_step(r, s, u)
        if it >= 1000:
            w = s.sizes / s.sizes.sum()
            dens.append(w @ stats.norm.pdf(grid, s.gammas[:, None], s.sigmas[:, None]))
    return np.mean(dens, axis=0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mixture_recovery(seed):
    lo, mid, hi = _mixture_density(seed)
    true_peak = 0.5 * stats.norm.pdf(0.0, 0.0, 0.5)
    assert abs(lo - true_peak) < 0.25 * true_peak
    assert abs(hi - true_peak) < 0.25 * true_peak
    assert mid < 0.02


def test_vanishing_alpha_matches_homoskedastic_posterior():
    rng = rng_stream(10)
    u = np.random.default_rng(10).normal(0, 1.3, 60)
    u -= u.mean()
    nu, lam = 3.0, 0.8
    s = DpState.single_cluster(60, 1.0, BaseMeasure(nu=nu, lam=lam, k0=1.0), alpha=1e-8)
    draws = []
    for it in range(6000):
        dp_step(rng, s, u, update_alpha=False)
        assert s.k == 1
        draws.append(s.sigma_c[0] ** 2)
    ref = stats.invgamma((60 + nu) / 2, scale=(u @ u + nu * lam) / 2)
    assert stats.kstest(draws[::2], ref.cdf).pvalue > 0.01

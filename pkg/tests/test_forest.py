import math

import numpy as np
import pytest
from scipy import stats

from tobart.forest import (
    ForestState,
    ForestTrace,
    backfit_sweep,
    sparsity_posterior,
    update_bandwidths,
    update_sparsity,
    update_split_probs,
)
from tobart.stats_core import rng_stream
from tobart.tree import Tree, leaf_posterior


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    X = rng.random((80, 4))
    y = np.sin(4 * X[:, 0]) + X[:, 1] + 0.1 * rng.standard_normal(80)
    return X, y


def test_zero_trees_rejected(data):
    with pytest.raises(ValueError):
        ForestState.init(data[0], m=0)


def test_sigma_mu_default(data):
    f = ForestState.init(data[0], m=50, kappa=2.0)
    assert f.sigma_mu == pytest.approx(0.5 / (2 * math.sqrt(50)))
    assert f.split_probs.sum() == pytest.approx(1.0)


def test_constant_target_recovered(data):
    X = data[0]
    rng = rng_stream(1)
    f = ForestState.init(X, m=20)
    target = np.full(X.shape[0], 0.3)
    for _ in range(200):
        backfit_sweep(rng, f, X, target, 1e-3)
    assert np.max(np.abs(f.fitted - 0.3)) < 0.01


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_fitted_cache_matches_recompute(data, mode):
    X, y = data
    rng = rng_stream(2)
    f = ForestState.init(X, m=10, mode=mode)
    for _ in range(25):
        backfit_sweep(rng, f, X, y, 0.2)
        np.testing.assert_allclose(f.fitted, f.predict(X), atol=1e-8)
        np.testing.assert_allclose(f.tree_fit.sum(axis=0), f.fitted, atol=1e-8)
    for j in range(f.m):
        f.tree(j).check(p=X.shape[1])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fixed_topology_leaf_draws_match_conjugate_posterior(data, seed):
    X, y = data
    rng = rng_stream(seed)
    f = ForestState.init(X, m=1, sigma_mu=0.5)
    t = Tree.stump(capacity=f.var.shape[1])
    t.split(0, 0, 0.5)
    for name in ("var", "cut", "left", "right", "parent", "depth", "mu"):
        getattr(f, name)[0] = getattr(t, name)
    f.recompute_fit(X)
    sig = 0.3
    draws = []
    for it in range(10_000):
        backfit_sweep(rng, f, X, y, sig, update_structure=False)
        if it % 2 == 0:
            draws.append(f.mu[0, f.left[0, 0]])
    left = X[:, 0] <= 0.5
    m, v = leaf_posterior(y[left], sig, 0.5)
    assert stats.kstest(draws, "norm", args=(m, math.sqrt(v))).pvalue > 0.01


def test_update_split_probs(data):
    X = data[0]
    f = ForestState.init(X, m=5, sparse=True)
    rng = rng_stream(3)
    update_split_probs(rng, f, counts=np.zeros(4, int))
    assert f.split_probs.sum() == pytest.approx(1.0, abs=1e-12)
    f.a_sparse = 0.1
    draws = [update_split_probs(rng, f, counts=np.array([100, 0, 0, 0])).split_probs[0]
             for _ in range(4000)]
    assert np.mean(draws) == pytest.approx((0.1 / 4 + 100) / (0.1 + 100), abs=0.01)


def test_sparsity_posterior():
    a, w = sparsity_posterior(np.full(20, 1 / 20))
    assert w.sum() == pytest.approx(1.0)
    conc = np.full(20, 1e-6)
    conc[0] = 1 - 19e-6
    a2, w2 = sparsity_posterior(conc)
    assert np.sum(a * w) > np.sum(a2 * w2)


def test_update_sparsity_degenerate_grid(data):
    f = ForestState.init(data[0], m=2)
    f.a_sparse = 1.7
    update_sparsity(rng_stream(0), f, grid_size=1)
    assert f.a_sparse == 1.7
    update_sparsity(rng_stream(0), f)
    assert f.a_sparse > 0


def _bw_chain(X, step, n_iter, seed=4):
    # a single stump tree: the bandwidth move sees a flat likelihood
    f = ForestState.init(X, m=1, mode="soft", bw_step=step, bw_prior_mean=0.1)
    rng = rng_stream(seed)
    y = np.zeros(X.shape[0])
    taus = np.empty(n_iter)
    for k in range(n_iter):
        update_bandwidths(rng, f, X, y, 1.0)
        taus[k] = f.tau[0]
    return taus


def test_bandwidth_prior_recovered_without_data(data):
    taus = _bw_chain(data[0], 1.0, 200_000)
    assert np.all(taus > 0)
    assert abs(taus[1000:].mean() - 0.1) < 0.005


def test_bandwidth_zero_step_constant(data):
    taus = _bw_chain(data[0], 0.0, 200)
    assert np.all(taus == taus[0])


def test_bandwidth_update_requires_soft(data):
    f = ForestState.init(data[0], m=2)
    with pytest.raises(ValueError):
        update_bandwidths(rng_stream(0), f, data[0], data[1], 1.0)


@pytest.mark.parametrize("mode", ["hard", "soft"])
def test_serialization_round_trip(tmp_path, data, mode):
    X, y = data
    rng = rng_stream(5)
    f = ForestState.init(X, m=8, mode=mode)
    for _ in range(20):
        backfit_sweep(rng, f, X, y, 0.2)
    path = tmp_path / "forest.json"
    f.save(path)
    g = ForestState.load(path, X)
    Xn = np.random.default_rng(1).random((30, 4))
    assert np.array_equal(f.predict(Xn), g.predict(Xn))
    assert g.mode == mode and g.sigma_mu == f.sigma_mu
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        ForestState.load(bad)


def test_trace_round_trip(tmp_path, data):
    X, y = data
    rng = rng_stream(6)
    f = ForestState.init(X, m=5)
    tr = ForestTrace("hard", X.shape[1])
    fits = []
    for _ in range(10):
        backfit_sweep(rng, f, X, y, 0.2)
        tr.append(f)
        fits.append(f.fitted.copy())
    np.testing.assert_allclose(tr.predict(X), np.array(fits), atol=1e-12)
    tr.save(tmp_path / "t.npz", metadata={"center": 1.5})
    back = ForestTrace.load(tmp_path / "t.npz")
    assert back.metadata["center"] == 1.5
    assert np.array_equal(back.predict(X), tr.predict(X))


def _prior_leaf_counts(X, ml, alpha, beta, size, seed):
    """Forward draws of the leaf count from the tree prior on fixed covariates."""
    rng = np.random.default_rng(seed)
    n, p = X.shape

    def grow(idx, d):
        options = []
        for v in range(p):
            x = X[idx, v]
            cuts = [c for c in np.unique(x)
                    if (x <= c).sum() >= ml and (x > c).sum() >= ml]
            if cuts:
                options.append((v, cuts))
        if not options or rng.random() >= alpha * (1 + d) ** (-beta):
            return 1
        v, cuts = options[rng.integers(len(options))]
        c = cuts[rng.integers(len(cuts))]
        return grow(idx[X[idx, v] <= c], d + 1) + grow(idx[X[idx, v] > c], d + 1)

    return np.array([grow(np.arange(n), 0) for _ in range(size)])


@pytest.mark.slow
def test_geweke_forest_reproduces_tree_prior():
    # successive-conditional simulation: several trees and covariates, one
    # of them discrete, with the data redrawn from the model every sweep
    rng0 = np.random.default_rng(0)
    X = rng0.random((40, 3))
    X[:, 2] = np.round(X[:, 2] * 4) / 4
    ml, alpha, beta = 3, 0.95, 1.0
    prior = _prior_leaf_counts(X, ml, alpha, beta, 20_000, seed=1)
    f = ForestState.init(X, m=4, alpha_tree=alpha, beta_tree=beta, min_leaf=ml, sigma_mu=0.7)
    rng, sim = rng_stream(2), np.random.default_rng(3)
    y = sim.normal(0, 1, 40)
    counts = []
    for it in range(60_000):
        backfit_sweep(rng, f, X, y, 0.5)
        y = f.fitted + 0.5 * sim.standard_normal(40)
        if it >= 1000:
            counts.append(f.n_leaves())
    counts = np.array(counts)
    assert abs(counts.mean() - prior.mean()) < 0.05
    for k in range(1, 6):
        assert abs(np.mean(counts == k) - np.mean(prior == k)) < 0.02

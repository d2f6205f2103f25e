"""Sum-of-trees state and the Bayesian backfitting sweep.

The m trees live in (m, capacity) node arrays so that one compiled kernel
can update the whole ensemble.  ``tree_fit[j]`` caches g_j(x_i) for the
training rows and ``fitted`` their sum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import gammaln

from . import tree as _t
from .stats_core import _dirichlet
from .tree import FREE, LEAF, Tree

FOREST_FORMAT = "tobart-forest"
FOREST_VERSION = 1
DEFAULT_MOVE_PROBS = (0.3, 0.3, 0.4)


@njit(cache=True)
def _bw_mh(rng, var, cut, left, right, bw, tau, X, R, w, slog, sigma_mu, leaves, phi, cur,
           bw_mean, step):
    tau_new = tau * math.exp(step * rng.standard_normal())
    log_prior = -(tau_new - tau) / bw_mean + math.log(tau_new) - math.log(tau)
    if leaves.shape[0] == 1:
        if math.log(rng.random()) < log_prior:
            return tau_new, phi, cur, True
        return tau, phi, cur, False
    bw2 = bw.copy()
    ratio = tau_new / tau
    for k in range(var.shape[0]):
        if var[k] >= 0:
            bw2[k] = bw[k] * ratio
    phi2 = _t._soft_phi(var, cut, left, right, bw2, X, leaves)
    new = _t._soft_logml(phi2, R, w, slog, sigma_mu)
    if math.log(rng.random()) < new - cur + log_prior:
        bw[:] = bw2
        return tau_new, phi2, new, True
    return tau, phi, cur, False


@njit(cache=True)
def _sweep(rng, X, target, sig, VAR, CUT, LEFT, RIGHT, PARENT, DEPTH, MU, BW, GROWF, TAU,
           tree_fit, fitted, xscale, s, sigma_mu, ml, alpha, beta, pk, soft, update_structure,
           update_bw, bw_mean, bw_step, stats):
    """One backfitting pass over all trees (in place).

    ``target`` is y* - gamma.  ``stats`` accumulates (proposed, accepted)
    counts per move kind in its first six entries and bandwidth
    (proposed, accepted) in the last two.
    """
    n = X.shape[0]
    m = VAR.shape[0]
    w = np.empty(n)
    logsig = np.empty(n)
    slog = 0.0
    for i in range(n):
        w[i] = 1.0 / (sig[i] * sig[i])
        logsig[i] = math.log(sig[i])
        slog += logsig[i]
    s_cum = np.cumsum(s)
    R = np.empty(n)
    leaf_of = np.empty(n, np.int64)
    idx = np.empty(n, np.int64)
    lidx = np.empty(n, np.int64)
    ridx = np.empty(n, np.int64)
    buf = np.empty(n)
    K = VAR.shape[1]
    cnt = np.zeros(K, np.int64)
    sw = np.zeros(K)
    swr = np.zeros(K)

    for j in range(m):
        var = VAR[j]
        cut = CUT[j]
        left = LEFT[j]
        right = RIGHT[j]
        for i in range(n):
            R[i] = target[i] - fitted[i] + tree_fit[j, i]
        _t._route_all(var, cut, left, right, X, leaf_of)
        leaves = _t._leaf_ids(var, left, right)
        phi = np.empty((0, 0))
        cur = 0.0
        if soft:
            phi = _t._soft_phi(var, cut, left, right, BW[j], X, leaves)
            cur = _t._soft_logml(phi, R, w, slog, sigma_mu)

        if update_structure:
            status, kind, node, v, c, gl, gr, lpr, lprior = _t._propose_edit(
                rng, -1, var, cut, left, right, DEPTH[j], GROWF[j], leaf_of, X, s, s_cum, ml,
                alpha, beta, pk, False, idx, lidx, ridx, buf)
            if status == 0:
                stats[2 * kind] += 1
                if not soft:
                    dl = _t._hard_delta_loglik(kind, node, v, c, var, cut, left, right, leaf_of,
                                               X, R, w, logsig, sigma_mu, idx, lidx, ridx)
                    if math.log(rng.random()) < lpr + lprior + dl:
                        if _t._apply_edit(kind, node, v, c, gl, gr, var, cut, left, right,
                                          PARENT[j], DEPTH[j], MU[j], BW[j], GROWF[j], TAU[j],
                                          xscale):
                            stats[2 * kind + 1] += 1
                            _t._route_all(var, cut, left, right, X, leaf_of)
                            leaves = _t._leaf_ids(var, left, right)
                else:
                    v2 = var.copy()
                    c2 = cut.copy()
                    l2 = left.copy()
                    r2 = right.copy()
                    p2 = PARENT[j].copy()
                    d2 = DEPTH[j].copy()
                    mu2 = MU[j].copy()
                    bw2 = BW[j].copy()
                    g2 = GROWF[j].copy()
                    if _t._apply_edit(kind, node, v, c, gl, gr, v2, c2, l2, r2, p2, d2, mu2, bw2,
                                      g2, TAU[j], xscale):
                        leaves2 = _t._leaf_ids(v2, l2, r2)
                        phi2 = _t._soft_phi(v2, c2, l2, r2, bw2, X, leaves2)
                        new = _t._soft_logml(phi2, R, w, slog, sigma_mu)
                        if math.log(rng.random()) < lpr + lprior + new - cur:
                            var[:] = v2
                            cut[:] = c2
                            left[:] = l2
                            right[:] = r2
                            PARENT[j][:] = p2
                            DEPTH[j][:] = d2
                            MU[j][:] = mu2
                            BW[j][:] = bw2
                            GROWF[j][:] = g2
                            leaves = leaves2
                            phi = phi2
                            cur = new
                            stats[2 * kind + 1] += 1
                            _t._route_all(var, cut, left, right, X, leaf_of)

        if soft:
            if update_bw:
                tau_new, phi, cur, acc = _bw_mh(rng, var, cut, left, right, BW[j], TAU[j], X, R,
                                                w, slog, sigma_mu, leaves, phi, cur, bw_mean,
                                                bw_step)
                TAU[j] = tau_new
                stats[6] += 1
                if acc:
                    stats[7] += 1
            mus = _t._soft_leaf_draw(rng, phi, R, w, sigma_mu)
            for a in range(leaves.shape[0]):
                MU[j, leaves[a]] = mus[a]
            for i in range(n):
                acc_fit = 0.0
                for a in range(leaves.shape[0]):
                    acc_fit += phi[i, a] * mus[a]
                fitted[i] += acc_fit - tree_fit[j, i]
                tree_fit[j, i] = acc_fit
        else:
            for a in range(leaves.shape[0]):
                node = leaves[a]
                cnt[node] = 0
                sw[node] = 0.0
                swr[node] = 0.0
            for i in range(n):
                node = leaf_of[i]
                cnt[node] += 1
                sw[node] += w[i]
                swr[node] += w[i] * R[i]
            s2 = sigma_mu * sigma_mu
            for a in range(leaves.shape[0]):
                node = leaves[a]
                if cnt[node] == 0:
                    raise ValueError("empty leaf in hard tree")
                pv = 1.0 / (1.0 / s2 + sw[node])
                MU[j, node] = pv * swr[node] + math.sqrt(pv) * rng.standard_normal()
            for i in range(n):
                g = MU[j, leaf_of[i]]
                fitted[i] += g - tree_fit[j, i]
                tree_fit[j, i] = g

    # drop accumulated rounding in the running sum
    for i in range(n):
        acc_fit = 0.0
        for j in range(m):
            acc_fit += tree_fit[j, i]
        fitted[i] = acc_fit


@njit(cache=True)
def _predict_forest(VAR, CUT, LEFT, RIGHT, MU, BW, X, soft, out_trees):
    n = X.shape[0]
    m = VAR.shape[0]
    out = np.zeros(n)
    for j in range(m):
        var = VAR[j]
        if soft:
            leaves = _t._leaf_ids(var, LEFT[j], RIGHT[j])
            phi = _t._soft_phi(var, CUT[j], LEFT[j], RIGHT[j], BW[j], X, leaves)
            for i in range(n):
                g = 0.0
                for a in range(leaves.shape[0]):
                    g += phi[i, a] * MU[j, leaves[a]]
                out[i] += g
                if out_trees.shape[0] > 0:
                    out_trees[j, i] = g
        else:
            for i in range(n):
                g = MU[j, _t._route(var, CUT[j], LEFT[j], RIGHT[j], X[i])]
                out[i] += g
                if out_trees.shape[0] > 0:
                    out_trees[j, i] = g
    return out


@njit(cache=True)
def _split_counts(VAR, p):
    counts = np.zeros(p, np.int64)
    for j in range(VAR.shape[0]):
        for k in range(VAR.shape[1]):
            if VAR[j, k] >= 0:
                counts[VAR[j, k]] += 1
    return counts


_ARRAYS = ("var", "cut", "left", "right", "parent", "depth", "mu", "bw", "growable")


@dataclass
class ForestState:
    """m trees, their hyperparameters and the cached training fit."""

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    mu: np.ndarray
    bw: np.ndarray
    growable: np.ndarray
    tau: np.ndarray
    tree_fit: np.ndarray
    fitted: np.ndarray
    xscale: np.ndarray
    split_probs: np.ndarray
    mode: str = "hard"
    sigma_mu: float = 0.5 / (2.0 * math.sqrt(200))
    alpha_tree: float = 0.95
    beta_tree: float = 2.0
    a_sparse: float = 1.0
    min_leaf: int = 5
    move_probs: tuple = DEFAULT_MOVE_PROBS
    bw_prior_mean: float = 0.1
    bw_step: float = 0.3
    sparse: bool = False
    move_stats: np.ndarray = field(default_factory=lambda: np.zeros(8, np.int64))

    @classmethod
    def init(cls, X, m=200, mode="hard", sigma_mu=None, kappa=2.0, alpha_tree=0.95,
             beta_tree=2.0, min_leaf=5, move_probs=DEFAULT_MOVE_PROBS, sparse=None,
             a_sparse=1.0, bw_prior_mean=0.1, bw_step=0.3, capacity=None):
        """All-stump forest for training covariates ``X``."""
        if m < 1:
            raise ValueError("a forest needs at least one tree")
        if mode not in ("hard", "soft"):
            raise ValueError("mode must be 'hard' or 'soft'")
        if not 0 < alpha_tree < 1 or beta_tree < 0:
            raise ValueError("need 0 < alpha_tree < 1 and beta_tree >= 0")
        X = np.ascontiguousarray(X, dtype=float)
        n, p = X.shape
        if sigma_mu is None:
            sigma_mu = 0.5 / (kappa * math.sqrt(m))
        if capacity is None:
            capacity = 2 * max(n // min_leaf, 1) + 1
        K = max(int(capacity), 3)
        xr = X.max(axis=0) - X.min(axis=0)
        xscale = np.where(xr > 0, xr, 1.0)
        root = Tree.stump(capacity=K)
        root.refresh_growable(X, min_leaf)

        def rep(a):
            return np.ascontiguousarray(np.repeat(a[None, :], m, axis=0))

        return cls(
            var=rep(root.var), cut=rep(root.cut), left=rep(root.left), right=rep(root.right),
            parent=rep(root.parent), depth=rep(root.depth), mu=rep(root.mu),
            bw=rep(root.bandwidth), growable=rep(root.growable),
            tau=np.full(m, float(bw_prior_mean)), tree_fit=np.zeros((m, n)), fitted=np.zeros(n),
            xscale=xscale, split_probs=np.full(p, 1.0 / p), mode=mode, sigma_mu=float(sigma_mu),
            alpha_tree=float(alpha_tree), beta_tree=float(beta_tree), a_sparse=float(a_sparse),
            min_leaf=int(min_leaf), move_probs=tuple(move_probs),
            bw_prior_mean=float(bw_prior_mean), bw_step=float(bw_step),
            sparse=(mode == "soft") if sparse is None else bool(sparse),
        )

    @property
    def m(self):
        return self.var.shape[0]

    @property
    def p(self):
        return self.split_probs.shape[0]

    @property
    def soft(self):
        return self.mode == "soft"

    def tree(self, j):
        """View of tree ``j``; edits write through to the forest."""
        return Tree(self.var[j], self.cut[j], self.left[j], self.right[j], self.parent[j],
                    self.depth[j], self.mu[j], self.bw[j], self.growable[j])

    def predict(self, X, per_tree=False):
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        trees = np.zeros((self.m, X.shape[0]) if per_tree else (0, 0))
        out = _predict_forest(self.var, self.cut, self.left, self.right, self.mu, self.bw, X,
                              self.soft, trees)
        return (out, trees) if per_tree else out

    def recompute_fit(self, X):
        """Rebuild the cached training fit from scratch."""
        self.fitted[:], self.tree_fit[:] = self.predict(X, per_tree=True)

    def split_counts(self):
        return _split_counts(self.var, self.p)

    def n_leaves(self):
        return np.array([(self.var[j] == LEAF).sum() for j in range(self.m)])

    def copy(self):
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        for k, v in kw.items():
            if isinstance(v, np.ndarray):
                kw[k] = v.copy()
        return ForestState(**kw)

    # ----------------------------------------------------------------- io
    def to_dict(self):
        """Self-describing dump of every tree and the ensemble hyperparameters."""
        trees = []
        for j in range(self.m):
            c = self.tree(j).compact()
            trees.append({k: v.tolist() for k, v in c.items()} | {"tau": float(self.tau[j])})
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "mode": self.mode,
            "m": self.m,
            "p": self.p,
            "capacity": int(self.var.shape[1]),
            "hyper": {
                "sigma_mu": self.sigma_mu, "alpha_tree": self.alpha_tree,
                "beta_tree": self.beta_tree, "a_sparse": self.a_sparse,
                "min_leaf": self.min_leaf, "move_probs": list(self.move_probs),
                "bw_prior_mean": self.bw_prior_mean, "bw_step": self.bw_step,
                "sparse": self.sparse,
            },
            "split_probs": self.split_probs.tolist(),
            "xscale": self.xscale.tolist(),
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, d, X=None):
        if d.get("format") != FOREST_FORMAT:
            raise ValueError("not a forest dump")
        if d.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported forest dump version {d.get('version')}")
        m, K = d["m"], d["capacity"]
        arrs = {a: [] for a in _ARRAYS}
        for td in d["trees"]:
            t = Tree.from_compact({k: np.asarray(v) for k, v in td.items() if k != "tau"},
                                  capacity=K)
            for a, f in zip(_ARRAYS, ("var", "cut", "left", "right", "parent", "depth", "mu",
                                      "bandwidth", "growable")):
                arrs[a].append(getattr(t, f))
        h = d["hyper"]
        forest = cls(
            **{a: np.ascontiguousarray(np.stack(v)) for a, v in arrs.items()},
            tau=np.array([td["tau"] for td in d["trees"]], dtype=float),
            tree_fit=np.zeros((m, 0)), fitted=np.zeros(0),
            xscale=np.asarray(d["xscale"], dtype=float),
            split_probs=np.asarray(d["split_probs"], dtype=float), mode=d["mode"],
            sigma_mu=h["sigma_mu"], alpha_tree=h["alpha_tree"], beta_tree=h["beta_tree"],
            a_sparse=h["a_sparse"], min_leaf=h["min_leaf"], move_probs=tuple(h["move_probs"]),
            bw_prior_mean=h["bw_prior_mean"], bw_step=h["bw_step"], sparse=h["sparse"],
        )
        if X is not None:
            forest.attach(X)
        return forest

    def attach(self, X):
        """Rebuild training caches (fit and growable flags) for data ``X``."""
        X = np.ascontiguousarray(X, dtype=float)
        n = X.shape[0]
        self.tree_fit = np.zeros((self.m, n))
        self.fitted = np.zeros(n)
        self.recompute_fit(X)
        for j in range(self.m):
            self.tree(j).refresh_growable(X, self.min_leaf)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path, X=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), X=X)


def backfit_sweep(rng, forest, X, ystar, sigma, gamma=0.0, update_structure=True,
                  update_bandwidth=None):
    """Update every tree against its partial residuals (in place; returns ``forest``).

    ``sigma`` and ``gamma`` are per-observation error scales and means
    (scalars broadcast); the partial residual for tree k is
    ``ystar - gamma - sum_{j != k} g_j(x)``.
    """
    X = np.ascontiguousarray(X, dtype=float)
    n = X.shape[0]
    ystar = np.asarray(ystar, dtype=float)
    if ystar.shape != (n,) or not np.all(np.isfinite(ystar)):
        raise ValueError("ystar must be a finite vector aligned with X")
    sig = np.ascontiguousarray(np.broadcast_to(np.asarray(sigma, dtype=float), (n,)))
    if np.any(sig <= 0):
        raise ValueError("error scales must be positive")
    target = ystar - np.broadcast_to(np.asarray(gamma, dtype=float), (n,))
    if forest.fitted.shape != (n,):
        forest.attach(X)
    if update_bandwidth is None:
        update_bandwidth = forest.soft
    _sweep(rng, X, np.ascontiguousarray(target), sig, forest.var, forest.cut, forest.left,
           forest.right, forest.parent, forest.depth, forest.mu, forest.bw, forest.growable,
           forest.tau, forest.tree_fit, forest.fitted, forest.xscale, forest.split_probs,
           forest.sigma_mu, forest.min_leaf, forest.alpha_tree, forest.beta_tree,
           np.asarray(forest.move_probs, dtype=float), forest.soft, bool(update_structure),
           bool(update_bandwidth and forest.soft), forest.bw_prior_mean, forest.bw_step,
           forest.move_stats)
    return forest


def update_split_probs(rng, forest, counts=None):
    """Conjugate Dirichlet draw of the splitting probabilities."""
    counts = forest.split_counts() if counts is None else np.asarray(counts)
    p = forest.p
    forest.split_probs = _dirichlet(rng, forest.a_sparse / p + counts.astype(float))
    return forest


def sparsity_grid(p, grid_size=100):
    """Grid of a values and log prior weights: Beta(0.5, 1) on a / (a + p)."""
    u = (np.arange(grid_size) + 0.5) / grid_size
    return p * u / (1.0 - u), -0.5 * np.log(u)


def sparsity_posterior(split_probs, grid_size=100):
    """Grid values of a and their normalized posterior weights given s."""
    s = np.asarray(split_probs, dtype=float)
    p = s.size
    a, logw = sparsity_grid(p, grid_size)
    sum_log_s = np.log(s).sum()
    loglik = gammaln(a) - p * gammaln(a / p) + (a / p - 1.0) * sum_log_s
    lw = logw + loglik
    lw -= lw.max()
    wts = np.exp(lw)
    return a, wts / wts.sum()


def update_sparsity(rng, forest, counts=None, grid_size=100):
    """Gibbs draw of the Dirichlet concentration a on a discretized grid.

    ``counts`` is accepted for symmetry with :func:`update_split_probs`;
    the full conditional of a depends on the data only through the current
    splitting probabilities.
    """
    if grid_size <= 1:
        return forest
    a, wts = sparsity_posterior(forest.split_probs, grid_size)
    forest.a_sparse = float(a[rng.choice(grid_size, p=wts)])
    return forest


def update_bandwidths(rng, forest, X, ystar, sigma, gamma=0.0):
    """Random-walk Metropolis on each tree's log bandwidth, leaf values redrawn."""
    if not forest.soft:
        raise ValueError("bandwidths exist only for soft trees")
    return backfit_sweep(rng, forest, X, ystar, sigma, gamma, update_structure=False,
                         update_bandwidth=True)


_TRACE_FIELDS = ("var", "cut", "left", "right", "mu", "bw")


class ForestTrace:
    """Retained forests from a chain, kept for prediction at new covariates.

    Each snapshot stores the node arrays trimmed to the highest used slot.
    The whole trace saves to a single ``.npz`` with padding and metadata.
    """

    def __init__(self, mode, p, snapshots=None):
        self.mode = mode
        self.p = int(p)
        self.snapshots = [] if snapshots is None else list(snapshots)

    def __len__(self):
        return len(self.snapshots)

    def append(self, forest):
        used = np.flatnonzero((forest.var != FREE).any(axis=0))
        K = int(used.max()) + 1 if used.size else 1
        self.snapshots.append(tuple(np.ascontiguousarray(getattr(forest, f)[:, :K]).copy()
                                    for f in _TRACE_FIELDS))

    def predict(self, X):
        """(draws, rows) matrix of f(x) on the modelling scale of the forests."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        if X.shape[1] != self.p:
            raise ValueError(f"expected {self.p} covariates, got {X.shape[1]}")
        out = np.empty((len(self), X.shape[0]))
        empty = np.zeros((0, 0))
        for d, (var, cut, left, right, mu, bw) in enumerate(self.snapshots):
            out[d] = _predict_forest(var, cut, left, right, mu, bw, X, self.mode == "soft",
                                     empty)
        return out

    def save(self, path, metadata=None):
        D = len(self)
        if D == 0:
            raise ValueError("empty trace")
        m = self.snapshots[0][0].shape[0]
        K = max(s[0].shape[1] for s in self.snapshots)
        arrays = {}
        for f_idx, f in enumerate(_TRACE_FIELDS):
            fill = FREE if f == "var" else (-1 if f in ("left", "right") else 0.0)
            dtype = self.snapshots[0][f_idx].dtype
            a = np.full((D, m, K), fill, dtype=dtype)
            for d, s in enumerate(self.snapshots):
                a[d, :, :s[f_idx].shape[1]] = s[f_idx]
            arrays[f] = a
        meta = {"format": "tobart-forest-trace", "version": FOREST_VERSION, "mode": self.mode,
                "p": self.p, **(metadata or {})}
        np.savez_compressed(path, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != "tobart-forest-trace":
                raise ValueError("not a forest trace file")
            if meta.get("version") != FOREST_VERSION:
                raise ValueError(f"unsupported trace version {meta.get('version')}")
            arrays = [z[f] for f in _TRACE_FIELDS]
        snaps = [tuple(np.ascontiguousarray(a[d]) for a in arrays)
                 for d in range(arrays[0].shape[0])]
        trace = cls(meta["mode"], meta["p"], snaps)
        trace.metadata = meta
        return trace

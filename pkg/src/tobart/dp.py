"""Dirichlet-process mixture of normals for the error term.

Each observation carries (gamma_i, sigma_i) drawn from G ~ DP(G0, alpha)
with base measure

    sigma^2 ~ nu * lambda / chi2_nu,    gamma | sigma ~ N(gamma0, sigma^2 / k0).

Clusters are held in arrays of capacity n + 1; only the first ``k`` slots
are live.  Assignments are updated one observation at a time with the
Polya-urn conditionals, followed by a conjugate redraw of every cluster's
parameters and an auxiliary-variable draw of alpha under a Gamma(c1, c2)
prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .stats_core import LOG_SQRT_2PI, _inv_gamma, _t_logpdf


@dataclass(frozen=True)
class BaseMeasure:
    """Normal / scaled-inverse-chi-square base measure G0."""

    nu: float = 10.0
    lam: float = 1.0
    gamma0: float = 0.0
    k0: float = 1.0
    k_s: float = 10.0

    def __post_init__(self):
        if self.nu <= 0 or self.lam <= 0 or self.k0 <= 0 or self.k_s <= 0:
            raise ValueError("nu, lambda, k0 and k_s must be positive")

    def scaled(self, factor):
        """Same measure for an outcome multiplied by ``factor``."""
        return BaseMeasure(self.nu, self.lam * factor * factor, self.gamma0 * factor, self.k0,
                           self.k_s)

    def draw(self, rng, size=None):
        """(gamma, sigma) from G0."""
        s2 = (self.nu * self.lam / 2.0) / rng.gamma(self.nu / 2.0, 1.0, size)
        g = self.gamma0 + np.sqrt(s2 / self.k0) * rng.standard_normal(size)
        return g, np.sqrt(s2)


@dataclass
class DpState:
    """Cluster assignments and parameters; slots ``[:k]`` are live."""

    assign: np.ndarray
    gamma_c: np.ndarray
    sigma_c: np.ndarray
    size_c: np.ndarray
    k: int
    alpha: float
    base: BaseMeasure
    c1: float = 2.0
    c2: float = 2.0

    @classmethod
    def single_cluster(cls, n, sigma, base, alpha=1.0, gamma=0.0, c1=2.0, c2=2.0):
        st = cls(assign=np.zeros(n, np.int64), gamma_c=np.zeros(n + 1),
                 sigma_c=np.ones(n + 1), size_c=np.zeros(n + 1, np.int64), k=1,
                 alpha=float(alpha), base=base, c1=c1, c2=c2)
        st.gamma_c[0] = gamma
        st.sigma_c[0] = sigma
        st.size_c[0] = n
        return st

    @property
    def n(self):
        return self.assign.shape[0]

    @property
    def gammas(self):
        return self.gamma_c[:self.k]

    @property
    def sigmas(self):
        return self.sigma_c[:self.k]

    @property
    def sizes(self):
        return self.size_c[:self.k]

    def member_params(self):
        """Per-observation (gamma_i, sigma_i)."""
        return self.gamma_c[self.assign], self.sigma_c[self.assign]

    def largest_share(self):
        return float(self.sizes.max() / self.n) if self.n else 0.0

    def check(self):
        """Raise AssertionError if the bookkeeping is inconsistent."""
        assert self.k >= (1 if self.n else 0)
        assert np.all(self.sizes > 0), "empty cluster present"
        assert self.sizes.sum() == self.n
        assert np.all((self.assign >= 0) & (self.assign < self.k))
        assert np.array_equal(np.bincount(self.assign, minlength=self.k), self.sizes)
        assert np.all(self.sigmas > 0)

    def copy(self):
        return DpState(self.assign.copy(), self.gamma_c.copy(), self.sigma_c.copy(),
                       self.size_c.copy(), self.k, self.alpha, self.base, self.c1, self.c2)

    def snapshot(self):
        """Compact record of the live clusters."""
        return {"gamma": self.gammas.copy(), "sigma": self.sigmas.copy(),
                "size": self.sizes.copy(), "alpha": self.alpha}


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _remove(i, assign, cg, cs, cn, k):
    r = assign[i]
    cn[r] -= 1
    assign[i] = -1
    if cn[r] == 0:
        last = k - 1
        if r != last:
            cg[r] = cg[last]
            cs[r] = cs[last]
            cn[r] = cn[last]
            for h in range(assign.shape[0]):
                if assign[h] == last:
                    assign[h] = r
        cn[last] = 0
        k -= 1
    return k


@njit(cache=True)
def _log_weights(ui, cg, cs, cn, k, alpha, nu, lam, g0, k0, out):
    if alpha > 0.0:
        out[0] = math.log(alpha) + _t_logpdf(ui, nu, g0, lam * (1.0 + 1.0 / k0))
    else:
        out[0] = -np.inf
    for r in range(k):
        z = (ui - cg[r]) / cs[r]
        out[r + 1] = math.log(cn[r]) - LOG_SQRT_2PI - math.log(cs[r]) - 0.5 * z * z
    mx = -np.inf
    for r in range(k + 1):
        if out[r] > mx:
            mx = out[r]
    if mx == -np.inf:
        # nothing to join and no mass on new clusters: open one anyway
        out[0] = 1.0
        for r in range(k):
            out[r + 1] = 0.0
        return
    tot = 0.0
    for r in range(k + 1):
        out[r] = math.exp(out[r] - mx)
        tot += out[r]
    for r in range(k + 1):
        out[r] /= tot


@njit(cache=True)
def _assign_one(rng, i, ui, assign, cg, cs, cn, k, alpha, nu, lam, g0, k0, wbuf):
    """Reassign observation i (already removed); returns the new cluster count."""
    _log_weights(ui, cg, cs, cn, k, alpha, nu, lam, g0, k0, wbuf)
    u = rng.random()
    choice = k
    acc = 0.0
    for r in range(k + 1):
        acc += wbuf[r]
        if u < acc:
            choice = r
            break
    if choice == 0:
        d = ui - g0
        s2 = _inv_gamma(rng, 0.5 * (nu + 1.0),
                        0.5 * nu * lam + d * d / (2.0 * (1.0 + 1.0 / k0)))
        g = (ui + k0 * g0) / (k0 + 1.0) + math.sqrt(s2 / (k0 + 1.0)) * rng.standard_normal()
        cg[k] = g
        cs[k] = math.sqrt(s2)
        cn[k] = 1
        assign[i] = k
        return k + 1
    # fall-through when rounding leaves u above the cumulative sum
    r = min(choice, k) - 1
    assign[i] = r
    cn[r] += 1
    return k


@njit(cache=True)
def _assign_sweep(rng, u, assign, cg, cs, cn, k, alpha, nu, lam, g0, k0):
    wbuf = np.empty(u.shape[0] + 2)
    for i in range(u.shape[0]):
        k = _remove(i, assign, cg, cs, cn, k)
        k = _assign_one(rng, i, u[i], assign, cg, cs, cn, k, alpha, nu, lam, g0, k0, wbuf)
    return k


@njit(cache=True)
def _remix(rng, u, assign, cg, cs, cn, k, nu, lam, g0, k0):
    sm = np.zeros(k)
    for i in range(u.shape[0]):
        sm[assign[i]] += u[i]
    ss = np.zeros(k)
    for i in range(u.shape[0]):
        r = assign[i]
        d = u[i] - sm[r] / cn[r]
        ss[r] += d * d
    for r in range(k):
        nj = cn[r]
        ubar = sm[r] / nj
        d = ubar - g0
        s2 = _inv_gamma(rng, 0.5 * (nu + nj),
                        0.5 * nu * lam + 0.5 * ss[r] + (nj * k0 / (k0 + nj)) * d * d / 2.0)
        cs[r] = math.sqrt(s2)
        cg[r] = ((nj * ubar + k0 * g0) / (k0 + nj)
                 + math.sqrt(s2 / (k0 + nj)) * rng.standard_normal())


# --------------------------------------------------------------------------
# Python-facing operations


def assignment_probs(u_i, state):
    """Normalized (new-cluster, cluster 0, ..., cluster k-1) probabilities.

    ``state`` must already exclude the observation being reassigned.
    """
    b = state.base
    out = np.empty(state.k + 1)
    _log_weights(float(u_i), state.gamma_c, state.sigma_c, state.size_c, state.k,
                 float(state.alpha), b.nu, b.lam, b.gamma0, b.k0, out)
    return out


def remove_observation(i, state):
    """Take observation i out of its cluster, deleting the cluster if it empties."""
    state.k = int(_remove(int(i), state.assign, state.gamma_c, state.sigma_c, state.size_c,
                          state.k))
    return state


def assign_observation(rng, i, u_i, state):
    """Polya-urn draw of observation i's cluster (i must be unassigned)."""
    if state.assign[i] >= 0:
        remove_observation(i, state)
    b = state.base
    wbuf = np.empty(state.k + 2)
    state.k = int(_assign_one(rng, int(i), float(u_i), state.assign, state.gamma_c,
                              state.sigma_c, state.size_c, state.k, float(state.alpha), b.nu,
                              b.lam, b.gamma0, b.k0, wbuf))
    return state


def assign_all(rng, u, state):
    """Sequential reassignment of every observation."""
    b = state.base
    u = np.ascontiguousarray(u, dtype=float)
    if u.shape != state.assign.shape:
        raise ValueError("residual vector does not match the state")
    state.k = int(_assign_sweep(rng, u, state.assign, state.gamma_c, state.sigma_c,
                                state.size_c, state.k, float(state.alpha), b.nu, b.lam,
                                b.gamma0, b.k0))
    return state


def remix_clusters(rng, state, u):
    """Conjugate redraw of each cluster's (gamma, sigma) given its members."""
    b = state.base
    _remix(rng, np.ascontiguousarray(u, dtype=float), state.assign, state.gamma_c,
           state.sigma_c, state.size_c, state.k, b.nu, b.lam, b.gamma0, b.k0)
    return state


def alpha_mixture_weight(k, n, kappa, c1=2.0, c2=2.0):
    """Weight p_kappa of the Gamma(c1 + k, .) component in the alpha update."""
    odds = (c1 + k - 1.0) / (n * (c2 - math.log(kappa)))
    return odds / (1.0 + odds)


def draw_alpha(rng, state):
    """Auxiliary-variable update of the concentration under a Gamma(c1, c2) prior."""
    n, k = state.n, state.k
    c1, c2 = state.c1, state.c2
    kappa = rng.beta(state.alpha + 1.0, n)
    kappa = max(kappa, 1e-300)
    p = alpha_mixture_weight(k, n, kappa, c1, c2)
    rate = c2 - math.log(kappa)
    shape = c1 + k if rng.random() < p else c1 + k - 1.0
    state.alpha = float(rng.gamma(shape, 1.0 / rate))
    return state


def draw_oos_error(rng, state, size=None):
    """(gamma, sigma) for a new observation from the Polya-urn predictive.

    A fresh G0 draw with probability alpha / (alpha + n), otherwise the
    parameters of a uniformly chosen training observation.
    """
    n = state.n
    alpha = state.alpha
    m = 1 if size is None else int(np.prod(size))
    g_new, s_new = state.base.draw(rng, m)
    if n == 0:
        g, s = g_new, s_new
    else:
        fresh = rng.random(m) < alpha / (alpha + n)
        pick = state.assign[rng.integers(0, n, m)]
        g = np.where(fresh, g_new, state.gamma_c[pick])
        s = np.where(fresh, s_new, state.sigma_c[pick])
    if size is None:
        return float(g[0]), float(s[0])
    return g.reshape(size), s.reshape(size)


def dp_step(rng, state, u, update_alpha=True):
    """Assignments, remix and alpha for one Gibbs iteration."""
    assign_all(rng, u, state)
    remix_clusters(rng, state, u)
    if update_alpha:
        draw_alpha(rng, state)
    return state

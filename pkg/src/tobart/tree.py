"""Single regression trees: prediction, priors, marginal likelihoods and proposals.

A tree is stored as fixed-capacity node arrays so the numba kernels can edit
it in place.  Slot 0 is the root; ``var`` is the split variable of an
internal node, ``LEAF`` (-1) for a terminal node and ``FREE`` (-2) for an
unused slot.  Hard routing sends ``x[var] <= cut`` left.  Soft routing sends
an observation right with weight ``logistic((x[var] - cut) / bandwidth)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

LEAF = -1
FREE = -2
GROW, PRUNE, CHANGE = 0, 1, 2
MOVE_NAMES = {"GROW": GROW, "PRUNE": PRUNE, "CHANGE": CHANGE}
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class MoveUnavailable(Exception):
    """No legal proposal of the requested kind exists for this tree."""


def split_prior_prob(depth, alpha_tree=0.95, beta_tree=2.0):
    """Prior probability that a node at ``depth`` splits."""
    if not 0.0 < alpha_tree < 1.0 or beta_tree < 0:
        raise ValueError("need 0 < alpha_tree < 1 and beta_tree >= 0")
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    return alpha_tree * (1.0 + depth) ** (-beta_tree)


# --------------------------------------------------------------------------
# structural kernels


@njit(cache=True)
def _route(var, cut, left, right, x):
    node = 0
    while var[node] >= 0:
        if x[var[node]] <= cut[node]:
            node = left[node]
        else:
            node = right[node]
    return node


@njit(cache=True)
def _route_all(var, cut, left, right, X, out):
    for i in range(X.shape[0]):
        out[i] = _route(var, cut, left, right, X[i])


@njit(cache=True)
def _leaf_ids(var, left, right):
    K = var.shape[0]
    out = np.empty(K, np.int64)
    stack = np.empty(K, np.int64)
    stack[0] = 0
    top = 1
    nl = 0
    while top > 0:
        top -= 1
        node = stack[top]
        if var[node] < 0:
            out[nl] = node
            nl += 1
        else:
            stack[top] = right[node]
            stack[top + 1] = left[node]
            top += 2
    return out[:nl]


@njit(cache=True)
def _logistic(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _soft_phi(var, cut, left, right, bw, X, leaves):
    """Leaf-weight matrix (n, L) with columns ordered as ``leaves``."""
    n = X.shape[0]
    K = var.shape[0]
    L = leaves.shape[0]
    col = np.full(K, -1, np.int64)
    for k in range(L):
        col[leaves[k]] = k
    phi = np.zeros((n, L))
    if L == 1:
        phi[:, 0] = 1.0
        return phi
    stack = np.empty(K, np.int64)
    wstack = np.empty(K)
    for i in range(n):
        stack[0] = 0
        wstack[0] = 1.0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            w = wstack[top]
            v = var[node]
            if v < 0:
                phi[i, col[node]] = w
            else:
                z = (X[i, v] - cut[node]) / bw[node]
                stack[top] = right[node]
                wstack[top] = w * _logistic(z)
                stack[top + 1] = left[node]
                # not 1 - logistic(z), which rounds to 0 for z beyond ~37
                wstack[top + 1] = w * _logistic(-z)
                top += 2
    return phi


@njit(cache=True)
def _count_structure(var, left, right, grow):
    """(growable leaves, internal nodes, internal nodes without grandchildren)."""
    ng = 0
    nint = 0
    nnog = 0
    for k in range(var.shape[0]):
        v = var[k]
        if v == LEAF:
            if grow[k]:
                ng += 1
        elif v >= 0:
            nint += 1
            if var[left[k]] == LEAF and var[right[k]] == LEAF:
                nnog += 1
    return ng, nint, nnog


@njit(cache=True)
def _kth_node(var, left, right, grow, want_nog, k):
    # k-th growable leaf (want_nog False) or k-th nog node (want_nog True)
    c = 0
    for node in range(var.shape[0]):
        v = var[node]
        if want_nog:
            if v >= 0 and var[left[node]] == LEAF and var[right[node]] == LEAF:
                if c == k:
                    return node
                c += 1
        elif v == LEAF and grow[node]:
            if c == k:
                return node
            c += 1
    return -1


@njit(cache=True)
def _members(leaf_of, a, b, idx):
    cnt = 0
    for i in range(leaf_of.shape[0]):
        if leaf_of[i] == a or leaf_of[i] == b:
            idx[cnt] = i
            cnt += 1
    return cnt


@njit(cache=True)
def _sorted_values(X, idx, cnt, v, buf):
    for t in range(cnt):
        buf[t] = X[idx[t], v]
    vals = np.sort(buf[:cnt])
    return vals


@njit(cache=True)
def _var_available(X, idx, cnt, v, ml, buf):
    if cnt < 2 * ml:
        return False
    vals = _sorted_values(X, idx, cnt, v, buf)
    return vals[ml - 1] < vals[cnt - ml]


@njit(cache=True)
def _growable(X, idx, cnt, ml, buf):
    if cnt < 2 * ml:
        return False
    for v in range(X.shape[1]):
        if _var_available(X, idx, cnt, v, ml, buf):
            return True
    return False


@njit(cache=True)
def _cut_choice(rng, X, idx, cnt, v, ml, buf, draw):
    """Number of valid cuts for ``v`` and (if ``draw``) a uniform choice.

    Valid cuts are the distinct observed values c with at least ``ml``
    observations on each side of the rule x <= c.
    """
    vals = _sorted_values(X, idx, cnt, v, buf)
    lo = vals[ml - 1]
    hi = vals[cnt - ml]
    ncut = 0
    prev = -np.inf
    for t in range(ml - 1, cnt):
        x = vals[t]
        if x >= hi:
            break
        if x != prev:
            ncut += 1
            prev = x
    if not draw or ncut == 0:
        return ncut, lo
    pick = int(rng.random() * ncut)
    if pick >= ncut:
        pick = ncut - 1
    k = -1
    prev = -np.inf
    for t in range(ml - 1, cnt):
        x = vals[t]
        if x != prev:
            k += 1
            prev = x
            if k == pick:
                return ncut, x
    return ncut, lo


@njit(cache=True)
def _avail_mass(s, X, idx, cnt, ml, buf):
    tot = 0.0
    for v in range(X.shape[1]):
        if _var_available(X, idx, cnt, v, ml, buf):
            tot += s[v]
    return tot


@njit(cache=True)
def _draw_var(rng, s, s_cum, X, idx, cnt, ml, buf):
    """Variable drawn from ``s`` restricted to those with a valid cut."""
    p = s.shape[0]
    total = s_cum[p - 1]
    for _ in range(64):
        u = rng.random() * total
        v = np.searchsorted(s_cum, u, side="right")
        if v >= p:
            v = p - 1
        if _var_available(X, idx, cnt, v, ml, buf):
            return v
    # exact fallback: renormalize over available variables
    w = np.zeros(p)
    for v in range(p):
        if _var_available(X, idx, cnt, v, ml, buf):
            w[v] = s[v]
    cw = np.cumsum(w)
    u = rng.random() * cw[p - 1]
    v = np.searchsorted(cw, u, side="right")
    return min(v, p - 1)


@njit(cache=True)
def _partition(X, idx, cnt, v, c, lidx, ridx):
    nl = 0
    nr = 0
    for t in range(cnt):
        i = idx[t]
        if X[i, v] <= c:
            lidx[nl] = i
            nl += 1
        else:
            ridx[nr] = i
            nr += 1
    return nl, nr


@njit(cache=True)
def _kind_total(can_grow, has_int, pk):
    tot = 0.0
    if can_grow:
        tot += pk[GROW]
    if has_int:
        tot += pk[PRUNE] + pk[CHANGE]
    return tot


@njit(cache=True)
def _log1m_split(g, d, alpha, beta):
    # log(1 - P(split)) for a node that may not be splittable
    if not g:
        return 0.0
    return math.log1p(-alpha * (1.0 + d) ** (-beta))


@njit(cache=True)
def _propose_edit(rng, kind, var, cut, left, right, depth, grow, leaf_of, X, s, s_cum,
                  ml, alpha, beta, pk, exact_rule, idx, lidx, ridx, buf):
    """Draw one tree edit.

    Returns (status, kind, node, new_var, new_cut, g_left, g_right,
    log_proposal_ratio, log_prior_ratio).  ``status`` is 0 on success and 1
    when no legal move of the kind exists.  ``kind`` < 0 draws the kind from
    ``pk`` restricted to the kinds available for this tree.  The rule
    probabilities (variable and cut choice) are identical in the proposal
    and the prior, so they are only included when ``exact_rule`` is set.
    """
    ng, nint, nnog = _count_structure(var, left, right, grow)
    can_grow = ng > 0
    has_int = nint > 0
    tot = _kind_total(can_grow, has_int, pk)
    if kind < 0:
        if tot <= 0.0:
            return 1, kind, -1, -1, 0.0, False, False, 0.0, 0.0
        u = rng.random() * tot
        if can_grow and u < pk[GROW]:
            kind = GROW
        else:
            if can_grow:
                u -= pk[GROW]
            kind = PRUNE if u < pk[PRUNE] else CHANGE
    if kind == GROW and not can_grow:
        return 1, kind, -1, -1, 0.0, False, False, 0.0, 0.0
    if kind != GROW and not has_int:
        return 1, kind, -1, -1, 0.0, False, False, 0.0, 0.0

    if kind == GROW:
        k = min(int(rng.random() * ng), ng - 1)
        node = _kth_node(var, left, right, grow, False, k)
        cnt = _members(leaf_of, node, node, idx)
        v = _draw_var(rng, s, s_cum, X, idx, cnt, ml, buf)
        ncut, c = _cut_choice(rng, X, idx, cnt, v, ml, buf, True)
        nl, nr = _partition(X, idx, cnt, v, c, lidx, ridx)
        gl = _growable(X, lidx, nl, ml, buf)
        gr = _growable(X, ridx, nr, ml, buf)
        d = depth[node]
        psplit = alpha * (1.0 + d) ** (-beta)
        ng2 = ng - 1 + int(gl) + int(gr)
        sib_leaf = False
        if node != 0:
            # parent of a leaf is internal; sibling is the other child
            for q in range(var.shape[0]):
                if var[q] >= 0 and (left[q] == node or right[q] == node):
                    sib = right[q] if left[q] == node else left[q]
                    sib_leaf = var[sib] == LEAF
                    break
        nnog2 = nnog + 1 - int(sib_leaf)
        log_fwd = math.log(pk[GROW] / tot) - math.log(ng)
        log_rev = math.log(pk[PRUNE] / _kind_total(ng2 > 0, True, pk)) - math.log(nnog2)
        log_prior = (math.log(psplit) + _log1m_split(gl, d + 1, alpha, beta)
                     + _log1m_split(gr, d + 1, alpha, beta) - math.log1p(-psplit))
        if exact_rule:
            lr = math.log(s[v] / _avail_mass(s, X, idx, cnt, ml, buf)) - math.log(ncut)
            log_fwd += lr
            log_prior += lr
        return 0, kind, node, v, c, gl, gr, log_rev - log_fwd, log_prior

    k = min(int(rng.random() * nnog), nnog - 1)
    node = _kth_node(var, left, right, grow, True, k)
    lc = left[node]
    rc = right[node]
    d = depth[node]
    gl_old = grow[lc] != 0
    gr_old = grow[rc] != 0
    cnt = _members(leaf_of, lc, rc, idx)

    if kind == PRUNE:
        psplit = alpha * (1.0 + d) ** (-beta)
        ng2 = ng - int(gl_old) - int(gr_old) + 1
        sib_leaf = False
        if node != 0:
            for q in range(var.shape[0]):
                if var[q] >= 0 and (left[q] == node or right[q] == node):
                    sib = right[q] if left[q] == node else left[q]
                    sib_leaf = var[sib] == LEAF
                    break
        nnog2 = nnog - 1 + int(sib_leaf)
        log_fwd = math.log(pk[PRUNE] / tot) - math.log(nnog)
        log_rev = math.log(pk[GROW] / _kind_total(True, nint - 1 > 0, pk)) - math.log(ng2)
        log_prior = (math.log1p(-psplit) - math.log(psplit)
                     - _log1m_split(gl_old, d + 1, alpha, beta)
                     - _log1m_split(gr_old, d + 1, alpha, beta))
        if exact_rule:
            ncut, _c = _cut_choice(rng, X, idx, cnt, var[node], ml, buf, False)
            lr = math.log(s[var[node]] / _avail_mass(s, X, idx, cnt, ml, buf)) - math.log(ncut)
            log_rev += lr
            log_prior -= lr
        return 0, kind, node, -1, 0.0, gl_old, gr_old, log_rev - log_fwd, log_prior

    # CHANGE
    v = _draw_var(rng, s, s_cum, X, idx, cnt, ml, buf)
    ncut, c = _cut_choice(rng, X, idx, cnt, v, ml, buf, True)
    nl, nr = _partition(X, idx, cnt, v, c, lidx, ridx)
    gl = _growable(X, lidx, nl, ml, buf)
    gr = _growable(X, ridx, nr, ml, buf)
    ng2 = ng - int(gl_old) - int(gr_old) + int(gl) + int(gr)
    log_fwd = math.log(pk[CHANGE] / tot)
    log_rev = math.log(pk[CHANGE] / _kind_total(ng2 > 0, True, pk))
    log_prior = (_log1m_split(gl, d + 1, alpha, beta) + _log1m_split(gr, d + 1, alpha, beta)
                 - _log1m_split(gl_old, d + 1, alpha, beta)
                 - _log1m_split(gr_old, d + 1, alpha, beta))
    if exact_rule:
        mass = _avail_mass(s, X, idx, cnt, ml, buf)
        ncut_old, _c = _cut_choice(rng, X, idx, cnt, var[node], ml, buf, False)
        lr_new = math.log(s[v] / mass) - math.log(ncut)
        lr_old = math.log(s[var[node]] / mass) - math.log(ncut_old)
        log_fwd += lr_new
        log_rev += lr_old
        log_prior += lr_new - lr_old
    return 0, kind, node, v, c, gl, gr, log_rev - log_fwd, log_prior


@njit(cache=True)
def _free_slot(var, start):
    for k in range(start, var.shape[0]):
        if var[k] == FREE:
            return k
    return -1


@njit(cache=True)
def _apply_edit(kind, node, v, c, gl, gr, var, cut, left, right, parent, depth, mu, bw,
                grow, tau, xscale):
    """Apply an edit from ``_propose_edit`` in place; False if out of capacity."""
    if kind == GROW:
        a = _free_slot(var, 1)
        if a < 0:
            return False
        var[a] = LEAF
        b = _free_slot(var, a + 1)
        if b < 0:
            var[a] = FREE
            return False
        var[node] = v
        cut[node] = c
        bw[node] = tau * xscale[v]
        left[node] = a
        right[node] = b
        for ch, g in ((a, gl), (b, gr)):
            var[ch] = LEAF
            cut[ch] = 0.0
            left[ch] = -1
            right[ch] = -1
            parent[ch] = node
            depth[ch] = depth[node] + 1
            mu[ch] = mu[node]
            bw[ch] = 0.0
            grow[ch] = 1 if g else 0
        grow[node] = 0
        return True
    if kind == PRUNE:
        a = left[node]
        b = right[node]
        mu[node] = 0.5 * (mu[a] + mu[b])
        for ch in (a, b):
            var[ch] = FREE
            left[ch] = -1
            right[ch] = -1
            parent[ch] = -1
            grow[ch] = 0
        var[node] = LEAF
        cut[node] = 0.0
        bw[node] = 0.0
        left[node] = -1
        right[node] = -1
        grow[node] = 1
        return True
    var[node] = v
    cut[node] = c
    bw[node] = tau * xscale[v]
    grow[left[node]] = 1 if gl else 0
    grow[right[node]] = 1 if gr else 0
    return True


# --------------------------------------------------------------------------
# likelihood kernels


@njit(cache=True)
def _leaf_logml(cnt, sw, swr, swr2, slogsig, sigma_mu):
    s2 = sigma_mu * sigma_mu
    return (-cnt * LOG_SQRT_2PI - slogsig - 0.5 * math.log1p(s2 * sw) - 0.5 * swr2
            + swr * swr / (2.0 * (1.0 / s2 + sw)))


@njit(cache=True)
def _stats(idx, cnt, R, w, logsig):
    sw = 0.0
    swr = 0.0
    swr2 = 0.0
    sls = 0.0
    for t in range(cnt):
        i = idx[t]
        sw += w[i]
        swr += w[i] * R[i]
        swr2 += w[i] * R[i] * R[i]
        sls += logsig[i]
    return sw, swr, swr2, sls


@njit(cache=True)
def _node_logml(idx, cnt, R, w, logsig, sigma_mu):
    sw, swr, swr2, sls = _stats(idx, cnt, R, w, logsig)
    return _leaf_logml(cnt, sw, swr, swr2, sls, sigma_mu)


@njit(cache=True)
def _hard_delta_loglik(kind, node, v, c, var, cut, left, right, leaf_of, X, R, w, logsig,
                       sigma_mu, idx, lidx, ridx):
    """Log marginal-likelihood change for a not-yet-applied edit of a hard tree."""
    if kind == GROW:
        cnt = _members(leaf_of, node, node, idx)
        nl, nr = _partition(X, idx, cnt, v, c, lidx, ridx)
        return (_node_logml(lidx, nl, R, w, logsig, sigma_mu)
                + _node_logml(ridx, nr, R, w, logsig, sigma_mu)
                - _node_logml(idx, cnt, R, w, logsig, sigma_mu))
    cnt = _members(leaf_of, left[node], right[node], idx)
    nl, nr = _partition(X, idx, cnt, var[node], cut[node], lidx, ridx)
    old = (_node_logml(lidx, nl, R, w, logsig, sigma_mu)
           + _node_logml(ridx, nr, R, w, logsig, sigma_mu))
    if kind == PRUNE:
        return _node_logml(idx, cnt, R, w, logsig, sigma_mu) - old
    nl, nr = _partition(X, idx, cnt, v, c, lidx, ridx)
    return (_node_logml(lidx, nl, R, w, logsig, sigma_mu)
            + _node_logml(ridx, nr, R, w, logsig, sigma_mu) - old)


@njit(cache=True)
def _solve_lower(Lm, b):
    n = b.shape[0]
    x = np.empty(n)
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= Lm[i, k] * x[k]
        x[i] = acc / Lm[i, i]
    return x


@njit(cache=True)
def _solve_upper_t(Lm, b):
    # solves L^T x = b
    n = b.shape[0]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for k in range(i + 1, n):
            acc -= Lm[k, i] * x[k]
        x[i] = acc / Lm[i, i]
    return x


@njit(cache=True)
def _soft_posterior(phi, R, w, sigma_mu):
    """Cholesky factor of the leaf posterior precision and Phi^T W R."""
    n, L = phi.shape
    omega = np.zeros((L, L))
    b = np.zeros(L)
    for i in range(n):
        wi = w[i]
        for a in range(L):
            pa = phi[i, a] * wi
            if pa == 0.0:
                continue
            b[a] += pa * R[i]
            for c in range(a + 1):
                omega[a, c] += pa * phi[i, c]
    inv = 1.0 / (sigma_mu * sigma_mu)
    for a in range(L):
        omega[a, a] += inv
        for c in range(a):
            omega[c, a] = omega[a, c]
    return np.linalg.cholesky(omega), b


@njit(cache=True)
def _soft_logml(phi, R, w, slogsig, sigma_mu):
    n, L = phi.shape
    chol, b = _soft_posterior(phi, R, w, sigma_mu)
    swr2 = 0.0
    for i in range(n):
        swr2 += w[i] * R[i] * R[i]
    z = _solve_lower(chol, b)
    logdet = 2.0 * L * math.log(sigma_mu)
    for a in range(L):
        logdet += 2.0 * math.log(chol[a, a])
    return -n * LOG_SQRT_2PI - slogsig - 0.5 * swr2 - 0.5 * logdet + 0.5 * np.dot(z, z)


@njit(cache=True)
def _soft_leaf_draw(rng, phi, R, w, sigma_mu):
    L = phi.shape[1]
    chol, b = _soft_posterior(phi, R, w, sigma_mu)
    z = _solve_lower(chol, b)
    for a in range(L):
        z[a] += rng.standard_normal()
    return _solve_upper_t(chol, z)


# --------------------------------------------------------------------------
# Python-facing tree object


@dataclass
class Tree:
    """Binary tree in fixed-capacity node arrays (see module docstring)."""

    var: np.ndarray
    cut: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    mu: np.ndarray
    bandwidth: np.ndarray
    growable: np.ndarray

    @classmethod
    def stump(cls, mu=0.0, capacity=64):
        capacity = max(int(capacity), 3)
        t = cls(
            var=np.full(capacity, FREE, np.int64),
            cut=np.zeros(capacity),
            left=np.full(capacity, -1, np.int64),
            right=np.full(capacity, -1, np.int64),
            parent=np.full(capacity, -1, np.int64),
            depth=np.zeros(capacity, np.int64),
            mu=np.zeros(capacity),
            bandwidth=np.zeros(capacity),
            growable=np.zeros(capacity, np.int8),
        )
        t.var[0] = LEAF
        t.mu[0] = mu
        t.growable[0] = 1
        return t

    def copy(self):
        return Tree(*(getattr(self, f).copy() for f in self.__dataclass_fields__))

    @property
    def capacity(self):
        return self.var.shape[0]

    def leaves(self):
        """Leaf node ids in depth-first (left before right) order."""
        return _leaf_ids(self.var, self.left, self.right)

    @property
    def n_leaves(self):
        return len(self.leaves())

    def internal_nodes(self):
        return np.flatnonzero(self.var >= 0)

    def split(self, node, var, cut, mu_left=0.0, mu_right=0.0, bandwidth=1.0):
        """Turn leaf ``node`` into a split; returns (left id, right id)."""
        if self.var[node] != LEAF:
            raise ValueError(f"node {node} is not a leaf")
        free = np.flatnonzero(self.var == FREE)
        free = free[free > 0]
        if len(free) < 2:
            raise ValueError("tree capacity exhausted")
        a, b = int(free[0]), int(free[1])
        self.var[node] = var
        self.cut[node] = cut
        self.bandwidth[node] = bandwidth
        self.left[node], self.right[node] = a, b
        self.growable[node] = 0
        for ch, m in ((a, mu_left), (b, mu_right)):
            self.var[ch] = LEAF
            self.parent[ch] = node
            self.depth[ch] = self.depth[node] + 1
            self.mu[ch] = m
            self.growable[ch] = 1
        return a, b

    def check(self, p=None):
        """Raise ValueError if the node arrays do not form a valid tree."""
        seen = set()
        stack = [0]
        if self.var[0] == FREE:
            raise ValueError("root slot is free")
        while stack:
            node = stack.pop()
            if node in seen:
                raise ValueError("node reachable twice")
            seen.add(node)
            v = self.var[node]
            if v == FREE:
                raise ValueError(f"free slot {node} reachable")
            if v >= 0:
                if p is not None and v >= p:
                    raise ValueError(f"split variable {v} out of range")
                a, b = self.left[node], self.right[node]
                if a < 0 or b < 0:
                    raise ValueError(f"internal node {node} lacks children")
                stack.extend([b, a])
        used = set(np.flatnonzero(self.var != FREE).tolist())
        if used != seen:
            raise ValueError("unreachable nodes present")

    def route(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0], np.int64)
        _route_all(self.var, self.cut, self.left, self.right, X, out)
        return out

    def predict(self, X, soft=False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if soft:
            return soft_weights(self, X) @ self.mu[self.leaves()]
        return self.mu[self.route(X)]

    def refresh_growable(self, X, min_leaf):
        """Recompute the cached growable flag of every leaf for data ``X``."""
        X = np.ascontiguousarray(X, dtype=float)
        leaf_of = self.route(X)
        idx = np.empty(X.shape[0], np.int64)
        buf = np.empty(X.shape[0])
        self.growable[:] = 0
        for leaf in self.leaves():
            cnt = _members(leaf_of, leaf, leaf, idx)
            self.growable[leaf] = int(_growable(X, idx, cnt, min_leaf, buf))

    def compact(self):
        """Dict of node arrays restricted to used slots, renumbered 0..k-1."""
        order = []
        stack = [0]
        while stack:
            node = stack.pop()
            order.append(node)
            if self.var[node] >= 0:
                stack.extend([self.right[node], self.left[node]])
        remap = {old: new for new, old in enumerate(order)}
        sel = np.array(order, np.int64)
        left = np.array([remap.get(int(v), -1) for v in self.left[sel]], np.int64)
        right = np.array([remap.get(int(v), -1) for v in self.right[sel]], np.int64)
        return {"var": self.var[sel].copy(), "cut": self.cut[sel].copy(), "left": left,
                "right": right, "mu": self.mu[sel].copy(), "bandwidth": self.bandwidth[sel].copy()}

    @classmethod
    def from_compact(cls, d, capacity=None):
        k = len(d["var"])
        t = cls.stump(capacity=max(capacity or 0, k))
        t.var[:k] = d["var"]
        t.cut[:k] = d["cut"]
        t.left[:k] = d["left"]
        t.right[:k] = d["right"]
        t.mu[:k] = d["mu"]
        t.bandwidth[:k] = d["bandwidth"]
        for node in range(k):
            if t.var[node] >= 0:
                for ch in (t.left[node], t.right[node]):
                    t.parent[ch] = node
                    t.depth[ch] = t.depth[node] + 1
        return t


def hard_predict(tree, x):
    """Leaf value of the unique leaf whose rules ``x`` satisfies."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        tree.check()
        return float(tree.mu[_route(tree.var, tree.cut, tree.left, tree.right, x)])
    return tree.predict(x)


def soft_weights(tree, x):
    """Soft-gating weight of every leaf (ordered as ``tree.leaves()``)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.ascontiguousarray(np.atleast_2d(x))
    internal = tree.var >= 0
    if np.any(tree.bandwidth[internal] <= 0):
        raise ValueError("bandwidths must be positive")
    phi = _soft_phi(tree.var, tree.cut, tree.left, tree.right, tree.bandwidth, X, tree.leaves())
    return phi[0] if single else phi


def leaf_log_marginal(residuals, sigma, sigma_mu):
    """Log marginal likelihood of one leaf with its mean integrated out.

    Residuals are N(mu, sigma_i^2) given the leaf mean and mu ~ N(0, sigma_mu^2).
    """
    R = np.atleast_1d(np.asarray(residuals, dtype=float))
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), R.shape)
    if R.size == 0:
        raise ValueError("empty leaf")
    if np.any(sig <= 0) or sigma_mu <= 0:
        raise ValueError("scales must be positive")
    w = 1.0 / sig**2
    return float(_leaf_logml(R.size, w.sum(), (w * R).sum(), (w * R * R).sum(),
                             np.log(sig).sum(), float(sigma_mu)))


def leaf_posterior(residuals, sigma, sigma_mu):
    """Mean and variance of the normal full conditional of a leaf value."""
    R = np.atleast_1d(np.asarray(residuals, dtype=float))
    if R.size == 0:
        raise ValueError("empty leaf")
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), R.shape)
    w = 1.0 / sig**2
    var = 1.0 / (1.0 / sigma_mu**2 + w.sum())
    return var * (w * R).sum(), var


def tree_log_marginal(tree, X, residuals, sigma, sigma_mu, soft=False):
    """Sum of leaf log marginals (hard) or the joint Gaussian marginal (soft)."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    R = np.asarray(residuals, dtype=float)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), R.shape)
    if soft:
        phi = soft_weights(tree, X)
        return float(_soft_logml(phi, R, 1.0 / sig**2, float(np.log(sig).sum()), float(sigma_mu)))
    leaf_of = tree.route(X)
    total = 0.0
    for leaf in tree.leaves():
        sel = leaf_of == leaf
        if not sel.any():
            raise ValueError(f"leaf {leaf} is empty")
        total += leaf_log_marginal(R[sel], sig[sel], sigma_mu)
    return total


def draw_leaf_params(rng, tree, X, residuals, sigma, sigma_mu, soft=False):
    """Copy of ``tree`` with every leaf value drawn from its full conditional."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    R = np.asarray(residuals, dtype=float)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), R.shape)
    out = tree.copy()
    leaves = tree.leaves()
    if soft:
        phi = soft_weights(tree, X)
        out.mu[leaves] = _soft_leaf_draw(rng, phi, R, 1.0 / sig**2, float(sigma_mu))
        return out
    leaf_of = tree.route(X)
    for leaf in leaves:
        sel = leaf_of == leaf
        if not sel.any():
            raise ValueError(f"leaf {leaf} is empty")
        m, v = leaf_posterior(R[sel], sig[sel], sigma_mu)
        out.mu[leaf] = m + math.sqrt(v) * rng.standard_normal()
    return out


@dataclass
class Proposal:
    tree: Tree
    kind: int
    node: int
    log_proposal_ratio: float
    log_prior_ratio: float


def propose(rng, tree, kind, split_probs, X, min_leaf=5, alpha_tree=0.95, beta_tree=2.0,
            move_probs=(0.3, 0.3, 0.4), tau=1.0, xscale=None):
    """Draw a GROW, PRUNE or CHANGE proposal with its exact MH ratios.

    ``exp(log_proposal_ratio + log_likelihood_ratio + log_prior_ratio)`` is
    the acceptance ratio.  Raises :class:`MoveUnavailable` if no legal move
    of the requested kind exists.
    """
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
    n, p = X.shape
    k = MOVE_NAMES[kind] if isinstance(kind, str) else int(kind)
    s = np.asarray(split_probs, dtype=float)
    if s.shape != (p,):
        raise ValueError("split_probs must have one entry per column")
    work = tree.copy()
    work.refresh_growable(X, min_leaf)
    leaf_of = work.route(X)
    idx, lidx, ridx = (np.empty(n, np.int64) for _ in range(3))
    buf = np.empty(n)
    status, k, node, v, c, gl, gr, lpr, lprior = _propose_edit(
        rng, k, work.var, work.cut, work.left, work.right, work.depth, work.growable, leaf_of,
        X, s, np.cumsum(s), int(min_leaf), float(alpha_tree), float(beta_tree),
        np.asarray(move_probs, dtype=float), True, idx, lidx, ridx, buf)
    if status != 0:
        raise MoveUnavailable(f"no legal {kind} move")
    xs = np.ones(p) if xscale is None else np.asarray(xscale, dtype=float)
    new = work.copy()
    if not _apply_edit(k, node, v, c, gl, gr, new.var, new.cut, new.left, new.right, new.parent,
                       new.depth, new.mu, new.bandwidth, new.growable, float(tau), xs):
        raise MoveUnavailable("tree capacity exhausted")
    return Proposal(new, k, int(node), float(lpr), float(lprior))

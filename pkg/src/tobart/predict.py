"""Censored-outcome expectations, censoring probabilities and posterior summaries.

For a latent Y* ~ N(loc, sigma^2) and observed Y = min(max(Y*, a), b):

* :func:`censored_expectation` gives E[Y];
* :func:`truncated_expectation` gives E[Y* | a < Y* < b];
* :func:`censoring_probs` gives P(Y* <= a) and P(Y* >= b).

All three broadcast over array arguments.  Infinite limits drop their terms
exactly, and the inverse-Mills ratios are computed in log space so that
standardized distances of several dozen remain finite.
"""

from __future__ import annotations

import math

import numpy as np
import pandas as pd
from scipy.special import erfcx, log_ndtr, ndtr

from .stats_core import LOG_SQRT_2PI, as_bounds

PREDICTION_COLUMNS = ("row_id", "f_mean", "ey_mean", "p_below", "p_above", "latent_lower",
                      "latent_upper", "obs_lower", "obs_upper", "level")
_LOG_MASS_FLOOR = math.log(1e-300)
_SQRT2 = math.sqrt(2.0)
_SQRT_PI_2 = math.sqrt(math.pi / 2.0)


class DegenerateConditioning(ValueError):
    """The interval (a, b) carries no probability mass under the normal."""


def _std(loc, sigma, bounds):
    a, b = as_bounds(bounds)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    loc = np.asarray(loc, dtype=float)
    with np.errstate(invalid="ignore"):
        za = (a - loc) / sigma
        zb = (b - loc) / sigma
    return a, b, loc, sigma, za, zb


def _logphi(z):
    return -LOG_SQRT_2PI - 0.5 * np.asarray(z, dtype=float) ** 2


def _log_mass(za, zb):
    """log(Phi(zb) - Phi(za)) without cancellation in either tail."""
    upper_tail = za > 0
    # upper tail: Phi(-za) - Phi(-zb); otherwise Phi(zb) - Phi(za)
    hi = np.where(upper_tail, log_ndtr(-za), log_ndtr(zb))
    lo = np.where(upper_tail, log_ndtr(-zb), log_ndtr(za))
    with np.errstate(divide="ignore", invalid="ignore"):
        return hi + np.log1p(-np.exp(lo - hi))


def _excess(t):
    """g(t) = E[(t - Z)+] = phi(t) + t Phi(t) for standard normal Z, accurate in both tails."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    with np.errstate(over="ignore", invalid="ignore"):
        lo = t < -1.0
        tl = t[lo]
        # phi(t) (1 + t Phi(t) / phi(t)), with the Mills ratio from erfcx
        out[lo] = np.exp(_logphi(tl)) * (1.0 + tl * _SQRT_PI_2 * erfcx(-tl / _SQRT2))
        hi = ~lo
        th = t[hi]
        out[hi] = np.exp(_logphi(th)) + th * ndtr(th)
    out[np.isneginf(t)] = 0.0
    out[np.isposinf(t)] = np.inf
    return out


def censored_expectation(f, gamma, sigma, bounds):
    """E[Y] for Y the censored version of N(f + gamma, sigma^2).

    Evaluated as a + sigma (g(-za) - g(-zb)) or b - sigma (g(zb) - g(za)),
    whichever bound is nearer the location, with g the expected excess of a
    standard normal.  Both forms are increasing in the location and stay
    within [a, b] without clamping.
    """
    a, b, loc, sigma, za, zb = _std(np.asarray(f, dtype=float) + gamma, sigma, bounds)
    loc, sigma, za, zb = np.broadcast_arrays(loc, sigma, za, zb)
    if not math.isfinite(a) and not math.isfinite(b):
        out = np.array(loc, dtype=float)
        return out if out.ndim else float(out)
    if not math.isfinite(b):
        from_a = np.ones(loc.shape, dtype=bool)
    elif not math.isfinite(a):
        from_a = np.zeros(loc.shape, dtype=bool)
    else:
        from_a = loc <= 0.5 * (a + b)
    with np.errstate(invalid="ignore"):
        via_a = a + sigma * (_excess(-za) - _excess(-zb))
        via_b = b - sigma * (_excess(zb) - _excess(za))
    out = np.where(from_a, via_a, via_b)
    return out if out.ndim else float(out)


def truncated_expectation(f, gamma, sigma, bounds):
    """E[Y* | a < Y* < b] for Y* ~ N(f + gamma, sigma^2)."""
    a, b, loc, sigma, za, zb = _std(np.asarray(f, dtype=float) + gamma, sigma, bounds)
    za, zb = np.broadcast_arrays(za, zb)
    lm = _log_mass(za, zb)
    if np.any(lm < _LOG_MASS_FLOOR):
        raise DegenerateConditioning("no probability mass between the censoring limits")
    ratio = np.exp(_logphi(za) - lm) - np.exp(_logphi(zb) - lm)
    out = loc + sigma * ratio
    # guard against the last ulp landing on a bound
    out = np.clip(out, np.nextafter(a, np.inf), np.nextafter(b, -np.inf))
    return out if out.ndim else float(out)


def censoring_probs(f, gamma, sigma, bounds):
    """(P(Y* <= a), P(Y* >= b))."""
    _a, _b, _loc, _sigma, za, zb = _std(np.asarray(f, dtype=float) + gamma, sigma, bounds)
    pb, pa = ndtr(za), ndtr(-zb)
    if np.ndim(pb) == 0 and np.ndim(pa) == 0:
        return float(pb), float(pa)
    return np.broadcast_arrays(pb, pa)


def _dp_mixture(draws, f, d, bounds, rng):
    """E[Y] and censoring probabilities for new rows under DP draw ``d``.

    Mixes the live clusters by n_j / (alpha + n) and one fresh base-measure
    draw by alpha / (alpha + n).
    """
    cl = draws.clusters[d]
    n = cl["size"].sum()
    alpha = cl["alpha"]
    g0, s0 = draws.dp_base.draw(rng)
    g = np.append(cl["gamma"], g0)
    s = np.append(cl["sigma"], s0)
    w = np.append(cl["size"], alpha) / (alpha + n)
    ey = censored_expectation(f[:, None], g[None, :], s[None, :], bounds) @ w
    pb, pa = censoring_probs(f[:, None], g[None, :], s[None, :], bounds)
    return ey, pb @ w, pa @ w


def _oos_errors(rng, draws, d, size):
    """Polya-urn predictive (gamma, sigma) for ``size`` new rows at draw d."""
    cl = draws.clusters[d]
    n = cl["size"].sum()
    alpha = cl["alpha"]
    g_new, s_new = draws.dp_base.draw(rng, size)
    fresh = rng.random(size) < alpha / (alpha + n)
    pick = rng.choice(cl["size"].size, size=size, p=cl["size"] / n)
    return (np.where(fresh, g_new, cl["gamma"][pick]),
            np.where(fresh, s_new, cl["sigma"][pick]))


def posterior_predict(draws, bounds=None, level=0.95, rows="test", rng=None, n_sim=1):
    """Per-row posterior summaries as a table with :data:`PREDICTION_COLUMNS`.

    E[Y] and censoring probabilities average the closed-form expressions
    over draws.  Intervals are equal-tailed quantiles of simulated latent
    outcomes (``n_sim`` per draw), with the observed-outcome interval the
    censored transform of the same samples.  Training rows under the DP
    model use each row's own (gamma_i, sigma_i); new rows use the Polya-urn
    predictive.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    bounds = as_bounds(draws.bounds if bounds is None else bounds)
    f = draws.f_test if rows == "test" else draws.f_train
    if f is None or f.shape[0] == 0:
        raise ValueError("no retained draws for the requested rows")
    rng = np.random.default_rng(0) if rng is None else rng
    D, n = f.shape
    ey = np.zeros(n)
    pb = np.zeros(n)
    pa = np.zeros(n)
    sims = np.empty((D * n_sim, n))
    for d in range(D):
        fd = f[d]
        if draws.error_model == "normal":
            s = draws.sigma[d]
            ey += censored_expectation(fd, 0.0, s, bounds)
            b1, b2 = censoring_probs(fd, 0.0, s, bounds)
            g_sim = np.zeros((n_sim, n))
            s_sim = np.full((n_sim, n), s)
        elif rows == "train":
            g, s = draws.train_gamma[d], draws.train_sigma[d]
            ey += censored_expectation(fd, g, s, bounds)
            b1, b2 = censoring_probs(fd, g, s, bounds)
            g_sim = np.broadcast_to(g, (n_sim, n))
            s_sim = np.broadcast_to(s, (n_sim, n))
        else:
            e, b1, b2 = _dp_mixture(draws, fd, d, bounds, rng)
            ey += e
            g_sim, s_sim = _oos_errors(rng, draws, d, (n_sim, n))
        pb += b1
        pa += b2
        sims[d * n_sim:(d + 1) * n_sim] = fd + g_sim + s_sim * rng.standard_normal((n_sim, n))
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(sims, [tail, 1.0 - tail], axis=0)
    return pd.DataFrame({
        "row_id": np.arange(n), "f_mean": f.mean(axis=0), "ey_mean": ey / D,
        "p_below": pb / D, "p_above": pa / D, "latent_lower": lo, "latent_upper": hi,
        "obs_lower": bounds.censor(lo), "obs_upper": bounds.censor(hi),
        "level": np.full(n, level),
    })

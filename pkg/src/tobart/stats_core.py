"""Densities, distribution functions and random samplers used by the samplers.

Every sampler takes an explicit :class:`numpy.random.Generator`.  Chains get
their own stream from :func:`rng_stream`, which builds a PCG64 generator
(period 2**128, jumpable) keyed on ``(seed, stream_id)``.  The scalar kernels
prefixed with ``_`` are numba-compiled so the MCMC loops can call them with
the same generator object.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy import special, stats

SQRT2 = math.sqrt(2.0)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
# standardized distance beyond which the truncated-normal sampler switches
# from inverse-CDF to exponential rejection
TAIL_SWITCH = 5.0

ERROR_KINDS = ("normal", "skew-t", "weibull", "t")
ERROR_DEFAULTS = {
    "normal": {"sigma": 1.0},
    "skew-t": {"loc": 1.0, "scale": 1.0, "df": 4.0, "slant": 2.0},
    "weibull": {"shape": 0.5, "scale": 0.2},
    "t": {"df": 3.0},
}


class Interval(NamedTuple):
    """Open/closed interval with possibly infinite endpoints."""

    lower: float
    upper: float

    def validate(self) -> "Interval":
        if math.isnan(self.lower) or math.isnan(self.upper):
            raise ValueError("interval endpoints must not be NaN")
        if not self.lower < self.upper:
            raise ValueError(f"empty interval [{self.lower}, {self.upper}]")
        return self


AT_LOWER, INTERIOR, AT_UPPER = -1, 0, 1


class CensoringBounds(NamedTuple):
    """Type-I censoring limits: values at or below ``a`` are recorded as ``a``,
    values at or above ``b`` as ``b``.  Infinite limits mean no censoring."""

    a: float = -math.inf
    b: float = math.inf

    def validate(self) -> "CensoringBounds":
        Interval(float(self.a), float(self.b)).validate()
        return self

    @property
    def censored(self) -> bool:
        return math.isfinite(self.a) or math.isfinite(self.b)

    def classify(self, y):
        """Status codes (-1 at lower, 0 interior, 1 at upper) for observed ``y``.

        Values strictly outside [a, b] cannot arise under Type-I censoring
        and raise ``ValueError``.
        """
        y = np.asarray(y, dtype=float)
        if np.any(np.isnan(y)):
            raise ValueError("outcomes contain NaN")
        if np.any(y < self.a) or np.any(y > self.b):
            bad = np.flatnonzero((y < self.a) | (y > self.b))[0]
            raise ValueError(f"outcome {y.flat[bad]} at row {bad} lies outside "
                             f"the censoring limits [{self.a}, {self.b}]")
        status = np.zeros(y.shape, np.int64)
        status[y == self.a] = AT_LOWER
        status[y == self.b] = AT_UPPER
        return status

    def censor(self, ystar):
        """Observed outcome for latent values ``ystar``."""
        return np.clip(np.asarray(ystar, dtype=float), self.a, self.b)


def as_bounds(bounds) -> CensoringBounds:
    if bounds is None:
        return CensoringBounds()
    return CensoringBounds(float(bounds[0]), float(bounds[1])).validate()


def rng_stream(seed: int, stream_id: int = 0, chain: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for one chain.

    Identical ``(seed, stream_id, chain)`` triples give identical sequences;
    distinct triples come from distinct spawn keys of the same seed
    sequence.  ``chain=0`` is the plain ``(seed, stream_id)`` stream.
    """
    if seed < 0 or stream_id < 0 or chain < 0:
        raise ValueError("seed, stream_id and chain must be nonnegative")
    key = (int(stream_id),) if chain == 0 else (int(stream_id), int(chain))
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def _check_sigma(sigma):
    if np.any(np.asarray(sigma) <= 0) or np.any(np.isnan(sigma)):
        raise ValueError("sigma must be positive")


def normal_pdf(x, mu=0.0, sigma=1.0):
    _check_sigma(sigma)
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def normal_cdf(x, mu=0.0, sigma=1.0):
    _check_sigma(sigma)
    return special.ndtr((np.asarray(x, dtype=float) - mu) / sigma)


def normal_sf(x, mu=0.0, sigma=1.0):
    _check_sigma(sigma)
    return special.ndtr(-(np.asarray(x, dtype=float) - mu) / sigma)


def normal_quantile(p, mu=0.0, sigma=1.0):
    _check_sigma(sigma)
    p = np.asarray(p, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return mu + sigma * special.ndtri(p)


def t_density(x, nu, loc=0.0, scale_sq=1.0):
    """Density of ``loc + sqrt(scale_sq) * T_nu``."""
    if nu <= 0 or scale_sq <= 0:
        raise ValueError("nu and scale_sq must be positive")
    return np.exp(_t_logpdf_vec(np.asarray(x, dtype=float), float(nu), float(loc), float(scale_sq)))


def _t_logpdf_vec(x, nu, loc, scale_sq):
    z2 = (x - loc) ** 2 / scale_sq
    return (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
            - 0.5 * math.log(nu * math.pi * scale_sq)
            - 0.5 * (nu + 1) * np.log1p(z2 / nu))


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True)
def _phi(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def _Phi(x):
    return 0.5 * math.erfc(-x / SQRT2)


@njit(cache=True)
def _ndtri(p):
    """Inverse standard normal CDF (Acklam's approximation + one Halley step)."""
    if p <= 0.0:
        return -np.inf
    if p >= 1.0:
        return np.inf
    a1, a2, a3 = -3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02
    a4, a5, a6 = 1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00
    b1, b2, b3 = -5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02
    b4, b5 = 6.680131188771972e01, -1.328068155288572e01
    c1, c2, c3 = -7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00
    c4, c5, c6 = -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00
    d1, d2, d3 = 7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00
    d4 = 3.754408661907416e00
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c1 * q + c2) * q + c3) * q + c4) * q + c5) * q + c6) / \
            ((((d1 * q + d2) * q + d3) * q + d4) * q + 1.0)
    elif p <= 1.0 - plow:
        q = p - 0.5
        r = q * q
        x = (((((a1 * r + a2) * r + a3) * r + a4) * r + a5) * r + a6) * q / \
            (((((b1 * r + b2) * r + b3) * r + b4) * r + b5) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c1 * q + c2) * q + c3) * q + c4) * q + c5) * q + c6) / \
            ((((d1 * q + d2) * q + d3) * q + d4) * q + 1.0)
    e = 0.5 * math.erfc(-x / SQRT2) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


@njit(cache=True)
def _tail_rejection(rng, lo, hi):
    """Standard normal restricted to [lo, hi] with lo >= TAIL_SWITCH."""
    if hi - lo < 2.0 / lo:
        # narrow slab: uniform proposal
        while True:
            z = lo + (hi - lo) * rng.random()
            if math.log(rng.random()) <= -0.5 * (z * z - lo * lo):
                return z
    rate = 0.5 * (lo + math.sqrt(lo * lo + 4.0))
    while True:
        z = lo + rng.standard_exponential() / rate
        if z > hi:
            continue
        d = z - rate
        if math.log(rng.random()) <= -0.5 * d * d:
            return z


@njit(cache=True)
def _std_truncnorm(rng, lo, hi):
    """One draw of Z ~ N(0, 1) conditioned on lo < Z < hi."""
    if lo >= TAIL_SWITCH:
        return _tail_rejection(rng, lo, hi)
    if hi <= -TAIL_SWITCH:
        return -_tail_rejection(rng, -hi, -lo)
    u = rng.random()
    if lo >= 0.0:
        # work with upper-tail masses to keep precision
        qlo = _Phi(-lo)
        qhi = _Phi(-hi)
        z = -_ndtri(qlo - u * (qlo - qhi))
    else:
        plo = _Phi(lo)
        phi_ = _Phi(hi)
        z = _ndtri(plo + u * (phi_ - plo))
    # guard against rounding onto the boundary
    if z <= lo:
        z = np.nextafter(lo, np.inf)
    elif z >= hi:
        z = np.nextafter(hi, -np.inf)
    return z


@njit(cache=True)
def _truncnorm(rng, mu, sigma, lower, upper):
    return mu + sigma * _std_truncnorm(rng, (lower - mu) / sigma, (upper - mu) / sigma)


@njit(cache=True)
def _truncnorm_many(rng, mu, sigma, lower, upper, out):
    for i in range(out.shape[0]):
        out[i] = _truncnorm(rng, mu[i], sigma[i], lower[i], upper[i])


@njit(cache=True)
def _inv_gamma(rng, shape, scale):
    return scale / rng.gamma(shape, 1.0)


@njit(cache=True)
def _t_logpdf(x, nu, loc, scale_sq):
    z2 = (x - loc) * (x - loc) / scale_sq
    return (math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
            - 0.5 * math.log(nu * math.pi * scale_sq)
            - 0.5 * (nu + 1.0) * math.log1p(z2 / nu))


@njit(cache=True)
def _log_gamma_variate(rng, shape):
    # log of a Gamma(shape, 1) draw, stable for tiny shapes
    if shape < 1.0:
        return math.log(rng.gamma(shape + 1.0, 1.0)) + math.log(rng.random()) / shape
    return math.log(rng.gamma(shape, 1.0))


@njit(cache=True)
def _dirichlet(rng, weights):
    p = weights.shape[0]
    logs = np.empty(p)
    for j in range(p):
        logs[j] = _log_gamma_variate(rng, weights[j])
    mx = logs.max()
    out = np.exp(logs - mx)
    out /= out.sum()
    for j in range(p):
        if out[j] < 1e-300:
            out[j] = 1e-300
    out /= out.sum()
    return out


# --------------------------------------------------------------------------
# Python-facing samplers


def sample_truncated_normal(rng, mu, sigma, bounds, size=None):
    """Draw from N(mu, sigma^2) conditioned on ``bounds``.

    Inverse-CDF inside five standard deviations; exponential-proposal
    rejection further out, so bounds deep in the tail stay exact.
    """
    lower, upper = Interval(*bounds).validate()
    _check_sigma(sigma)
    if size is None:
        return float(_truncnorm(rng, float(mu), float(sigma), float(lower), float(upper)))
    n = int(np.prod(size))
    out = np.empty(n)
    _truncnorm_many(rng, np.full(n, float(mu)), np.full(n, float(sigma)),
                    np.full(n, float(lower)), np.full(n, float(upper)), out)
    return out.reshape(size)


def sample_inverse_gamma(rng, shape, scale, size=None):
    """Inverse-gamma draws with density proportional to x^(-shape-1) exp(-scale/x)."""
    if shape <= 0 or scale <= 0:
        raise ValueError("shape and scale must be positive")
    return scale / rng.gamma(shape, 1.0, size=size)


def sample_dirichlet(rng, weights):
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    if np.any(w <= 0) or np.any(~np.isfinite(w)):
        raise ValueError("Dirichlet weights must be positive and finite")
    if w.size == 1:
        return np.ones(1)
    return _dirichlet(rng, w)


def _skew_t(rng, size, loc, scale, df, slant):
    # Azzalini skew-t: skew-normal numerator over sqrt(chi2/df)
    delta = slant / math.sqrt(1.0 + slant * slant)
    u0 = np.abs(rng.standard_normal(size))
    u1 = rng.standard_normal(size)
    z = delta * u0 + math.sqrt(1.0 - delta * delta) * u1
    w = rng.chisquare(df, size) / df
    return loc + scale * z / np.sqrt(w)


def sample_error_dist(rng, kind, size=None, **params):
    """Errors used by the simulation designs.

    ``kind`` is one of ``normal`` (sigma), ``skew-t`` (Azzalini form with
    loc, scale, df and slant; slant 2 gives right skew), ``weibull`` (shape,
    scale) or ``t`` (df).  Unspecified parameters take the simulation
    defaults in :data:`ERROR_DEFAULTS`.
    """
    if kind not in ERROR_DEFAULTS:
        raise ValueError(f"unknown error kind {kind!r}; expected one of {ERROR_KINDS}")
    unknown = set(params) - set(ERROR_DEFAULTS[kind])
    if unknown:
        raise ValueError(f"unknown parameters for {kind}: {sorted(unknown)}")
    par = {**ERROR_DEFAULTS[kind], **params}
    if kind == "normal":
        _check_sigma(par["sigma"])
        return par["sigma"] * rng.standard_normal(size)
    if kind == "skew-t":
        return _skew_t(rng, size, par["loc"], par["scale"], par["df"], par["slant"])
    if kind == "weibull":
        return par["scale"] * rng.weibull(par["shape"], size)
    return rng.standard_t(par["df"], size)


def error_dist_mean(kind, **params):
    """Analytic mean of :func:`sample_error_dist` (used by tests and DGP docs)."""
    par = {**ERROR_DEFAULTS[kind], **params}
    if kind in ("normal", "t"):
        return 0.0
    if kind == "weibull":
        return par["scale"] * math.gamma(1.0 + 1.0 / par["shape"])
    delta = par["slant"] / math.sqrt(1.0 + par["slant"] ** 2)
    nu = par["df"]
    b = math.sqrt(nu / math.pi) * math.gamma((nu - 1) / 2) / math.gamma(nu / 2)
    return par["loc"] + par["scale"] * delta * b


def truncnorm_moments(mu, sigma, lower, upper):
    """Mean and variance of N(mu, sigma^2) truncated to (lower, upper)."""
    a, b = (lower - mu) / sigma, (upper - mu) / sigma
    dist = stats.truncnorm(a, b, loc=mu, scale=sigma)
    return float(dist.mean()), float(dist.var())

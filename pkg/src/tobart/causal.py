"""Conditional average treatment effects with censored outcomes.

The learner is a single censored-outcome forest with the treatment indicator
appended as the last covariate; each retained draw is evaluated at T = 1 and
T = 0 for every row and differenced.  The two bias functions give the
effects that naive regressions converge to when censoring is ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .predict import DegenerateConditioning, _log_mass, _logphi
from .sampler import ChainConfig, PosteriorDraws, run_chain
from .calibration import calibrate
from .stats_core import CensoringBounds, as_bounds, normal_pdf


@dataclass
class CausalDataset:
    """Covariates, binary treatment and observed outcome (truth optional)."""

    X: np.ndarray
    T: np.ndarray
    y: np.ndarray
    bounds: CensoringBounds
    tau: np.ndarray | None = None
    mu: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.T = np.asarray(self.T)
        self.y = np.asarray(self.y, dtype=float)
        self.bounds = as_bounds(self.bounds)
        if not np.all(np.isin(self.T, (0, 1))):
            raise ValueError("treatment must be coded 0/1")
        if self.T.shape[0] != self.X.shape[0] or self.y.shape[0] != self.X.shape[0]:
            raise ValueError("X, T and y must have the same number of rows")
        if self.T.min() == self.T.max():
            raise ValueError("both treatment arms must be represented")


@dataclass
class CateDraws:
    """Per-draw CATE at the training rows and their summaries."""

    draws: np.ndarray
    level: float
    posterior: PosteriorDraws

    @property
    def mean(self):
        return self.draws.mean(axis=0)

    def interval(self, level=None):
        level = self.level if level is None else level
        tail = (1.0 - level) / 2.0
        return tuple(np.quantile(self.draws, [tail, 1.0 - tail], axis=0))

    def to_frame(self):
        import pandas as pd

        lo, hi = self.interval()
        return pd.DataFrame({"row_id": np.arange(self.draws.shape[1]), "tau_mean": self.mean,
                             "tau_lower": lo, "tau_upper": hi})


def estimate_cate(data, config=None, calib=None, level=0.95, naive=False):
    """Posterior CATE draws for every row of ``data``.

    ``naive=True`` fits plain BART to the recorded outcomes, treating
    censored values as exact; this is the full-data baseline.
    """
    config = config or ChainConfig()
    X, T = data.X, data.T.astype(float)
    n = X.shape[0]
    XT = np.column_stack([X, T])
    test = np.vstack([np.column_stack([X, np.ones(n)]), np.column_stack([X, np.zeros(n)])])
    bounds = CensoringBounds() if naive else data.bounds
    if calib is None:
        calib = calibrate(XT, data.y, bounds, config.error_model)
    post = run_chain(XT, data.y, bounds, config, calib, test_X=test)
    draws = post.f_test[:, :n] - post.f_test[:, n:]
    return CateDraws(draws=draws, level=level, posterior=post)


def pehe(estimates, truth):
    """Mean squared error of CATE estimates."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("estimates and truth must have the same length")
    return float(np.mean((est - tru) ** 2))


def interval_metrics(draws, truth, level=0.95):
    """(coverage, mean length) of equal-tailed intervals from (draws, rows)."""
    d = draws.draws if isinstance(draws, CateDraws) else np.asarray(draws, dtype=float)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(d, [tail, 1.0 - tail], axis=0)
    truth = np.asarray(truth, dtype=float)
    return float(np.mean((lo <= truth) & (truth <= hi))), float(np.mean(hi - lo))


def _mills_correction(loc, sigma, a, b):
    za, zb = (a - loc) / sigma, (b - loc) / sigma
    lm = _log_mass(np.asarray(za, float), np.asarray(zb, float))
    if np.any(lm < math.log(1e-300)):
        raise DegenerateConditioning("no probability mass between the censoring limits")
    return np.exp(_logphi(za) - lm) - np.exp(_logphi(zb) - lm)


def naive_uncensored_bias(mu, tau, sigma, bounds):
    """Effect estimated by regressions on the uncensored rows only.

    tau + sigma * (M(mu + tau) - M(mu)) with M the inverse-Mills term
    (phi(za) - phi(zb)) / (Phi(zb) - Phi(za)).
    """
    a, b = as_bounds(bounds)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = tau + sigma * (_mills_correction(mu + tau, sigma, a, b)
                         - _mills_correction(mu, sigma, a, b))
    return out if np.ndim(out) else float(out)


def naive_fulldata_bias(mu, tau, sigma, bounds):
    """Effect estimated by regressions on the recorded (censored) outcomes."""
    a, b = as_bounds(bounds)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = np.asarray(mu, dtype=float)
    tau = np.asarray(tau, dtype=float)

    def cdf(t, loc):
        return ndtr((t - loc) / sigma) if math.isfinite(t) else float(t > 0)

    def pdf(t, loc):
        return normal_pdf((t - loc) / sigma) if math.isfinite(t) else 0.0

    m1 = mu + tau
    Pb1, Pa1, Pb0, Pa0 = cdf(b, m1), cdf(a, m1), cdf(b, mu), cdf(a, mu)
    out = (tau * (Pb1 - Pa1)
           + mu * (Pb1 - Pa1 - Pb0 + Pa0)
           + sigma * (pdf(a, m1) - pdf(b, m1) - pdf(a, mu) + pdf(b, mu)))
    if math.isfinite(a):
        out = out + a * (Pa1 - Pa0)
    if math.isfinite(b):
        out = out + b * (Pb0 - Pb1)
    return out if np.ndim(out) else float(out)

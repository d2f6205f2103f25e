"""Data-driven prior calibration and the linear Tobit maximum-likelihood fit.

The error-variance prior sigma^2 ~ nu * lambda / chi2_nu is calibrated so
that P(sigma <= sigma_hat) = q, where sigma_hat comes from one of four
estimates:

``naive``
    sample SD of the observed outcomes, ignoring censoring;
``lm``
    SD of OLS residuals of the observed outcomes on X;
``cens``
    scale of an intercept-only censored-normal (Tobit) fit;
``tobit``
    scale of the full linear Tobit fit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats
from scipy.special import log_ndtr

from .stats_core import AT_LOWER, INTERIOR, LOG_SQRT_2PI, as_bounds

SIGMA_METHODS = ("naive", "tobit", "cens", "lm")
SIGMA_FLOOR = 1e-6
# defaults per error model: (nu, q, sigma-hat method)
DEFAULTS = {"normal": (3.0, 0.95, "cens"), "dp": (10.0, 0.9, "tobit")}


class CalibrationWarning(UserWarning):
    """A fallback estimate was used because the preferred one failed."""


@dataclass
class TobitMleFit:
    """Maximum-likelihood fit of y* = X beta + sigma * eps under Type-I censoring."""

    beta: np.ndarray
    sigma: float
    converged: bool
    loglik: float
    n_iter: int = 0
    grad_norm: float = math.nan

    def predict(self, X):
        return _design(X, self.beta.size) @ self.beta


@dataclass
class CalibratedPriors:
    """Hyperparameters on the original outcome scale."""

    sigma_hat: float
    sigma_hat_method: str
    lam: float
    q: float
    nu: float
    center: float
    k0: float | None = None
    k_s: float = 10.0
    residuals: np.ndarray | None = field(default=None, repr=False)

    def report(self) -> str:
        """Key=value block echoed into run manifests."""
        items = [("sigma_hat", self.sigma_hat), ("sigma_hat_method", self.sigma_hat_method),
                 ("lambda", self.lam), ("q", self.q), ("nu", self.nu),
                 ("k0", self.k0), ("k_s", self.k_s), ("center", self.center)]
        return "\n".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in items)

    def to_dict(self):
        return {"sigma_hat": self.sigma_hat, "sigma_hat_method": self.sigma_hat_method,
                "lambda": self.lam, "q": self.q, "nu": self.nu, "center": self.center,
                "k0": self.k0, "k_s": self.k_s}


def _design(X, k=None):
    if X is None:
        return None
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if k is not None and X.shape[1] == k - 1:
        X = np.column_stack([np.ones(X.shape[0]), X])
    return X


def tobit_loglik(beta, log_sigma, X, y, status, bounds, derivatives=True):
    """Type-I Tobit log-likelihood in (beta, log sigma).

    Returns ``(ll, grad, hess)`` with derivatives taken with respect to the
    stacked parameter (beta, log sigma); ``grad``/``hess`` are None when
    ``derivatives`` is false.
    """
    a, b = bounds
    eta = log_sigma
    es = math.exp(-eta)
    xb = X @ beta
    inn = status == INTERIOR
    z = (y[inn] - xb[inn]) * es
    ll = float(np.sum(-LOG_SQRT_2PI - eta - 0.5 * z * z))

    # censored rows: log Phi(c), c = s (t - x beta) / sigma
    cen = ~inn
    s = np.where(status[cen] == AT_LOWER, 1.0, -1.0)
    t = np.where(status[cen] == AT_LOWER, a, b)
    c = s * (t - xb[cen]) * es
    ll += float(np.sum(log_ndtr(c)))
    if not derivatives:
        return ll, None, None

    k = X.shape[1]
    Xi, Xc = X[inn], X[cen]
    g = np.empty(k + 1)
    H = np.empty((k + 1, k + 1))
    logphi = -LOG_SQRT_2PI - 0.5 * c * c
    h = np.exp(logphi - log_ndtr(c))
    hp = -h * (c + h)

    g[:k] = Xi.T @ (z * es) + Xc.T @ (-s * h * es)
    g[k] = np.sum(-1.0 + z * z) + np.sum(-h * c)
    H[:k, :k] = -(es * es) * (Xi.T @ Xi) + (es * es) * (Xc.T * hp) @ Xc
    hbe = Xi.T @ (-2.0 * z * es) + Xc.T @ (s * es * (hp * c + h))
    H[:k, k] = hbe
    H[k, :k] = hbe
    H[k, k] = np.sum(-2.0 * z * z) + np.sum(c * (hp * c + h))
    return ll, g, H


def fit_linear_tobit(X, y, bounds, max_iter=200, tol=1e-8):
    """Newton ascent with backtracking on (beta, log sigma).

    ``X`` is the design matrix without an intercept column (one is added);
    pass ``None`` for the intercept-only model.  Starts from OLS on the
    interior rows.
    """
    bounds = as_bounds(bounds)
    y = np.asarray(y, dtype=float)
    n = y.size
    D = np.ones((n, 1)) if X is None else np.column_stack([np.ones(n), _design(X)])
    if not np.all(np.isfinite(D)):
        raise ValueError("design matrix has non-finite entries")
    k = D.shape[1]
    if np.linalg.matrix_rank(D) < k:
        raise ValueError("design matrix is rank deficient")
    status = bounds.classify(y)
    inn = status == INTERIOR
    if inn.sum() == 0:
        raise ValueError("no interior observations; censored-normal MLE is undefined")

    Ds = D[inn] if inn.sum() > k and np.linalg.matrix_rank(D[inn]) == k else D
    ys = y[inn] if Ds is not D else y
    beta = np.linalg.lstsq(Ds, ys, rcond=None)[0]
    resid = ys - Ds @ beta
    sd = math.sqrt(max(np.mean(resid ** 2), 0.0))
    if sd <= SIGMA_FLOOR:
        sd = max(np.std(y), 1.0) if np.std(y) > 0 else 1.0
    theta = np.append(beta, math.log(sd))

    def f(th):
        return tobit_loglik(th[:k], th[k], D, y, status, bounds)

    ll, g, H = f(theta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        negH = -H
        lam = 0.0
        scale = max(1e-8, np.abs(np.diag(negH)).max())
        while True:
            try:
                L = linalg.cho_factor(negH + lam * np.eye(k + 1))
                break
            except linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-8 * scale)
        step = linalg.cho_solve(L, g)
        t = 1.0
        while True:
            cand = theta + t * step
            cand[k] = max(cand[k], math.log(SIGMA_FLOOR))
            ll_new = f(cand)[0]
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            # no ascent possible along the Newton direction
            converged = np.max(np.abs(g)) < 1e-6
            break
        theta = cand
        ll_prev = ll
        ll, g, H = f(theta)
        if np.max(np.abs(g)) < tol or (abs(ll - ll_prev) < 1e-14 * max(1.0, abs(ll))
                                       and np.max(np.abs(g)) < 1e-6):
            converged = True
            break
    return TobitMleFit(beta=theta[:k].copy(), sigma=float(math.exp(theta[k])),
                       converged=bool(converged), loglik=float(ll), n_iter=it,
                       grad_norm=float(np.max(np.abs(g))))


def _sigma_hat(X, y, bounds, method):
    """(sigma_hat, method actually used)."""
    if method not in SIGMA_METHODS:
        raise ValueError(f"unknown sigma-hat method {method!r}; expected one of {SIGMA_METHODS}")
    y = np.asarray(y, dtype=float)
    n = y.size
    p = 0 if X is None else _design(X).shape[1]
    if method in ("tobit", "lm") and n < p + 2:
        raise ValueError(f"method {method!r} needs at least p + 2 = {p + 2} rows")
    if n < 2:
        raise ValueError("need at least two observations")
    if method == "naive":
        return float(np.std(y, ddof=1)), "naive"
    if method == "lm":
        D = np.column_stack([np.ones(n), _design(X)])
        r = y - D @ np.linalg.lstsq(D, y, rcond=None)[0]
        return float(math.sqrt(np.sum(r * r) / max(n - D.shape[1], 1))), "lm"
    order = ["tobit", "cens", "naive"] if method == "tobit" else ["cens", "naive"]
    for meth in order:
        if meth == "naive":
            warnings.warn("censored MLE failed; using the naive outcome SD", CalibrationWarning,
                          stacklevel=3)
            return float(np.std(y, ddof=1)), "naive"
        try:
            fit = fit_linear_tobit(X if meth == "tobit" else None, y, bounds)
        except ValueError:
            fit = None
        if fit is not None and fit.converged:
            return fit.sigma, meth
        if meth == "tobit":
            warnings.warn("linear Tobit MLE did not converge; falling back to 'cens'",
                          CalibrationWarning, stacklevel=3)
    raise AssertionError("unreachable")


def estimate_sigma_hat(X, y, bounds, method="cens"):
    """Error-scale estimate used to calibrate the variance prior."""
    return _sigma_hat(X, y, bounds, method)[0]


def solve_lambda(sigma_hat, q, nu):
    """lambda with P(sigma <= sigma_hat) = q under sigma^2 ~ nu * lambda / chi2_nu."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    if nu <= 0 or sigma_hat <= 0:
        raise ValueError("nu and sigma_hat must be positive")
    return float(sigma_hat ** 2 * stats.chi2.ppf(1.0 - q, nu) / nu)


def solve_k0(lam, residuals, k_s=10.0):
    """k0 such that max |e_i| = k_s * sqrt(lambda / k0)."""
    if k_s <= 0 or lam <= 0:
        raise ValueError("k_s and lambda must be positive")
    e = np.asarray(residuals, dtype=float)
    if e.size == 0:
        raise ValueError("residuals must be nonempty")
    emax = float(np.max(np.abs(e)))
    if emax == 0.0:
        raise ValueError("residuals are all zero")
    return k_s * k_s * lam / (emax * emax)


def estimate_center(y, bounds):
    """Mean parameter of the censored-normal MLE (naive mean on failure)."""
    try:
        fit = fit_linear_tobit(None, y, bounds)
        if fit.converged:
            return float(fit.beta[0])
    except ValueError:
        pass
    warnings.warn("censored-normal MLE failed; centering on the sample mean",
                  CalibrationWarning, stacklevel=2)
    return float(np.mean(y))


def calibrate(X, y, bounds, error_model="normal", method=None, nu=None, q=None, k_s=10.0):
    """Full set of calibrated hyperparameters (original outcome scale).

    Unspecified ``nu``, ``q`` and ``method`` take the defaults of the error
    model: (3, 0.95, 'cens') for normal errors and (10, 0.9, 'tobit') for
    the Dirichlet-process mixture.
    """
    if error_model not in DEFAULTS:
        raise ValueError(f"error_model must be one of {tuple(DEFAULTS)}")
    d_nu, d_q, d_method = DEFAULTS[error_model]
    nu = d_nu if nu is None else float(nu)
    q = d_q if q is None else float(q)
    method = d_method if method is None else method
    bounds = as_bounds(bounds)
    y = np.asarray(y, dtype=float)
    sigma_hat, used = _sigma_hat(X, y, bounds, method)
    if not sigma_hat > 0:
        raise ValueError("outcome has zero spread; cannot calibrate the error prior")
    lam = solve_lambda(sigma_hat, q, nu)
    center = estimate_center(y, bounds)

    # k0 is calibrated from linear Tobit residuals (OLS residuals if that fails)
    resid = None
    try:
        fit = fit_linear_tobit(X, y, bounds)
        if fit.converged:
            resid = y - fit.predict(X)
    except ValueError:
        pass
    if resid is None:
        n = y.size
        D = np.ones((n, 1)) if X is None else np.column_stack([np.ones(n), _design(X)])
        resid = y - D @ np.linalg.lstsq(D, y, rcond=None)[0]
    k0 = solve_k0(lam, resid, k_s) if np.any(resid != 0) else 1.0
    return CalibratedPriors(sigma_hat=sigma_hat, sigma_hat_method=used, lam=lam, q=q, nu=nu,
                            center=center, k0=k0, k_s=k_s, residuals=resid)

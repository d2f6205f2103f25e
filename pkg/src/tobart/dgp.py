"""Synthetic censored-outcome designs, evaluation metrics and a replication harness.

Prediction designs draw p = 30 covariates, 500 training and 500 test rows;
censoring limits are empirical percentiles of the training latent outcomes
and are applied to both samples.  Treatment-effect designs draw 200 rows
censored at the 15th and 85th percentiles.
"""

from __future__ import annotations

import json
import math
import platform
from dataclasses import asdict, dataclass, replace

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import expit, ndtr

from . import __version__
from .calibration import calibrate, fit_linear_tobit
from .causal import CausalDataset, estimate_cate, interval_metrics, pehe
from .predict import censored_expectation, censoring_probs, posterior_predict
from .sampler import ChainConfig, run_chain
from .stats_core import INTERIOR, CensoringBounds, rng_stream, sample_error_dist

PREDICTION_DGPS = ("friedman", "friedman-1side", "groot", "sigrist", "jacobson")
CAUSAL_DGPS = ("caron", "friedberg", "nie-A", "nie-B", "nie-C", "nie-D")
METHODS = ("tobart", "tobart-np", "soft-tobart", "soft-tobart-np", "bart-naive", "linear-tobit")

# (lower percentile, upper percentile); None means no censoring on that side
_CENSOR = {
    "friedman": (15.0, 85.0),
    "friedman-1side": (15.0, None),
    "groot": (40.0, None),
    "sigrist": (None, 95.0),
    "jacobson": (25.0, None),
}
_DEFAULT_P = {"caron": 10, "friedberg": 20, "nie-A": 12, "nie-B": 12, "nie-C": 12, "nie-D": 12}


# --------------------------------------------------------------------------
# mean surfaces


def friedman_mean(X):
    return (10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2
            + 10 * X[:, 3] + 5 * X[:, 4])


def groot_mean(X):
    x = X[:, 0]
    return 6 * (x - 2) ** 2 * np.sin(2 * (6 * x - 2))


def sigrist_mean(X):
    out = 0.3 * np.maximum(X[:, :5], 0).sum(axis=1)
    for k in range(3):
        for j in range(k + 1, 4):
            out += np.maximum(X[:, k] * X[:, j], 0)
    return out


def jacobson_mean(X):
    return 3 + 5 * X[:, 0] + X[:, 1] + X[:, 2] / 2 - 2 * X[:, 3] + X[:, 4] / 10


MEAN_FUNCTIONS = {"friedman": friedman_mean, "friedman-1side": friedman_mean,
                  "groot": groot_mean, "sigrist": sigrist_mean, "jacobson": jacobson_mean}


def caron_covariance(p=10):
    j = np.arange(p)
    d = np.abs(j[:, None] - j[None, :])
    return 0.6 ** d + 0.1 * (d != 0)


def _causal_surfaces(name, X):
    """(propensity, mu, tau) for a treatment-effect design."""
    x1, x2, x3 = X[:, 0], X[:, 1], X[:, 2]
    if name == "caron":
        pi = ndtr(-0.4 + 0.3 * x1 + 0.2 * x2)
        mu = 3 + x1 + 0.8 * np.sin(x2) + 0.7 * x3 * X[:, 3] - X[:, 4]
        tau = 2 + 0.8 * x1 - 0.3 * x2 ** 2
    elif name == "friedberg":
        pi = np.full(X.shape[0], 0.5)
        mu = np.zeros(X.shape[0])
        tau = (1 + expit(20 * (x1 - 1 / 3))) * (1 + expit(20 * (x2 - 1 / 3)))
    elif name == "nie-A":
        pi = np.clip(np.sin(np.pi * x1 * x2), 0.1, 0.9)
        mu = np.sin(np.pi * x1 * x2) + 2 * (x3 - 0.5) ** 2 + X[:, 3] + 0.5 * X[:, 4]
        tau = (x1 + x2) / 2
    elif name == "nie-B":
        pi = np.full(X.shape[0], 0.5)
        mu = np.maximum.reduce([x1 + x2, x3, np.zeros_like(x1)])
        tau = x1 + np.log1p(np.exp(x2))
    elif name == "nie-C":
        pi = 1 / (1 + np.exp(x2 + x3))
        mu = 2 * np.log1p(np.exp(x1 + x2 + x3))
        tau = np.ones(X.shape[0])
    elif name == "nie-D":
        pi = 1 / (1 + np.exp(-x1) + np.exp(-x2))
        s1 = np.maximum(x1 + x2 + x3, 0)
        s2 = np.maximum(X[:, 3] + X[:, 4], 0)
        mu = 0.5 * (s1 + s2)
        tau = s1 - s2
    else:
        raise ValueError(f"unknown causal design {name!r}")
    return pi, mu, tau


# --------------------------------------------------------------------------
# specs and datasets


@dataclass(frozen=True)
class DgpSpec:
    """One simulation design.

    Unset fields take the design's defaults: p = 30 (10 Caron, 20
    Friedberg, 12 Nie), 500/500 rows for prediction and 200 rows for
    treatment effects, and the design's censoring percentiles.
    """

    name: str
    n_train: int | None = None
    n_test: int | None = None
    p: int | None = None
    error: str = "normal"
    error_params: tuple = ()
    censor_lower: float | None = None
    censor_upper: float | None = None
    seed: int = 0
    use_default_censoring: bool = True

    @property
    def causal(self):
        return self.name in CAUSAL_DGPS

    def resolved(self):
        """Spec with all defaults filled in (validated)."""
        if self.name not in PREDICTION_DGPS + CAUSAL_DGPS:
            raise ValueError(f"unknown design {self.name!r}")
        causal = self.causal
        n_train = self.n_train or (200 if causal else 500)
        n_test = self.n_test if self.n_test is not None else (0 if causal else 500)
        p = self.p or _DEFAULT_P.get(self.name, 30)
        lo, hi = self.censor_lower, self.censor_upper
        if self.use_default_censoring and lo is None and hi is None:
            lo, hi = (15.0, 85.0) if causal else _CENSOR[self.name]
        for q in (lo, hi):
            if q is not None and not 0.0 <= q <= 100.0:
                raise ValueError("censoring percentiles must lie in [0, 100]")
        if lo is not None and hi is not None and not lo < hi:
            raise ValueError("lower censoring percentile must be below the upper one")
        if p < 5 or n_train < 2:
            raise ValueError("need p >= 5 and at least two training rows")
        return replace(self, n_train=n_train, n_test=n_test, p=p, censor_lower=lo,
                       censor_upper=hi, use_default_censoring=False)

    def to_dict(self):
        d = asdict(self)
        d["error_params"] = dict(self.error_params)
        return d


@dataclass
class Dataset:
    """Generated sample; ``*_test`` fields are empty for causal designs."""

    spec: DgpSpec
    X: np.ndarray
    ystar: np.ndarray
    y: np.ndarray
    status: np.ndarray
    mean: np.ndarray
    bounds: CensoringBounds
    X_test: np.ndarray
    ystar_test: np.ndarray
    y_test: np.ndarray
    status_test: np.ndarray
    mean_test: np.ndarray
    T: np.ndarray | None = None
    tau: np.ndarray | None = None
    mu: np.ndarray | None = None
    propensity: np.ndarray | None = None

    def causal_data(self):
        return CausalDataset(self.X, self.T, self.y, self.bounds, tau=self.tau, mu=self.mu)

    def to_frame(self, test=False):
        X = self.X_test if test else self.X
        df = pd.DataFrame(X, columns=[f"x{j + 1}" for j in range(X.shape[1])])
        if self.T is not None and not test:
            df["treatment"] = self.T
        df["y"] = self.y_test if test else self.y
        df["ystar"] = self.ystar_test if test else self.ystar
        df["status"] = self.status_test if test else self.status
        if self.tau is not None and not test:
            df["tau"] = self.tau
            df["mu"] = self.mu
        return df


def _errors(rng, spec, n):
    params = dict(spec.error_params)
    if spec.error == "normal" and params.get("sigma", 1.0) == 0.0:
        return np.zeros(n)
    return sample_error_dist(rng, spec.error, n, **params)


def generate(spec, rng=None):
    """Draw a dataset for ``spec`` (``rng`` defaults to the spec's seed)."""
    spec = spec.resolved()
    rng = rng_stream(spec.seed) if rng is None else rng
    n, m, p = spec.n_train, spec.n_test, spec.p
    T = tau = mu = pi = None
    if spec.causal:
        if spec.name == "caron":
            X = rng.multivariate_normal(np.zeros(p), caron_covariance(p), size=n)
        elif spec.name in ("friedberg", "nie-A"):
            X = rng.random((n, p))
        else:
            X = rng.standard_normal((n, p))
        pi, mu, tau = _causal_surfaces(spec.name, X)
        T = (rng.random(n) < pi).astype(np.int64)
        shift = T - 0.5 if spec.name.startswith("nie") else T
        mean = mu + tau * shift
        X_test = np.empty((0, p))
        mean_test = np.empty(0)
    else:
        lo_x = -1.0 if spec.name == "sigrist" else 0.0
        X = rng.uniform(lo_x, 1.0, (n, p))
        X_test = rng.uniform(lo_x, 1.0, (m, p))
        f = MEAN_FUNCTIONS[spec.name]
        mean, mean_test = f(X), f(X_test)
    ystar = mean + _errors(rng, spec, n)
    ystar_test = mean_test + _errors(rng, spec, mean_test.shape[0])
    a = -math.inf if spec.censor_lower is None else float(np.percentile(ystar, spec.censor_lower))
    b = math.inf if spec.censor_upper is None else float(np.percentile(ystar, spec.censor_upper))
    bounds = CensoringBounds(a, b)
    y, y_test = bounds.censor(ystar), bounds.censor(ystar_test)
    return Dataset(spec=spec, X=X, ystar=ystar, y=y, status=bounds.classify(y), mean=mean,
                   bounds=bounds, X_test=X_test, ystar_test=ystar_test, y_test=y_test,
                   status_test=bounds.classify(y_test), mean_test=mean_test, T=T, tau=tau,
                   mu=mu, propensity=pi)


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    mse: float
    brier: float = math.nan
    auc: float = math.nan
    coverage: float = math.nan
    length: float = math.nan


def auc_score(scores, labels):
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n1 = labels.sum()
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return math.nan
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def brier_score(probs, labels):
    probs = np.asarray(probs, dtype=float)
    return float(np.mean((probs - np.asarray(labels, dtype=float)) ** 2))


def metrics(predictions, dataset):
    """Test-set metrics from a :func:`posterior_predict`-style table."""
    y, status, ystar = dataset.y_test, dataset.status_test, dataset.ystar_test
    if len(predictions) != y.shape[0]:
        raise ValueError("predictions are not aligned with the test rows")
    ey = predictions["ey_mean"].to_numpy()
    out = Metrics(mse=float(np.mean((ey - y) ** 2)))
    if "p_below" in predictions and predictions["p_below"].notna().all():
        pc = (predictions["p_below"] + predictions["p_above"]).to_numpy()
        lab = status != INTERIOR
        out.brier = brier_score(pc, lab)
        out.auc = auc_score(pc, lab)
    if "latent_lower" in predictions and predictions["latent_lower"].notna().all():
        lo = predictions["latent_lower"].to_numpy()
        hi = predictions["latent_upper"].to_numpy()
        out.coverage = float(np.mean((lo <= ystar) & (ystar <= hi)))
        out.length = float(np.mean(hi - lo))
    return out


# --------------------------------------------------------------------------
# methods


def _chain_config(method, base):
    mode = "soft" if method.startswith("soft") else "hard"
    err = "dp" if method.endswith("-np") else "normal"
    return replace(base, mode=mode, error_model=err)


def predict_method(method, data, config=None, level=0.95):
    """Test-set prediction table for one method on a prediction dataset."""
    config = config or ChainConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    bounds = data.bounds
    if method == "linear-tobit":
        fit = fit_linear_tobit(data.X, data.y, bounds)
        loc = fit.predict(data.X_test)
        pb, pa = censoring_probs(loc, 0.0, fit.sigma, bounds)
        z = stats.norm.ppf(0.5 + level / 2)
        lo, hi = loc - z * fit.sigma, loc + z * fit.sigma
        return pd.DataFrame({"row_id": np.arange(loc.size), "f_mean": loc,
                             "ey_mean": censored_expectation(loc, 0.0, fit.sigma, bounds),
                             "p_below": pb, "p_above": pa, "latent_lower": lo,
                             "latent_upper": hi, "obs_lower": bounds.censor(lo),
                             "obs_upper": bounds.censor(hi), "level": level})
    rng = rng_stream(config.seed, config.stream_id + 1)
    if method == "bart-naive":
        cfg = replace(config, mode="hard", error_model="normal")
        nb = CensoringBounds()
        calib = calibrate(data.X, data.y, nb, "normal")
        post = run_chain(data.X, data.y, nb, cfg, calib, test_X=data.X_test)
        pred = posterior_predict(post, nb, level=level, rng=rng)
        # the naive model predicts the recorded outcome directly and gives no
        # censoring probabilities
        pred["p_below"] = np.nan
        pred["p_above"] = np.nan
        return pred
    cfg = _chain_config(method, config)
    post = run_chain(data.X, data.y, bounds, cfg, test_X=data.X_test)
    return posterior_predict(post, bounds, level=level, rng=rng)


def causal_method(method, data, config=None, level=0.95):
    """(PEHE, coverage, length) for one method on a treatment-effect dataset."""
    config = config or ChainConfig()
    cd = data.causal_data()
    if method == "bart-naive":
        res = estimate_cate(cd, replace(config, mode="hard", error_model="normal"), level=level,
                            naive=True)
    elif method == "linear-tobit":
        XT = np.column_stack([cd.X, cd.T])
        fit = fit_linear_tobit(XT, cd.y, cd.bounds)
        est = np.full(cd.X.shape[0], fit.beta[-1])
        return pehe(est, cd.tau), math.nan, math.nan
    else:
        res = estimate_cate(cd, _chain_config(method, config), level=level)
    cov, length = interval_metrics(res.draws, cd.tau, level)
    return pehe(res.mean, cd.tau), cov, length


def replicate(spec, methods=("tobart",), repetitions=5, config=None, seeds=None,
              progress=None):
    """Run every method on ``repetitions`` seeded datasets.

    Returns a long table with one row per (seed, method).  Use
    :func:`summarize` for the per-method averages.
    """
    config = config or ChainConfig()
    for meth in methods:
        if meth not in METHODS:
            raise ValueError(f"unknown method {meth!r}")
    seeds = list(range(spec.seed, spec.seed + repetitions)) if seeds is None else list(seeds)
    rows = []
    for s in seeds:
        data = generate(replace(spec, seed=s))
        for meth in methods:
            cfg = replace(config, seed=s)
            if spec.causal:
                pe, cov, length = causal_method(meth, data, cfg)
                rows.append({"dgp": spec.name, "error": spec.error, "seed": s, "method": meth,
                             "pehe": pe, "coverage": cov, "length": length})
            else:
                met = metrics(predict_method(meth, data, cfg), data)
                rows.append({"dgp": spec.name, "error": spec.error, "seed": s, "method": meth,
                             **asdict(met)})
            if progress is not None:
                progress(rows[-1])
    return pd.DataFrame(rows)


def summarize(results):
    """Per-method means in a Table-style wide layout (metrics as rows)."""
    num = results.drop(columns=["seed"]).groupby(["dgp", "error", "method"], sort=False).mean()
    return num.reset_index().set_index("method").drop(columns=["dgp", "error"]).T


def run_manifest(spec, methods, config, seeds):
    """Machine-readable description of a replication run."""
    return json.dumps({
        "spec": spec.to_dict(), "methods": list(methods), "config": config.to_dict(),
        "seeds": list(seeds), "version": __version__, "numpy": np.__version__,
        "python": platform.python_version(),
    }, indent=2, sort_keys=True)

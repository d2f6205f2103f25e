"""Gibbs sampler for Type-I Tobit BART with normal or DP-mixture errors.

Each iteration

1. imputes latent outcomes for censored rows from truncated normals,
2. runs one backfitting sweep over the trees (plus splitting-probability,
   sparsity and bandwidth updates when enabled),
3. updates the error model: an inverse-gamma draw of sigma^2, or the
   Polya-urn assignment, remix and concentration steps of the DP mixture.

Internally the outcome is centred on the censored-normal mean estimate and
divided by the range of the observed outcomes, so the default leaf prior
sd 0.5 / (kappa sqrt(m)) applies.  Everything stored in
:class:`PosteriorDraws` is back on the original scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import __version__
from .calibration import calibrate
from .dp import BaseMeasure, DpState, dp_step
from .forest import ForestState, ForestTrace, backfit_sweep, update_split_probs, update_sparsity
from .stats_core import (AT_LOWER, AT_UPPER, INTERIOR, CensoringBounds, _truncnorm_many,
                         as_bounds, rng_stream)

MODES = ("hard", "soft")
ERROR_MODELS = ("normal", "dp")


@dataclass
class ObservedOutcome:
    """Observed outcomes with censoring status (-1 at a, 0 interior, 1 at b)."""

    y: np.ndarray
    status: np.ndarray

    @classmethod
    def from_values(cls, y, bounds):
        bounds = as_bounds(bounds)
        y = np.asarray(y, dtype=float)
        return cls(y, bounds.classify(y))

    def validate(self, bounds):
        a, b = as_bounds(bounds)
        st = self.status
        if np.any(~np.isin(st, (AT_LOWER, INTERIOR, AT_UPPER))):
            raise ValueError("unknown status code")
        if (np.any(self.y[st == AT_LOWER] != a) or np.any(self.y[st == AT_UPPER] != b)
                or np.any((self.y[st == INTERIOR] <= a) | (self.y[st == INTERIOR] >= b))):
            raise ValueError("status codes are inconsistent with the censoring limits")
        return self


@dataclass
class ChainConfig:
    """Run settings for one chain.

    ``m`` defaults to 200 hard or 25 soft trees.  Sparse splitting defaults
    on for soft trees and starts at half the burn-in.
    """

    burn_in: int = 1000
    draws: int = 1000
    thin: int = 1
    m: int | None = None
    mode: str = "hard"
    error_model: str = "normal"
    seed: int = 0
    stream_id: int = 0
    kappa: float = 2.0
    alpha_tree: float = 0.95
    beta_tree: float = 2.0
    min_leaf: int = 5
    sparse: bool | None = None
    sparse_start: int | None = None
    bw_prior_mean: float = 0.1
    bw_step: float = 0.3
    dp_alpha: float = 1.0
    dp_alpha_fixed: bool = False
    dp_c1: float = 2.0
    dp_c2: float = 2.0
    keep_forests: bool = False
    chains: int = 1

    def __post_init__(self):
        if self.burn_in < 0 or self.draws < 1 or self.thin < 1:
            raise ValueError("need burn_in >= 0, draws >= 1 and thin >= 1")
        if self.chains < 1:
            raise ValueError("chains must be at least 1")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.error_model not in ERROR_MODELS:
            raise ValueError(f"error_model must be one of {ERROR_MODELS}")

    @property
    def n_trees(self):
        if self.m is not None:
            return self.m
        return 200 if self.mode == "hard" else 25

    @property
    def n_records(self):
        """Retained draws per chain."""
        return self.draws // self.thin

    def to_dict(self):
        return asdict(self) | {"m": self.n_trees}


def draw_latent(rng, y, status, f, gamma, sigma, bounds):
    """Latent outcomes: y itself when interior, truncated normals when censored."""
    a, b = as_bounds(bounds)
    y = np.asarray(y, dtype=float)
    status = np.asarray(status)
    n = y.shape[0]
    loc = np.broadcast_to(np.asarray(f, dtype=float) + gamma, (n,))
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    if np.any(sig <= 0):
        raise ValueError("sigma must be positive")
    if np.any((status == AT_LOWER) & (y != a)) or np.any((status == AT_UPPER) & (y != b)):
        raise ValueError("censored status does not match the censoring limits")
    out = y.copy()
    cen = np.flatnonzero(status != INTERIOR)
    if cen.size:
        lo = np.where(status[cen] == AT_LOWER, -np.inf, b)
        hi = np.where(status[cen] == AT_LOWER, a, np.inf)
        draws = np.empty(cen.size)
        _truncnorm_many(rng, np.ascontiguousarray(loc[cen]), np.ascontiguousarray(sig[cen]),
                        lo, hi, draws)
        out[cen] = draws
    return out


def draw_sigma2(rng, residuals, nu, lam):
    """sigma^2 ~ IG((n + nu) / 2, (SSR + nu * lambda) / 2)."""
    if nu <= 0 or lam <= 0:
        raise ValueError("nu and lambda must be positive")
    r = np.asarray(residuals, dtype=float)
    shape = 0.5 * (r.size + nu)
    scale = 0.5 * (float(r @ r) + nu * lam)
    return scale / rng.gamma(shape, 1.0)


@dataclass
class PosteriorDraws:
    """Retained draws, on the original outcome scale.

    ``f_train`` and ``f_test`` are (draws, rows).  Normal errors store
    ``sigma`` per draw; the DP mixture stores per-row ``train_gamma`` and
    ``train_sigma`` plus the live clusters of each draw in ``clusters``.
    """

    f_train: np.ndarray
    f_test: np.ndarray | None
    bounds: CensoringBounds
    error_model: str
    sigma: np.ndarray | None = None
    train_gamma: np.ndarray | None = None
    train_sigma: np.ndarray | None = None
    clusters: list = field(default_factory=list)
    dp_base: BaseMeasure | None = None
    forests: ForestTrace | None = None
    center: float = 0.0
    scale: float = 1.0
    metadata: dict = field(default_factory=dict)
    move_stats: np.ndarray | None = None

    @property
    def n_draws(self):
        return self.f_train.shape[0]

    @property
    def dp_k(self):
        return np.array([c["size"].size for c in self.clusters])

    @property
    def dp_alpha(self):
        return np.array([c["alpha"] for c in self.clusters])

    @property
    def dp_largest_share(self):
        return np.array([c["size"].max() / c["size"].sum() for c in self.clusters])

    def to_frame(self, rows="test"):
        """Long table: iteration, row_id, f and the error-state summary."""
        f = self.f_test if rows == "test" else self.f_train
        if f is None:
            raise ValueError(f"no {rows} rows were recorded")
        D, n = f.shape
        cols = {"iteration": np.repeat(np.arange(D), n), "row_id": np.tile(np.arange(n), D),
                "f": f.ravel()}
        if self.error_model == "normal":
            cols["sigma"] = np.repeat(self.sigma, n)
        else:
            if rows == "train":
                cols["gamma"] = self.train_gamma.ravel()
                cols["sigma"] = self.train_sigma.ravel()
            cols["dp_k"] = np.repeat(self.dp_k, n)
            cols["dp_alpha"] = np.repeat(self.dp_alpha, n)
            cols["dp_largest_share"] = np.repeat(self.dp_largest_share, n)
        return pd.DataFrame(cols)

    def write_csv(self, path, rows="test"):
        self.to_frame(rows).to_csv(path, index=False, float_format="%.17g")

    def metadata_text(self):
        """Plain-text chain metadata (one key=value per line)."""
        lines = [f"{k}={json.dumps(v, sort_keys=True)}" for k, v in self.metadata.items()]
        if self.error_model == "dp" and self.clusters:
            lines.append(f"dp_k_trace={json.dumps(self.dp_k.tolist())}")
            lines.append(f"dp_alpha_trace={json.dumps(self.dp_alpha.tolist())}")
            lines.append(f"dp_largest_share_trace={json.dumps(self.dp_largest_share.tolist())}")
        return "\n".join(lines) + "\n"


class TobartSampler:
    """State and transitions of one chain; :meth:`run` collects the draws."""

    def __init__(self, X, y, bounds, config=None, calib=None, test_X=None, rng=None, chain=0):
        self.config = config = config or ChainConfig()
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        n, p = X.shape
        if n < 10 or p < 1:
            raise ValueError("need at least 10 rows and one covariate")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates must be finite")
        self.bounds = bounds = as_bounds(bounds)
        obs = y if isinstance(y, ObservedOutcome) else ObservedOutcome.from_values(y, bounds)
        obs.validate(bounds)
        if obs.y.shape != (n,):
            raise ValueError("outcome length does not match X")
        if not np.any(obs.status == INTERIOR):
            raise ValueError("every outcome is censored; the model is not identified")
        self.X, self.obs = X, obs
        self.test_X = None
        if test_X is not None:
            self.test_X = np.ascontiguousarray(np.atleast_2d(test_X), dtype=float)
            if self.test_X.shape[1] != p or not np.all(np.isfinite(self.test_X)):
                raise ValueError("test covariates must be finite with the training columns")
        self.calib = calib or calibrate(X, obs.y, bounds, config.error_model)

        yr = obs.y.max() - obs.y.min()
        self.center = float(self.calib.center)
        self.scale = float(yr) if yr > 0 else float(self.calib.sigma_hat)
        self.y_int = (obs.y - self.center) / self.scale
        self.b_int = CensoringBounds((bounds.a - self.center) / self.scale,
                                     (bounds.b - self.center) / self.scale)
        self.nu = float(self.calib.nu)
        self.lam = float(self.calib.lam) / self.scale ** 2
        sig0 = float(self.calib.sigma_hat) / self.scale

        self.chain = chain
        self.rng = rng if rng is not None else rng_stream(config.seed, config.stream_id, chain)
        self.forest = ForestState.init(
            X, m=config.n_trees, mode=config.mode, kappa=config.kappa,
            alpha_tree=config.alpha_tree, beta_tree=config.beta_tree, min_leaf=config.min_leaf,
            sparse=config.sparse, bw_prior_mean=config.bw_prior_mean, bw_step=config.bw_step)
        self.sigma = sig0
        self.ystar = self.y_int.copy()
        st = obs.status
        self.ystar[st == AT_LOWER] = self.b_int.a - 0.5 * sig0
        self.ystar[st == AT_UPPER] = self.b_int.b + 0.5 * sig0
        self.dp = None
        if config.error_model == "dp":
            k0 = self.calib.k0 if self.calib.k0 is not None else 1.0
            base = BaseMeasure(nu=self.nu, lam=self.lam, gamma0=0.0, k0=k0, k_s=self.calib.k_s)
            self.dp = DpState.single_cluster(n, sig0, base, alpha=config.dp_alpha,
                                             c1=config.dp_c1, c2=config.dp_c2)
        self.iteration = 0

    # ------------------------------------------------------------ helpers
    def error_params(self):
        """Per-row (gamma, sigma) on the internal scale."""
        if self.dp is None:
            n = self.X.shape[0]
            return np.zeros(n), np.full(n, self.sigma)
        return self.dp.member_params()

    @property
    def sparse_start(self):
        c = self.config
        return c.burn_in // 2 if c.sparse_start is None else c.sparse_start

    def step(self):
        """One full Gibbs iteration."""
        rng, forest = self.rng, self.forest
        gamma, sig = self.error_params()
        self.ystar = draw_latent(rng, self.y_int, self.obs.status, forest.fitted, gamma, sig,
                                 self.b_int)
        backfit_sweep(rng, forest, self.X, self.ystar, sig, gamma)
        if forest.sparse and self.iteration >= self.sparse_start:
            update_split_probs(rng, forest)
            update_sparsity(rng, forest)
        u = self.ystar - forest.fitted
        if self.dp is None:
            self.sigma = math.sqrt(draw_sigma2(rng, u, self.nu, self.lam))
        else:
            dp_step(rng, self.dp, u, update_alpha=not self.config.dp_alpha_fixed)
        self.iteration += 1

    def run(self, progress=None):
        """Burn in, then retain every ``thin``-th of ``draws`` iterations."""
        c = self.config
        D = c.n_records
        n = self.X.shape[0]
        f_train = np.empty((D, n))
        f_test = None if self.test_X is None else np.empty((D, self.test_X.shape[0]))
        sigma = np.empty(D) if self.dp is None else None
        tg = ts = None
        clusters = []
        if self.dp is not None:
            tg, ts = np.empty((D, n)), np.empty((D, n))
        trace = ForestTrace(c.mode, self.X.shape[1]) if c.keep_forests else None
        s = self.scale
        rec = 0
        for it in range(c.burn_in + D * c.thin):
            self.step()
            if progress is not None:
                progress(it)
            post = it - c.burn_in
            if post < 0 or (post + 1) % c.thin:
                continue
            f_train[rec] = self.center + s * self.forest.fitted
            if f_test is not None:
                f_test[rec] = self.center + s * self.forest.predict(self.test_X)
            if self.dp is None:
                sigma[rec] = s * self.sigma
            else:
                g, sg = self.dp.member_params()
                tg[rec], ts[rec] = s * g, s * sg
                snap = self.dp.snapshot()
                snap["gamma"] = s * snap["gamma"]
                snap["sigma"] = s * snap["sigma"]
                clusters.append(snap)
            if trace is not None:
                trace.append(self.forest)
            rec += 1
        meta = {"seed": c.seed, "stream_id": c.stream_id, "chain": self.chain,
                "config": c.to_dict(),
                "calibration": self.calib.to_dict(), "center": self.center,
                "scale": self.scale, "bounds": [self.bounds.a, self.bounds.b],
                "version": __version__}
        return PosteriorDraws(
            f_train=f_train, f_test=f_test, bounds=self.bounds, error_model=c.error_model,
            sigma=sigma, train_gamma=tg, train_sigma=ts, clusters=clusters,
            dp_base=None if self.dp is None else self.dp.base.scaled(s), forests=trace,
            center=self.center, scale=s, metadata=meta, move_stats=self.forest.move_stats.copy())


def merge_draws(posts):
    """Pool the draws of chains fitted to the same data, in chain order."""
    posts = list(posts)
    if not posts:
        raise ValueError("nothing to merge")
    first = posts[0]
    if len(posts) == 1:
        return first
    if any(p.error_model != first.error_model or p.f_train.shape[1] != first.f_train.shape[1]
           or p.center != first.center or p.scale != first.scale for p in posts):
        raise ValueError("chains disagree on data, scaling or error model")

    def cat(name):
        parts = [getattr(p, name) for p in posts]
        return None if parts[0] is None else np.concatenate(parts)

    forests = None
    if first.forests is not None:
        forests = ForestTrace(first.forests.mode, first.forests.p,
                              [s for p in posts for s in p.forests.snapshots])
    meta = dict(first.metadata)
    meta["chains"] = len(posts)
    meta.pop("chain", None)
    return PosteriorDraws(
        f_train=cat("f_train"), f_test=cat("f_test"), bounds=first.bounds,
        error_model=first.error_model, sigma=cat("sigma"), train_gamma=cat("train_gamma"),
        train_sigma=cat("train_sigma"), clusters=[c for p in posts for c in p.clusters],
        dp_base=first.dp_base, forests=forests, center=first.center, scale=first.scale,
        metadata=meta, move_stats=np.sum([p.move_stats for p in posts], axis=0))


def run_chain(X, y, bounds, config=None, calib=None, test_X=None):
    """Run ``config.chains`` chains and return their pooled :class:`PosteriorDraws`.

    Chain c draws from stream ``(seed, stream_id, c)``; all chains share one
    calibration.
    """
    config = config or ChainConfig()
    first = TobartSampler(X, y, bounds, config, calib, test_X)
    posts = [first.run()]
    for c in range(1, config.chains):
        posts.append(TobartSampler(X, y, bounds, config, first.calib, test_X, chain=c).run())
    return merge_draws(posts)


def fit_naive_bart(X, y, config=None, test_X=None):
    """Plain BART that treats censored values as exact observations."""
    config = config or ChainConfig()
    y = np.asarray(y, dtype=float)
    calib = calibrate(X, y, None, "normal", method=None)
    return run_chain(X, y, None, config, calib, test_X)

"""Command-line entry point: ``tobart {fit,predict,simulate,replicate}``.

Options can also come from a flat ``key=value`` file passed with
``--config``; command-line flags win over file values.  Every command
writes ``manifest.txt`` to its output directory, and that file is itself a
valid ``--config`` input that reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd

from . import __version__
from .calibration import SIGMA_METHODS, calibrate
from .causal import CausalDataset, estimate_cate
from .dgp import CAUSAL_DGPS, METHODS, PREDICTION_DGPS, DgpSpec, generate, replicate, summarize
from .forest import ForestTrace
from .predict import posterior_predict
from .sampler import ChainConfig, PosteriorDraws, run_chain
from .dp import BaseMeasure
from .stats_core import CensoringBounds, ERROR_KINDS, rng_stream

COMMANDS = ("fit", "predict", "simulate", "replicate")


class UsageError(ValueError):
    """Invalid command-line or config-file input."""


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    test_data: str | None = None
    model: str | None = None
    outcome: str | None = None
    treatment: str | None = None
    lower: float = -math.inf
    upper: float = math.inf
    mode: str = "hard"
    error: str = "normal"
    trees: int | None = None
    burnin: int = 1000
    draws: int = 1000
    thin: int = 1
    chains: int = 1
    seed: int = 0
    calib: str | None = None
    level: float = 0.95
    out: str = "."
    dgp: str | None = None
    methods: str = "tobart"
    reps: int = 5
    n_train: int | None = None
    n_test: int | None = None
    p: int | None = None
    noise: str = "normal"
    sigma: float = 1.0
    suggest_bounds: bool = False

    def chain_config(self):
        return ChainConfig(burn_in=self.burnin, draws=self.draws, thin=self.thin, m=self.trees,
                           mode=self.mode, error_model=self.error, seed=self.seed,
                           chains=self.chains, keep_forests=self.command == "fit")

    @property
    def bounds(self):
        return CensoringBounds(self.lower, self.upper)

    def manifest(self):
        """Effective configuration as ``key=value`` lines (command first)."""
        lines = [f"command={self.command}"]
        for f in fields(self):
            if f.name == "command":
                continue
            v = getattr(self, f.name)
            if v is None or f.name == "suggest_bounds":
                continue
            lines.append(f"{f.name}={_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _parse_bound(text):
    t = str(text).strip().lower()
    if t in ("-inf", "-infinity"):
        return -math.inf
    if t in ("inf", "+inf", "infinity"):
        return math.inf
    return float(t)


_CONVERTERS = {
    "lower": _parse_bound, "upper": _parse_bound, "trees": int, "burnin": int, "draws": int,
    "thin": int, "chains": int, "seed": int, "level": float, "reps": int, "n_train": int, "n_test": int,
    "p": int, "sigma": float,
}
_CHOICES = {
    "command": COMMANDS, "mode": ("hard", "soft"), "error": ("normal", "dp"),
    "calib": SIGMA_METHODS, "dgp": PREDICTION_DGPS + CAUSAL_DGPS, "noise": ERROR_KINDS,
}


def _convert(key, raw):
    try:
        val = _CONVERTERS.get(key, str)(raw)
    except (TypeError, ValueError):
        raise UsageError(f"invalid value {raw!r} for {key}") from None
    if key in _CHOICES and val not in _CHOICES[key]:
        raise UsageError(f"invalid value {raw!r} for {key}; choose from {_CHOICES[key]}")
    return val


def read_config_file(path):
    """Flat ``key=value`` file; blank lines and ``#`` comments ignored."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _convert(key, val)
    return out


def _build_parser():
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="tobart", description=__doc__.splitlines()[0],
                                argument_default=S)
    p.add_argument("command", nargs="?", choices=COMMANDS, default=None)
    p.add_argument("--config", help="flat key=value file; flags override its values")
    p.add_argument("--data", help="training CSV (fit) or rows to predict (predict)")
    p.add_argument("--test-data", dest="test_data", help="optional test CSV for fit")
    p.add_argument("--model", help="output directory of a previous fit (predict)")
    p.add_argument("--outcome", help="outcome column name")
    p.add_argument("--treatment", help="binary treatment column (fit estimates CATEs)")
    p.add_argument("--lower", help="lower censoring limit a (-inf for none)")
    p.add_argument("--upper", help="upper censoring limit b (inf for none)")
    p.add_argument("--mode", help="hard or soft trees")
    p.add_argument("--error", help="normal or dp errors")
    p.add_argument("--trees", help="number of trees (default 200 hard / 25 soft)")
    p.add_argument("--burnin", help="burn-in iterations")
    p.add_argument("--draws", help="retained-phase iterations")
    p.add_argument("--thin", help="thinning interval")
    p.add_argument("--chains", help="independent chains pooled in chain order")
    p.add_argument("--seed", help="random seed")
    p.add_argument("--calib", help="sigma-hat method: naive, tobit, cens or lm")
    p.add_argument("--level", help="interval level")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dgp", help="simulation design (simulate/replicate)")
    p.add_argument("--methods", help="comma-separated methods (replicate)")
    p.add_argument("--reps", help="repetitions (replicate)")
    p.add_argument("--n-train", dest="n_train")
    p.add_argument("--n-test", dest="n_test")
    p.add_argument("--p", dest="p", help="number of covariates")
    p.add_argument("--noise", help="error distribution for simulated data")
    p.add_argument("--sigma", help="normal error sd for simulated data")
    p.add_argument("--suggest-bounds", dest="suggest_bounds", action="store_true",
                   help="print candidate censoring limits for --outcome and exit")
    p.add_argument("--version", action="version", version=f"tobart {__version__}")
    return p


def parse_config(argv):
    """RunConfig from defaults, then ``--config`` file values, then flags."""
    parser = _build_parser()
    argv = list(argv)
    # argparse would read "-inf" as an option; bind it to its flag first
    for i in range(len(argv) - 1):
        if argv[i] in ("--lower", "--upper") and argv[i + 1].lower().startswith("-inf"):
            argv[i:i + 2] = [f"{argv[i]}={argv[i + 1]}", ""]
    argv = [a for a in argv if a != ""]
    try:
        ns = vars(parser.parse_args(argv))
    except SystemExit as exc:
        if exc.code == 0:  # --help / --version
            raise
        raise UsageError("could not parse the command line") from exc
    values = {}
    cfg_path = ns.pop("config", None)
    suggest = ns.pop("suggest_bounds", False)
    if cfg_path:
        values.update(read_config_file(cfg_path))
    if ns.get("command") is None:
        ns.pop("command")
    for key, raw in ns.items():
        values[key] = _convert(key, raw) if key != "command" else raw
    if "command" not in values:
        raise UsageError("missing command (fit, predict, simulate or replicate)")
    values.pop("suggest_bounds", None)
    cfg = RunConfig(**values, suggest_bounds=suggest)
    for key in ("trees", "burnin", "draws", "thin", "chains", "reps"):
        v = getattr(cfg, key)
        if v is not None and v < (0 if key == "burnin" else 1):
            raise UsageError(f"invalid value {v} for {key}")
    if not 0.0 < cfg.level < 1.0:
        raise UsageError("level must lie strictly between 0 and 1")
    if not cfg.lower < cfg.upper:
        raise UsageError("lower must be below upper")
    if cfg.command == "fit":
        if cfg.data is None:
            raise UsageError("fit requires --data")
        if cfg.outcome is None:
            raise UsageError("fit requires --outcome")
    if cfg.command == "predict" and (cfg.data is None or cfg.model is None):
        raise UsageError("predict requires --data and --model")
    if cfg.command in ("simulate", "replicate") and cfg.dgp is None:
        raise UsageError(f"{cfg.command} requires --dgp")
    if cfg.command == "replicate":
        bad = [m for m in cfg.methods.split(",") if m not in METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}; choose from {METHODS}")
    return cfg


# --------------------------------------------------------------------------
# data ingestion


@dataclass
class Ingested:
    X: np.ndarray
    y: np.ndarray | None
    status: np.ndarray | None
    T: np.ndarray | None
    schema: dict = field(default_factory=dict)


def _encode(df, schema=None):
    """Numeric passthrough and one-hot dummies (sorted categories)."""
    if schema is None:
        schema = {"columns": []}
        for col in df.columns:
            if pd.api.types.is_numeric_dtype(df[col]):
                schema["columns"].append({"name": col, "kind": "numeric"})
            else:
                cats = sorted(df[col].astype(str).unique().tolist())
                schema["columns"].append({"name": col, "kind": "categorical",
                                          "categories": cats})
    parts, names = [], []
    for spec in schema["columns"]:
        col = spec["name"]
        if col not in df.columns:
            raise ValueError(f"column {col!r} missing from the data")
        if spec["kind"] == "numeric":
            try:
                vals = pd.to_numeric(df[col]).to_numpy(dtype=float)
            except (TypeError, ValueError):
                raise ValueError(f"column {col!r} must be numeric") from None
            parts.append(vals[:, None])
            names.append(col)
        else:
            s = df[col].astype(str)
            unknown = set(s) - set(spec["categories"])
            if unknown:
                raise ValueError(f"column {col!r} has unseen categories {sorted(unknown)}")
            for c in spec["categories"]:
                parts.append((s == c).to_numpy(dtype=float)[:, None])
                names.append(f"{col}={c}")
    X = np.hstack(parts) if parts else np.empty((len(df), 0))
    schema["features"] = names
    return X, schema


def ingest_csv(path, outcome=None, bounds=None, treatment=None, schema=None):
    """Read a CSV into covariates, outcome, status and treatment.

    String columns are one-hot encoded with categories in sorted order.
    Missing cells and outcomes outside the censoring limits are errors that
    name the offending row and column.
    """
    try:
        df = pd.read_csv(path, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: no header row") from None
    if df.columns.size == 0 or any(str(c).startswith("Unnamed:") for c in df.columns):
        raise ValueError(f"{path}: missing or incomplete header row")
    na = df.isna().to_numpy()
    if na.any():
        r, c = np.argwhere(na)[0]
        raise ValueError(f"{path}: missing value at row {r + 1}, column {df.columns[c]!r}")
    y = status = T = None
    drop = []
    if outcome is not None:
        if outcome not in df.columns:
            raise ValueError(f"{path}: outcome column {outcome!r} not found")
        try:
            y = pd.to_numeric(df[outcome]).to_numpy(dtype=float)
        except (TypeError, ValueError):
            raise ValueError(f"{path}: outcome column {outcome!r} is not numeric") from None
        b = CensoringBounds() if bounds is None else bounds
        bad = np.flatnonzero((y < b.a) | (y > b.b))
        if bad.size:
            raise ValueError(f"{path}: outcome {y[bad[0]]} at row {bad[0] + 1} lies outside "
                             f"the censoring limits [{b.a}, {b.b}]")
        status = b.classify(y)
        drop.append(outcome)
    if treatment is not None:
        if treatment not in df.columns:
            raise ValueError(f"{path}: treatment column {treatment!r} not found")
        T = pd.to_numeric(df[treatment], errors="coerce").to_numpy()
        if not np.all(np.isin(T, (0, 1))):
            raise ValueError(f"{path}: treatment column must be coded 0/1")
        T = T.astype(np.int64)
        drop.append(treatment)
    if schema is not None:
        drop = [c for c in df.columns if c not in {s["name"] for s in schema["columns"]}]
    X, schema = _encode(df.drop(columns=drop), schema)
    return Ingested(X=X, y=y, status=status, T=T, schema=schema)


def suggest_bounds(y):
    """Minimum and maximum with their frequencies; repeated extremes hint at censoring."""
    y = np.asarray(y, dtype=float)
    lo, hi = y.min(), y.max()
    return {"min": float(lo), "min_count": int(np.sum(y == lo)), "max": float(hi),
            "max_count": int(np.sum(y == hi)), "n": int(y.size)}


# --------------------------------------------------------------------------
# commands


def _outdir(cfg):
    from pathlib import Path

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out, cfg, extra=None):
    text = cfg.manifest()
    text += f"# version={__version__}\n"
    for k, v in (extra or {}).items():
        text += f"# {k}={v}\n"
    (out / "manifest.txt").write_text(text, encoding="utf-8")


def _save_errors(path, post):
    if post.error_model == "normal":
        np.savez_compressed(path, error_model=np.array("normal"), sigma=post.sigma)
        return
    sizes = [c["size"].size for c in post.clusters]
    b = post.dp_base
    np.savez_compressed(
        path, error_model=np.array("dp"), offsets=np.cumsum([0] + sizes),
        gamma=np.concatenate([c["gamma"] for c in post.clusters]),
        sigma=np.concatenate([c["sigma"] for c in post.clusters]),
        size=np.concatenate([c["size"] for c in post.clusters]),
        alpha=np.array([c["alpha"] for c in post.clusters]),
        base=np.array([b.nu, b.lam, b.gamma0, b.k0, b.k_s]))


def _load_errors(path):
    with np.load(path, allow_pickle=False) as z:
        kind = str(z["error_model"])
        if kind == "normal":
            return kind, z["sigma"].copy(), [], None
        off = z["offsets"]
        clusters = [{"gamma": z["gamma"][off[d]:off[d + 1]].copy(),
                     "sigma": z["sigma"][off[d]:off[d + 1]].copy(),
                     "size": z["size"][off[d]:off[d + 1]].copy(), "alpha": float(z["alpha"][d])}
                    for d in range(len(off) - 1)]
        return kind, None, clusters, BaseMeasure(*z["base"].tolist())


def cmd_fit(cfg):
    out = _outdir(cfg)
    data = ingest_csv(cfg.data, cfg.outcome, cfg.bounds, cfg.treatment)
    if cfg.suggest_bounds:
        print(json.dumps(suggest_bounds(data.y)))
        return 0
    X = data.X if data.T is None else np.column_stack([data.X, data.T])
    test_X = None
    if cfg.test_data:
        test = ingest_csv(cfg.test_data, schema=data.schema)
        test_X = test.X
    calib = calibrate(X, data.y, cfg.bounds, cfg.error, method=cfg.calib)
    chain = cfg.chain_config()
    if data.T is not None:
        cd = CausalDataset(data.X, data.T, data.y, cfg.bounds)
        res = estimate_cate(cd, chain, calib=calib, level=cfg.level)
        res.to_frame().to_csv(out / "cate.csv", index=False, float_format="%.17g")
        post = res.posterior
    else:
        post = run_chain(X, data.y, cfg.bounds, chain, calib, test_X=test_X)
    post.write_csv(out / "draws_train.csv", rows="train")
    if test_X is not None:
        post.write_csv(out / "draws_test.csv", rows="test")
        posterior_predict(post, level=cfg.level, rng=rng_stream(cfg.seed, 1)).to_csv(
            out / "predictions_test.csv", index=False, float_format="%.17g")
    posterior_predict(post, level=cfg.level, rows="train", rng=rng_stream(cfg.seed, 1)).to_csv(
        out / "predictions_train.csv", index=False, float_format="%.17g")
    post.forests.save(out / "forest_trace.npz",
                      metadata={"center": post.center, "scale": post.scale})
    _save_errors(out / "errors.npz", post)
    (out / "calibration.txt").write_text(calib.report() + "\n", encoding="utf-8")
    (out / "chain_metadata.txt").write_text(post.metadata_text(), encoding="utf-8")
    schema = dict(data.schema)
    schema["treatment"] = cfg.treatment
    (out / "schema.json").write_text(json.dumps(schema, indent=2), encoding="utf-8")
    _write_manifest(out, cfg, {"calibration": json.dumps(calib.to_dict(), sort_keys=True)})
    return 0


def cmd_predict(cfg):
    from pathlib import Path

    model = Path(cfg.model)
    out = _outdir(cfg)
    schema = json.loads((model / "schema.json").read_text(encoding="utf-8"))
    data = ingest_csv(cfg.data, schema=schema)
    trace = ForestTrace.load(model / "forest_trace.npz")
    center, scale = trace.metadata["center"], trace.metadata["scale"]
    kind, sigma, clusters, base = _load_errors(model / "errors.npz")
    manifest = read_config_file(model / "manifest.txt")
    bounds = CensoringBounds(manifest.get("lower", -math.inf), manifest.get("upper", math.inf))
    X = data.X
    if schema.get("treatment"):
        raise UsageError("predict for treatment-effect fits is not supported; "
                         "rerun fit with --test-data instead")
    f = center + scale * trace.predict(X)
    post = PosteriorDraws(f_train=f, f_test=f, bounds=bounds, error_model=kind, sigma=sigma,
                          clusters=clusters, dp_base=base)
    pred = posterior_predict(post, bounds, level=cfg.level, rng=rng_stream(cfg.seed, 1))
    pred.to_csv(out / "predictions.csv", index=False, float_format="%.17g")
    _write_manifest(out, cfg)
    return 0


def _dgp_spec(cfg):
    params = (("sigma", cfg.sigma),) if cfg.noise == "normal" else ()
    return DgpSpec(cfg.dgp, n_train=cfg.n_train, n_test=cfg.n_test, p=cfg.p, error=cfg.noise,
                   error_params=params, seed=cfg.seed)


def cmd_simulate(cfg):
    out = _outdir(cfg)
    data = generate(_dgp_spec(cfg))
    data.to_frame().to_csv(out / "train.csv", index=False, float_format="%.17g")
    if data.X_test.shape[0]:
        data.to_frame(test=True).to_csv(out / "test.csv", index=False, float_format="%.17g")
    _write_manifest(out, cfg, {"lower_limit": data.bounds.a, "upper_limit": data.bounds.b})
    return 0


def cmd_replicate(cfg):
    out = _outdir(cfg)
    spec = _dgp_spec(cfg)
    methods = tuple(cfg.methods.split(","))
    base = replace(cfg.chain_config(), keep_forests=False)
    res = replicate(spec, methods, cfg.reps, base)
    res.to_csv(out / "results.csv", index=False, float_format="%.17g")
    summarize(res).to_csv(out / "summary.csv", float_format="%.6g")
    _write_manifest(out, cfg, {"seeds": list(range(cfg.seed, cfg.seed + cfg.reps))})
    return 0


def run(cfg):
    """Execute a parsed configuration; returns the exit code."""
    return {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate,
            "replicate": cmd_replicate}[cfg.command](cfg)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
        return run(cfg)
    except UsageError as exc:
        print(f"tobart: usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"tobart: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

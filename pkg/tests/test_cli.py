import math

import numpy as np
import pandas as pd
import pytest

from tobart.cli import UsageError, ingest_csv, main, parse_config, read_config_file, suggest_bounds
from tobart.stats_core import AT_LOWER, AT_UPPER, INTERIOR, CensoringBounds

FAST = ["--trees", "5", "--burnin", "10", "--draws", "10"]


# ---------------------------------------------------------------- parse_config

def test_flags_override_file(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\ntrees=200\nseed = 4\nlower=-inf\n", encoding="utf-8")
    cfg = parse_config(["fit", "--config", str(cfg_file), "--data", "x.csv", "--outcome", "y",
                        "--trees", "25"])
    assert cfg.trees == 25 and cfg.seed == 4 and cfg.lower == -math.inf
    assert cfg.chain_config().n_trees == 25


def test_bound_sentinels_and_manifest_roundtrip(tmp_path):
    cfg = parse_config(["fit", "--data", "d.csv", "--outcome", "y", "--lower", "-inf",
                        "--upper", "3.5", "--chains", "2"])
    assert cfg.bounds == CensoringBounds(-math.inf, 3.5)
    assert cfg.chain_config().chains == 2
    path = tmp_path / "manifest.txt"
    path.write_text(cfg.manifest(), encoding="utf-8")
    again = parse_config(["--config", str(path)])
    assert again == cfg


@pytest.mark.parametrize("argv, key", [
    (["fit", "--data", "d.csv"], "outcome"),
    (["fit", "--outcome", "y"], "data"),
    (["fit", "--data", "d.csv", "--outcome", "y", "--trees", "many"], "trees"),
    (["fit", "--data", "d.csv", "--outcome", "y", "--mode", "fuzzy"], "mode"),
    (["fit", "--data", "d.csv", "--outcome", "y", "--lower", "2", "--upper", "1"], "lower"),
    (["fit", "--data", "d.csv", "--outcome", "y", "--draws", "0"], "draws"),
    (["simulate"], "dgp"),
    (["replicate", "--dgp", "groot", "--methods", "tobart,grabit"], "methods"),
    ([], "command"),
])
def test_usage_errors_name_the_key(argv, key):
    with pytest.raises(UsageError, match=key):
        parse_config(argv)


def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("trees=10\nlearning_rate=0.1\n", encoding="utf-8")
    with pytest.raises(UsageError, match="learning_rate"):
        read_config_file(path)
    with pytest.raises(UsageError):
        parse_config(["fit", "--learning-rate", "0.1"])


# ---------------------------------------------------------------- ingest_csv

def test_one_hot_encoding_is_sorted(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("y,colour,x\n1.0,red,0.5\n0.0,blue,1.5\n2.0,red,2.5\n", encoding="utf-8")
    data = ingest_csv(path, "y", CensoringBounds(0.0, 2.0))
    assert data.schema["features"] == ["colour=blue", "colour=red", "x"]
    np.testing.assert_array_equal(data.X, [[0, 1, 0.5], [1, 0, 1.5], [0, 1, 2.5]])
    assert list(data.status) == [INTERIOR, AT_LOWER, AT_UPPER]
    # a second file reuses the stored categories even if only one appears
    other = tmp_path / "other.csv"
    other.write_text("colour,x\nred,1.0\n", encoding="utf-8")
    np.testing.assert_array_equal(ingest_csv(other, schema=data.schema).X, [[0, 1, 1.0]])


def test_ingest_errors(tmp_path):
    na = tmp_path / "na.csv"
    na.write_text("y,x\n1.0,0.5\n2.0,\n", encoding="utf-8")
    with pytest.raises(ValueError, match=r"row 2, column 'x'"):
        ingest_csv(na, "y")
    below = tmp_path / "below.csv"
    below.write_text("y,x\n1.0,0.5\n-1.0,0.2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="row 2"):
        ingest_csv(below, "y", CensoringBounds(0.0, math.inf))
    text = tmp_path / "text.csv"
    text.write_text("y,x\nlow,0.5\nhigh,0.2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="not numeric"):
        ingest_csv(text, "y")
    with pytest.raises(ValueError, match="not found"):
        ingest_csv(below, "z")
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(ValueError, match="header"):
        ingest_csv(empty, "y")


def test_suggest_bounds():
    s = suggest_bounds([0.0, 0.0, 0.0, 1.2, 3.0])
    assert (s["min"], s["min_count"], s["max"], s["max_count"]) == (0.0, 3, 3.0, 1)


# ---------------------------------------------------------------- commands

@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--dgp", "friedman-1side", "--n-train", "80", "--n-test", "30",
                 "--p", "6", "--seed", "3", "--out", str(out)]) == 0
    train = pd.read_csv(out / "train.csv")
    lower = float(train.y.min())
    # the fit only sees covariates and the recorded outcome
    train.drop(columns=["ystar", "status"]).to_csv(out / "fit.csv", index=False)
    test = pd.read_csv(out / "test.csv")
    test.drop(columns=["y", "ystar", "status"]).to_csv(out / "new.csv", index=False)
    return out, lower, test


def test_fit_predict_round_trip(simulated, tmp_path):
    out, lower, test = simulated
    fit_dir, pred_dir = tmp_path / "fit", tmp_path / "pred"
    assert main(["fit", "--data", str(out / "fit.csv"), "--test-data", str(out / "new.csv"),
                 "--outcome", "y", "--lower", repr(lower), "--out", str(fit_dir), *FAST]) == 0
    for name in ("draws_train.csv", "draws_test.csv", "predictions_test.csv",
                 "forest_trace.npz", "errors.npz", "calibration.txt", "manifest.txt"):
        assert (fit_dir / name).exists()
    assert main(["predict", "--model", str(fit_dir), "--data", str(out / "new.csv"),
                 "--out", str(pred_dir)]) == 0
    pred = pd.read_csv(pred_dir / "predictions.csv")
    assert len(pred) == len(test)
    assert math.isfinite(np.mean((pred.ey_mean - test.y) ** 2))
    assert np.all(pred.ey_mean >= lower)
    # the saved forests reproduce the in-fit test predictions
    in_fit = pd.read_csv(fit_dir / "predictions_test.csv")
    np.testing.assert_allclose(pred.f_mean, in_fit.f_mean, rtol=1e-10)
    np.testing.assert_allclose(pred.ey_mean, in_fit.ey_mean, rtol=1e-10)


def test_same_seed_gives_identical_files_and_manifest_rerun(simulated, tmp_path):
    out, lower, _ = simulated
    args = ["fit", "--data", str(out / "fit.csv"), "--outcome", "y", "--lower", repr(lower),
            "--error", "dp", *FAST]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert main(["--config", str(tmp_path / "a" / "manifest.txt"),
                 "--out", str(tmp_path / "c")]) == 0
    first = (tmp_path / "a" / "draws_train.csv").read_bytes()
    assert first == (tmp_path / "b" / "draws_train.csv").read_bytes()
    assert first == (tmp_path / "c" / "draws_train.csv").read_bytes()
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "seed=0" in manifest and "calibration=" in manifest and "version=" in manifest


def test_fit_with_treatment_writes_cate(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--dgp", "nie-B", "--n-train", "60", "--out", str(sim)]) == 0
    df = pd.read_csv(sim / "train.csv")
    df.drop(columns=["ystar", "status", "tau", "mu"]).to_csv(sim / "fit.csv", index=False)
    lo, hi = float(df.y.min()), float(df.y.max())
    assert main(["fit", "--data", str(sim / "fit.csv"), "--outcome", "y", "--treatment",
                 "treatment", "--lower", repr(lo), "--upper", repr(hi),
                 "--out", str(tmp_path / "fit"), *FAST]) == 0
    cate = pd.read_csv(tmp_path / "fit" / "cate.csv")
    assert list(cate.columns) == ["row_id", "tau_mean", "tau_lower", "tau_upper"]
    assert len(cate) == 60


def test_replicate_command_schema(tmp_path):
    assert main(["replicate", "--dgp", "friedman", "--methods", "tobart,soft-tobart,linear-tobit",
                 "--reps", "1", "--n-train", "40", "--n-test", "20", "--p", "5",
                 "--out", str(tmp_path), *FAST]) == 0
    summary = pd.read_csv(tmp_path / "summary.csv", index_col=0)
    assert list(summary.columns) == ["tobart", "soft-tobart", "linear-tobit"]
    assert "mse" in summary.index
    assert len(pd.read_csv(tmp_path / "results.csv")) == 3


def test_errors_give_nonzero_exit(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--outcome", "y"]) == 1
    assert main(["fit", "--data", "x.csv"]) == 2
    err = capsys.readouterr().err
    assert "error" in err and "outcome" in err


def test_help_and_version_exit_cleanly(capsys):
    for flag in ("--help", "--version"):
        with pytest.raises(SystemExit) as exc:
            main([flag])
        assert exc.value.code == 0
    assert "tobart" in capsys.readouterr().out

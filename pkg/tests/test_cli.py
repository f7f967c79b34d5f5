import filecmp
import json
import os

import numpy as np
import pytest

from cli_helpers import pipeline, run, tree
from hipposurv.pipeline import MANIFEST_COLUMNS, fmt, read_csv, read_manifest, read_table, write_csv

def write_mci_manifest(path, times, events, clinical=None):
    rows = []
    for i, (t, e) in enumerate(zip(times, events)):
        extra = [None] * (len(MANIFEST_COLUMNS) - 6)
        if clinical is not None:
            extra[0] = clinical[i]
        rows.append([f"M{i}", f"v/M{i}_L.vol3", f"v/M{i}_R.vol3", "MCI", t, e] + extra)
    write_csv(path, MANIFEST_COLUMNS, rows)


def write_predictions(path, etas):
    write_csv(path, ("subject_id", "eta"), [(f"M{i}", r) for i, r in enumerate(etas)])


def test_evaluate_fixture_prints_five_sixths(tmp_path, capsys):
    write_mci_manifest(tmp_path / "m.csv", [40, 10, 30, 20], [0, 1, 1, 1])
    write_predictions(tmp_path / "p.csv", [0.5, 2.0, 1.0, 3.0])
    for rule in ("strict", "half"):
        code, out, _ = run(["evaluate", "--manifest", tmp_path / "m.csv", "--predictions", tmp_path / "p.csv",
                            "--out", tmp_path / rule, "--tie-rule", rule, "--n-boot", 50], capsys)
        assert code == 0
        assert out.splitlines()[0] == "c_index 0.833333"
    header, rows = read_csv(tmp_path / "strict" / "evaluation.csv")
    assert rows[0]["metric"] == "c_index" and rows[0]["n"] == "6"


def test_stratify_fixture_groups(tmp_path, capsys):
    write_mci_manifest(tmp_path / "m.csv", [6, 12, 18, 24, 30, 36, 42, 48], [1, 1, 0, 1, 1, 0, 1, 1])
    write_predictions(tmp_path / "p.csv", [8, 7, 6, 5, 4, 3, 2, 1])
    code, out, _ = run(["stratify", "--manifest", tmp_path / "m.csv", "--predictions", tmp_path / "p.csv",
                        "--out", tmp_path / "s"], capsys)
    assert code == 0
    assert "n_Low 2" in out and "n_Middle 4" in out and "n_High 2" in out
    _, groups = read_csv(tmp_path / "s" / "groups.csv")
    assert {r["subject_id"]: r["group"] for r in groups}["M0"] == "High"
    _, tests = read_csv(tmp_path / "s" / "logrank.csv")
    assert [t["test"] for t in tests] == ["all_groups", "low_vs_high"]
    assert tests[0]["df"] == "2"


def test_csv_round_trips_at_printed_precision(tmp_path):
    vals = np.random.default_rng(0).standard_normal(50) * 10.0 ** np.arange(-25, 25)
    write_csv(tmp_path / "x.csv", ("subject_id", "v"), [(f"S{i}", v) for i, v in enumerate(vals)])
    _, table = read_table(tmp_path / "x.csv")
    back = np.array([table[f"S{i}"][0] for i in range(50)])
    np.testing.assert_allclose(back, vals, rtol=5e-9)
    assert fmt(float("nan")) == "" and fmt(3) == "3" and fmt(None) == ""


def test_errors_are_one_json_line(tmp_path, capsys):
    code, out, err = run(["evaluate", "--out", tmp_path], capsys)
    assert code == 2
    msg = json.loads(err.strip())
    assert msg["error"] == "UsageError" and "--manifest" in msg["message"]
    assert len(err.strip().splitlines()) == 1
    code, _, err = run(["evaluate", "--manifest", tmp_path / "nope.csv", "--predictions", tmp_path / "p.csv",
                        "--out", tmp_path], capsys)
    assert code == 1 and json.loads(err)["error"] == "FileNotFoundError"
    code, _, err = run(["no-such-command"], capsys)
    assert code == 2 and json.loads(err)["error"] == "UsageError"


def test_manifest_validation(tmp_path, capsys):
    write_csv(tmp_path / "m.csv", MANIFEST_COLUMNS[:6], [["A", "a", "b", "MCI", "", ""]])
    code, _, err = run(["fit-cox", "--manifest", tmp_path / "m.csv", "--clinical", "--out", tmp_path], capsys)
    assert code == 1 and "time_months" in json.loads(err)["message"]
    write_csv(tmp_path / "d.csv", MANIFEST_COLUMNS[:6], [["A", "a", "b", "NC", "", ""], ["A", "a", "b", "AD", "", ""]])
    with pytest.raises(Exception, match="duplicate"):
        read_manifest(tmp_path / "d.csv")
    write_csv(tmp_path / "l.csv", MANIFEST_COLUMNS[:6], [["A", "a", "b", "XX", "", ""]])
    with pytest.raises(Exception, match="label"):
        read_manifest(tmp_path / "l.csv")


def test_fit_cox_refuses_rows_without_survival(tmp_path, capsys):
    write_csv(tmp_path / "m.csv", MANIFEST_COLUMNS[:7],
              [["A", "a", "b", "NC", "", "", 70], ["B", "a", "b", "MCI", 12, 1, 71]])
    code, _, err = run(["fit-cox", "--manifest", tmp_path / "m.csv", "--clinical", "--covariates", "age",
                        "--out", tmp_path], capsys)
    assert code == 1 and "time/event" in json.loads(err)["message"]


def test_contradictory_flags(tmp_path, capsys):
    write_mci_manifest(tmp_path / "m.csv", [6, 12], [1, 0])
    code, _, err = run(["fit-cox", "--manifest", tmp_path / "m.csv", "--clinical", "--combined",
                        "--out", tmp_path], capsys)
    assert code == 2 and "mutually exclusive" in err


def test_config_file_defaults_and_override(tmp_path, capsys):
    write_mci_manifest(tmp_path / "m.csv", [40, 10, 30, 20], [0, 1, 1, 1])
    write_predictions(tmp_path / "p.csv", [1.0, 1.0, 1.0, 1.0])
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# evaluation defaults\nmanifest = {tmp_path / 'm.csv'}\npredictions={tmp_path / 'p.csv'}\n"
                   "tie-rule = half\nn_boot = 20\n")
    code, out, _ = run(["evaluate", "--config", cfg, "--out", tmp_path / "a"], capsys)
    assert code == 0 and out.startswith("c_index 0.500000")
    code, out, _ = run(["evaluate", "--config", cfg, "--tie-rule", "strict", "--out", tmp_path / "b"], capsys)
    assert out.startswith("c_index 0.000000")
    cfg.write_text("bogus = 1\n")
    code, _, err = run(["evaluate", "--config", cfg, "--out", tmp_path], capsys)
    assert code == 2 and "bogus" in err


def test_full_pipeline_is_byte_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a, capsys)
    pipeline(b, capsys)
    files = tree(a)
    assert files == tree(b)
    for name in ("model/model.hpnet", "ftr/features.csv", "cox/coxfit.txt", "cox/cv_curve.csv",
                 "pred/predictions.csv", "eval/evaluation.csv", "eval/roc_6.csv", "strat/km.csv",
                 "strat/logrank.csv", "rel/mean_AD_left.vol3", "combined/cox_summary.csv", "truth.csv"):
        assert name in files
    mismatched = [f for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]
    assert mismatched == []
    header, _ = read_csv(a / "ftr/features.csv")
    assert len(header) == 1 + 2 * 16  # 128 last-block kernels scaled by 1/8, two streams
    _, summary = read_csv(a / "combined/cox_summary.csv")
    assert [r["covariate"] for r in summary] == ["age", "apoe4", "imaging_eta"]


def test_train_refuses_mci_rows(tmp_path, capsys):
    code, _, _ = run(["gen-data", "--out", tmp_path, "--n-adnc", 4, "--n-mci", 2, "--dims", "12,10,16"], capsys)
    assert code == 0
    code, _, err = run(["train-cnn", "--manifest", tmp_path / "mci_train.csv", "--out", tmp_path / "m",
                        "--iters", 2], capsys)
    assert code == 2 and "MCI" in json.loads(err)["message"]

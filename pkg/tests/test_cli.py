import io
import json
import os
import subprocess
import sys

import pandas as pd
import pytest

from tests.helpers import DATA_DIR, REPO, make_records, write_records

SCRIPT = REPO / "tc_pipeline.py"


def run_cli(*args, env=None):
    result = subprocess.run([sys.executable, str(SCRIPT), *map(str, args)],
                            capture_output=True, cwd=REPO, env={**os.environ, **(env or {})})
    return result.returncode, result.stdout.decode("utf-8"), result.stderr.decode("utf-8", "replace")


@pytest.fixture(scope="module")
def toy_csv(tmp_path_factory):
    return write_records(tmp_path_factory.mktemp("data") / "toy.csv", make_records(20, seed=2))


@pytest.fixture(scope="module")
def trained(tmp_path_factory, toy_csv):
    out = tmp_path_factory.mktemp("train")
    code, stdout, stderr = run_cli("train", "--data", toy_csv, "--out", out, "--seeds", "0,1",
                                   "--epochs", 200)
    assert code == 0, stderr
    return out, json.loads(stdout)


# ---- train ----

def test_train_writes_report(trained):
    out, report = trained
    assert json.loads((out / "report.json").read_text(encoding="utf-8")) == report
    assert report["schedule"]["stage1_epochs"] == 200
    assert report["schedule"]["decay_epoch"] == 120
    assert [s["seed"] for s in report["splits"]] == [0, 1]
    assert (out / "splits" / "1" / "checkpoint").exists()


def test_train_is_byte_deterministic(trained, toy_csv, tmp_path):
    out, _ = trained
    code, _, stderr = run_cli("train", "--data", toy_csv, "--out", tmp_path, "--seeds", "0,1",
                              "--epochs", 200)
    assert code == 0, stderr
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
    for seed in ("0", "1"):
        for name in ("checkpoint", "stage1.csv", "stage2.csv"):
            assert (tmp_path / "splits" / seed / name).read_bytes() == \
                (out / "splits" / seed / name).read_bytes()


def test_train_missing_data_file(tmp_path):
    code, stdout, stderr = run_cli("train", "--data", tmp_path / "absent.csv", "--out", tmp_path)
    assert code == 2
    assert stdout == ""
    assert stderr.splitlines()[-2] == "error: io"


def test_train_bad_config(tmp_path, toy_csv):
    config = tmp_path / "bad.yaml"
    config.write_text("schedule:\n  optimizer: adagrad\n", encoding="utf-8")
    code, _, stderr = run_cli("train", "--data", toy_csv, "--config", config, "--out", tmp_path)
    assert code == 2
    assert "error: invalid_config" in stderr


def test_usage_errors_exit_one(toy_csv):
    assert run_cli("train")[0] == 1
    assert run_cli("launch")[0] == 1
    assert run_cli("histogram", "--data", toy_csv, "--bin-width", "-3")[0] == 1
    assert run_cli("train", "--data", toy_csv, "--seeds", "a,b")[0] == 1


# ---- evaluate / predict / screen ----

def test_evaluate_prints_metrics_and_baseline(trained, toy_csv):
    out, _ = trained
    code, stdout, stderr = run_cli("evaluate", "--checkpoint", out / "splits" / "0" / "checkpoint",
                                   "--data", toy_csv)
    assert code == 0, stderr
    data = json.loads(stdout)
    assert data["metrics"]["n_records"] == 20
    assert data["metrics"]["class_accuracy"] == data["metrics"]["accuracy"]
    assert data["baseline"]["predicted_class"] in (0, 1)


def test_predict_single_formula(trained):
    out, _ = trained
    code, stdout, stderr = run_cli("predict", "--checkpoint", out / "splits" / "0" / "checkpoint",
                                   "--formula", "Mo4Re2Si")
    assert code == 0, stderr
    frame = pd.read_csv(io.StringIO(stdout))
    assert list(frame.columns) == ["formula", "tc_pred_K", "sc_score", "sc_label"]
    assert len(frame) == 1
    assert frame["tc_pred_K"][0] >= 0
    assert 0 <= frame["sc_score"][0] <= 1


def test_predict_scaled_formulas_match(trained):
    out, _ = trained
    _, stdout, _ = run_cli("predict", "--checkpoint", out / "splits" / "0" / "checkpoint",
                           "--formula", "Mo4Re2Si", "--formula", "Mo8Re4Si2")
    rows = stdout.splitlines()[1:]
    assert rows[0].split(",")[1:] == rows[1].split(",")[1:]


def test_predict_lists_every_bad_formula(trained, tmp_path):
    out, _ = trained
    formulas = tmp_path / "formulas.txt"
    formulas.write_text("# candidates\nMo4Re2Si\nQq3\nCu2O0\n", encoding="utf-8")
    code, stdout, stderr = run_cli("predict", "--checkpoint", out / "splits" / "0" / "checkpoint",
                                   "--formulas-file", formulas)
    assert code == 2
    assert stdout == ""
    assert "error: formula_error" in stderr
    assert "'Qq3'" in stderr and "offset 0" in stderr
    assert "'Cu2O0'" in stderr


def test_predict_with_wrong_variant(trained):
    out, _ = trained
    code, _, stderr = run_cli("predict", "--checkpoint", out / "splits" / "0" / "checkpoint",
                              "--variant", "cnn", "--formula", "MgB2")
    assert code == 2
    assert "error: config_conflict" in stderr


def test_predict_non_utf8_formulas_file(trained, tmp_path):
    out, _ = trained
    formulas = tmp_path / "latin1.txt"
    formulas.write_bytes("# Müller batch\nMo4Re2Si\n".encode("latin-1"))
    code, stdout, stderr = run_cli("predict", "--checkpoint", out / "splits" / "0" / "checkpoint",
                                   "--formulas-file", formulas)
    assert code == 1
    assert stdout == ""
    assert "error: usage" in stderr
    assert "Traceback" not in stderr


def test_screen_family(trained):
    out, _ = trained
    code, stdout, stderr = run_cli("screen", "--checkpoint", out / "splits" / "0" / "checkpoint",
                                   "--template", "Mo20{X}6{Z}4",
                                   "--substitute", "X=Re,Rh,Ru", "--substitute", "Z=Ge,Si")
    assert code == 0, stderr
    frame = pd.read_csv(io.StringIO(stdout))
    assert frame["formula"].tolist() == ["Mo20Re6Ge4", "Mo20Re6Si4", "Mo20Rh6Ge4", "Mo20Rh6Si4",
                                         "Mo20Ru6Ge4", "Mo20Ru6Si4"]


def test_screen_template_mismatch(trained):
    out, _ = trained
    code, _, stderr = run_cli("screen", "--checkpoint", out / "splits" / "0" / "checkpoint",
                              "--template", "Mo20{X}6{Y}4", "--substitute", "X=Re")
    assert code == 1
    assert "error: usage" in stderr


# ---- split / histogram ----

def test_split_writes_index_files(toy_csv, tmp_path):
    code, stdout, stderr = run_cli("split", "--data", toy_csv, "--seeds", "3,4", "--out", tmp_path)
    assert code == 0, stderr
    summary = json.loads(stdout)
    assert set(summary) == {"3", "4"}
    data = json.loads((tmp_path / "split_3.json").read_text(encoding="utf-8"))
    assert len(data["train"]) == 16 and len(data["test"]) == 4


def test_split_with_negative_and_large_seeds(toy_csv, tmp_path):
    code, stdout, stderr = run_cli("split", "--data", toy_csv, f"--seeds=-1,{2 ** 40}", "--out", tmp_path)
    assert code == 0, stderr
    assert set(json.loads(stdout)) == {"-1", str(2 ** 40)}
    data = json.loads((tmp_path / "split_-1.json").read_text(encoding="utf-8"))
    assert data["seed"] == -1 and len(data["test"]) == 4


def test_split_uses_output_dir_from_environment(toy_csv, tmp_path):
    code, _, stderr = run_cli("split", "--data", toy_csv, "--seeds", "0",
                              env={"TC_OUTPUT_DIR": str(tmp_path / "env_out")})
    assert code == 0, stderr
    assert (tmp_path / "env_out" / "split_0.json").exists()


def test_histogram_table1():
    code, stdout, _ = run_cli("histogram", "--data", DATA_DIR / "table1.csv", "--bin-width", 10)
    assert code == 0
    assert stdout == "bin_lower\tcount\n0\t1\n40\t1\n# mean=20.05\n"


def test_histogram_to_file(tmp_path):
    target = tmp_path / "hist.tsv"
    code, stdout, _ = run_cli("histogram", "--data", DATA_DIR / "table1.csv", "--bin-width", 10,
                              "--out", target)
    assert code == 0 and stdout == ""
    assert target.read_text(encoding="utf-8").endswith("# mean=20.05\n")


def test_histogram_empty_file(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    code, _, stderr = run_cli("histogram", "--data", empty, "--bin-width", 10)
    assert code == 2
    assert "error: empty_dataset" in stderr


# ---- gradcheck ----

def test_gradcheck_default_run():
    code, stdout, stderr = run_cli("gradcheck")
    assert code == 0, stderr
    data = json.loads(stdout)
    assert data["status"] == "max_rel_err < 1e-4"
    assert data["max_rel_err"] < 1e-4
    assert data["seeds"] == [0, 19]


def test_gradcheck_repeatable():
    first = run_cli("gradcheck", "--variant", "cnn", "--seed", 7, "--n-seeds", 2)[1]
    second = run_cli("gradcheck", "--variant", "cnn", "--seed", 7, "--n-seeds", 2)[1]
    assert first == second


def test_gradcheck_detects_corruption():
    code, _, stderr = run_cli("gradcheck", "--n-seeds", 2, "--corrupt-gradient")
    assert code == 3
    assert "error: gradcheck_failed" in stderr

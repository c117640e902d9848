import csv
import json
import zlib

import pytest

from mddradar import cli


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


GEN = ("--n-train", 10, "--n-test", 5, "--seed", 7)
QUICK = {"total_steps": 6, "eval_every": 3, "batch_size": 4, "bottleneck": 8, "diag_steps": 3}


@pytest.fixture()
def data_dir(tmp_path, capsys):
    out = tmp_path / "data"
    code, _, _ = run(capsys, "generate", *GEN, "--out", out)
    assert code == 0
    return out


def write_config(path, **values):
    path.write_text(json.dumps(values))
    return path


def test_generate_files_and_checksums(tmp_path, capsys):
    out = tmp_path / "a"
    code, stdout, _ = run(capsys, "generate", "--config-s", "I", "--config-t", "III", *GEN, "--out", out)
    assert code == 0
    lines = stdout.strip().splitlines()
    assert len(lines) == 4
    for line in lines:
        crc, name = line.split()
        assert int(crc, 16) == zlib.crc32((out / name).read_bytes())
    echo = json.loads((out / "config-echo.json").read_text())
    assert echo["seed"] == 7 and echo["config_s"]["name"] == "I"


def test_generate_is_deterministic(tmp_path, capsys):
    first = run(capsys, "generate", *GEN, "--out", tmp_path / "a")[1]
    second = run(capsys, "generate", *GEN, "--out", tmp_path / "b")[1]
    assert first == second
    for name in cli.DATASET_FILES.values():
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_uses_env_data_dir(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MDD_DATA_DIR", str(tmp_path / "env"))
    assert run(capsys, "generate", *GEN)[0] == 0
    assert (tmp_path / "env" / "S_train.mdd").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ("generate", "--n-train", 3, "--k", 5),
        ("generate", "--config-s", "V"),
        ("generate", "--shape", "16by32"),
        ("verify", "--trials", 0),
        ("frobnicate",),
    ],
)
def test_usage_errors_exit_2(capsys, tmp_path, argv):
    code, _, err = run(capsys, *argv, *(("--out", tmp_path) if argv[0] == "generate" else ()))
    assert code == 2
    assert "error" in err


def test_custom_radar_spec(tmp_path, capsys):
    spec = tmp_path / "radar.json"
    spec.write_text(json.dumps({
        "name": "custom", "chirps_per_frame": 64, "samples_per_chirp": 128, "bandwidth_ghz": 2.0,
        "frame_period_ms": 40.0, "range_resolution_cm": 7.5, "max_range_m": 5.0, "max_speed_mps": 5.0,
        "speed_resolution_mps": 0.15,
    }))
    code, _, _ = run(capsys, "generate", "--config-s", "I", "--config-t", spec, *GEN, "--out", tmp_path / "d")
    assert code == 0
    spec.write_text(json.dumps({"name": "bad", "wavelength": 1}))
    assert run(capsys, "generate", "--config-t", spec, *GEN, "--out", tmp_path / "e")[0] == 2


def test_train_source_only(data_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", data_dir=str(data_dir), **QUICK)
    out = tmp_path / "so"
    code, stdout, _ = run(capsys, "train", "--run-config", cfg, "--mode", "source-only", "--out", out)
    assert code == 0 and "source-only" in stdout
    for name in ("checkpoint.mddnet", "metrics.csv", "summary.json", "config-echo.json"):
        assert (out / name).exists()
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert rows and all(r["transfer_loss"] == "" for r in rows)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mode"] == "source-only" and "bound" not in summary


def test_train_mdd_summary(data_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", **QUICK)
    out = tmp_path / "mdd"
    code, stdout, _ = run(capsys, "train", "--run-config", cfg, "--data-dir", data_dir, "--out", out)
    assert code == 0 and "bound gap" in stdout
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["rho"] == pytest.approx(1.3862943, abs=1e-7)
    assert str(summary["config"]["rho"]).startswith("1.3862943")
    bound = summary["bound"]
    for key in ("source_margin_loss", "mdd_estimate", "lambda_upper", "target_error", "bound_gap", "bound_gap_sign"):
        assert key in bound
    echo = json.loads((out / "config-echo.json").read_text())
    assert echo["mode"] == "mdd" and echo["run_config"]["data_dir"] == str(data_dir)


def test_missing_dataset_exit_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", **QUICK)
    code, _, err = run(capsys, "train", "--run-config", cfg, "--data-dir", tmp_path / "nowhere", "--out", tmp_path / "o")
    assert code == 3
    assert str(tmp_path / "nowhere" / "S_train.mdd") in err


def test_corrupt_dataset_exit_3(data_dir, tmp_path, capsys):
    (data_dir / "T_test.mdd").write_bytes(b"MDDRAD01\0\0")
    cfg = write_config(tmp_path / "run.json", **QUICK)
    assert run(capsys, "train", "--run-config", cfg, "--data-dir", data_dir, "--out", tmp_path / "o")[0] == 3


@pytest.mark.parametrize(
    "values", [{"learning_rate": 0.1}, {"lr0": -1.0}, {"n_train": 3, "k": 5}, {"variant": "hinge"}]
)
def test_bad_run_config_exit_2(tmp_path, capsys, values):
    cfg = write_config(tmp_path / "run.json", **values)
    assert run(capsys, "train", "--run-config", cfg, "--out", tmp_path / "o")[0] == 2


def test_run_config_not_json(tmp_path, capsys):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    assert run(capsys, "train", "--run-config", path, "--out", tmp_path / "o")[0] == 2


def test_matrix_two_configs(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", n_train=10, n_test=5, **{**QUICK, "total_steps": 3})
    out = tmp_path / "m"
    code, stdout, _ = run(capsys, "matrix", "--configs", "I,III", "--run-config", cfg, "--out", out)
    assert code == 0
    assert stdout.count("->") == 2
    rows = list(csv.reader(open(out / "matrix.csv")))
    assert rows[0] == ["source\\target", "I", "III"]
    assert [r[0] for r in rows[1:]] == ["I", "III"]
    assert rows[1][1] == "" and rows[2][2] == "" and rows[1][2] and rows[2][1]
    pairs = list(csv.DictReader(open(out / "pairs.csv")))
    assert len(pairs) == 2 and {"baseline_acc", "mdd_acc", "delta"} <= set(pairs[0])
    assert (out / "baseline_matrix.csv").exists() and (out / "config-echo.json").exists()


def test_matrix_needs_two_configs(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", **QUICK)
    assert run(capsys, "matrix", "--configs", "I", "--run-config", cfg, "--out", tmp_path / "m")[0] == 2


def test_verify_lemma_passes(capsys):
    code, stdout, _ = run(capsys, "verify", "--suite", "lemma", "--trials", 1000, "--seed", 1)
    assert code == 0
    assert stdout.startswith("PASS lemma")


def test_verify_mutant_fails_with_counterexample(capsys):
    code, stdout, _ = run(capsys, "verify", "--suite", "lemma", "--trials", 100, "--mutant", "flipped-ramp")
    assert code == 1
    assert "FAIL lemma" in stdout
    payload = json.loads(stdout.split("counterexample: ", 1)[1].splitlines()[0])
    assert "f" in payload and "rho" in payload

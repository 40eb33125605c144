import shutil
import subprocess
import sys

import pytest

from loadvit.cli import run
from loadvit.codec import parse_key_values


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    """gen-data -> pretrain (2 epochs) -> finetune (both tasks) -> evaluate -> analyze."""
    root = tmp_path_factory.mktemp("smoke")
    data = root / "data"
    assert run(["gen-data", "--out", str(data), "--households", "10", "--days", "60", "--seed", "7"]) == 0
    assert run(["pretrain", "--out", str(root / "pre"), "--data", str(data), "--epochs", "2",
                "--checkpoint-every", "1"]) == 0
    ck = root / "pre" / "pretrained.v4lp"
    for task in ("identification", "disaggregation"):
        assert run(["finetune", "--out", str(root / f"ft_{task}"), "--data", str(data), "--checkpoint", str(ck),
                    "--task", task, "--epochs", "1"]) == 0
        assert run(["evaluate", "--out", str(root / f"ev_{task}"), "--data", str(data),
                    "--checkpoint", str(root / f"ft_{task}" / "finetuned.v4lp")]) == 0
    assert run(["analyze", "--out", str(root / "an"), "--data", str(data), "--checkpoint", str(ck),
                "--sample-size", "8"]) == 0
    return root


def test_smoke_path_outputs(smoke):
    assert (smoke / "pre" / "train_log.csv").exists()
    assert (smoke / "pre" / "train_loss.png").exists()
    assert (smoke / "pre" / "checkpoint_epoch001.v4lp").exists()
    assert (smoke / "ft_identification" / "metrics_accuracy.png").exists()
    assert (smoke / "ft_disaggregation" / "metrics_hist.csv").exists()
    assert (smoke / "ev_disaggregation" / "metrics_summary.txt").exists()
    an = smoke / "an"
    assert len(list(an.glob("pos_sim_*.csv"))) == 36
    assert len(list(an.glob("attn_layer_*.pgm"))) == 3
    assert (an / "recon_hist.csv").exists() and (an / "attention.png").exists()


def test_every_run_logs_versions_seed_and_digests(smoke):
    for name in ("pre", "ft_identification", "an"):
        text = (smoke / name / "run.log").read_text()
        assert "versions loadvit" in text and "seed 0" in text and "sha256" in text
        assert (smoke / name / "config.ini").exists()


def test_evaluate_agrees_with_finetune(smoke):
    a = parse_key_values((smoke / "ft_disaggregation" / "metrics_summary.txt").read_text())
    b = parse_key_values((smoke / "ev_disaggregation" / "metrics_summary.txt").read_text())
    assert a["nmae_percent"] == b["nmae_percent"] and a["ee_kwh"] == b["ee_kwh"]


def test_gen_data_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run(["gen-data", "--out", str(tmp_path / d), "--households", "10", "--days", "60",
                    "--seed", "7"]) == 0
    assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()
    assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()


def test_missing_dataset_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert run(["pretrain", "--out", str(tmp_path / "o"), "--data", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_unknown_flag_and_command(tmp_path, capsys):
    assert run(["pretrain", "--out", str(tmp_path), "--bogus", "1"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["train-everything"]) == 1


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[gen-data]\nhousehold = 3\n")
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "household" in capsys.readouterr().err
    cfg.write_text("[gen_data]\nhouseholds = 3\n")
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_bad_value_is_validation_error(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path), "--households", "many"]) == 1


def test_corrupt_checkpoint_is_validation_error(smoke, tmp_path):
    bad = tmp_path / "bad.v4lp"
    bad.write_bytes(b"nope")
    assert run(["analyze", "--out", str(tmp_path / "o"), "--data", str(smoke / "data"),
                "--checkpoint", str(bad)]) == 1


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[gen-data]\nhouseholds = 3\ndays = 30\n")
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o"), "--days", "25"]) == 0
    resolved = parse_key_values((tmp_path / "o" / "config.ini").read_text().split("\n", 1)[1])
    assert resolved["households"] == "3" and resolved["days"] == "25"


def test_resolved_config_rerun_reproduces_checkpoint(smoke, tmp_path):
    first = tmp_path / "first"
    assert run(["pretrain", "--out", str(first), "--data", str(smoke / "data"), "--steps", "3",
                "--checkpoint-every", "0", "--seed", "5"]) == 0
    again = tmp_path / "again"
    assert run(["pretrain", "--config", str(first / "config.ini"), "--out", str(again)]) == 0
    assert (first / "pretrained.v4lp").read_bytes() == (again / "pretrained.v4lp").read_bytes()
    assert (first / "config.ini").read_text() == (again / "config.ini").read_text()


def test_grad_check_command(tmp_path, capsys):
    assert run(["grad-check", "--coords", "2", "--out", str(tmp_path)]) == 0
    out = parse_key_values(capsys.readouterr().out)
    assert out["status"] == "pass" and float(out["max_relative_error"]) < 1e-4
    assert (tmp_path / "grad_check.csv").read_text().startswith("parameter,max_relative_error")


def test_console_script():
    exe = shutil.which("loadvit")
    cmd = [exe] if exe else [sys.executable, "-m", "loadvit.cli"]
    proc = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "loadvit" in proc.stdout
    proc = subprocess.run(cmd + ["nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1 and "usage" in proc.stderr

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from wavepmp.cli import main
from wavepmp.io import read_metrics

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_config(tmp_path, base, **sections):
    cfg = yaml.safe_load((CONFIGS / base).read_text()) if base else {}
    for section, values in sections.items():
        cfg.setdefault(section, {}).update(values)
    cfg["output"] = {**cfg.get("output", {}), "metrics": str(tmp_path / "metrics.jsonl"),
                     "checkpoint": str(tmp_path / "ckpt.npz"), "solution": str(tmp_path / "solution.json")}
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_train_xor_writes_metrics(tmp_path):
    cfg = write_config(tmp_path, "xor.yaml")
    assert main(["train", str(cfg)]) == 0
    header, rows = read_metrics(tmp_path / "metrics.jsonl")
    assert header["schema"] == "wavepmp.metrics"
    assert rows[-1]["step"] == 4000 and rows[-1]["rollout_loss"] <= 0.05
    assert (tmp_path / "ckpt.npz").exists()


def test_train_is_deterministic(tmp_path):
    hashes = []
    for i in range(2):
        d = tmp_path / str(i)
        d.mkdir()
        cfg = write_config(d, "xor.yaml", trainer={"budget": 300})
        assert main(["train", str(cfg)]) == 0
        hashes.append(digest(d / "metrics.jsonl"))
    assert hashes[0] == hashes[1]


def test_train_rejects_supercritical_courant(tmp_path, capsys):
    cfg = write_config(tmp_path, "xor.yaml", grid={"nu": 1.5})
    assert main(["train", str(cfg)]) == 1
    assert "nu=1.5" in capsys.readouterr().err
    assert not (tmp_path / "metrics.jsonl").exists()


def test_train_reports_divergence(tmp_path):
    cfg = write_config(tmp_path, "linreg.yaml", model={"metric": "identity"}, grid={"nu": 0.5, "alpha": 1.0})
    assert main(["train", str(cfg)]) == 2


def test_train_resume_continues_step_count(tmp_path):
    cfg = write_config(tmp_path, "xor.yaml", trainer={"budget": 100, "log_every": 50})
    assert main(["train", str(cfg)]) == 0
    assert main(["train", str(cfg), "--resume", str(tmp_path / "ckpt.npz")]) == 0
    _, rows = read_metrics(tmp_path / "metrics.jsonl")
    assert rows[-1]["step"] == 200


def test_train_async_scheduler(tmp_path):
    cfg = write_config(tmp_path, "xor.yaml", trainer={"budget": 40, "scheduler": "random-fair", "log_every": 10})
    assert main(["train", str(cfg)]) == 0
    _, rows = read_metrics(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in rows] == [10, 20, 30, 40]


def test_mismatched_widths_is_validation_error(tmp_path):
    cfg = write_config(tmp_path, "xor.yaml", model={"widths": [3, 1]})
    assert main(["train", str(cfg)]) == 1


def test_control_scalar_lqr(tmp_path, capsys):
    cfg = write_config(tmp_path, "scalar_lqr.yaml")
    assert main(["control", str(cfg)]) == 0
    sol = json.loads((tmp_path / "solution.json").read_text())
    assert sol["riccati_control_error"] <= 1e-3
    assert len(sol["controls"]) == 32
    assert "PASS" in capsys.readouterr().out


def test_control_oracle_failure_exit_code(tmp_path):
    cfg = write_config(tmp_path, "scalar_lqr.yaml", trainer={"budget": 5, "tol": None})
    assert main(["control", str(cfg)]) == 3


def test_control_pendulum_reports_residuals_only(tmp_path):
    cfg = write_config(tmp_path, "pendulum.yaml", trainer={"budget": 200})
    assert main(["control", str(cfg)]) == 0
    sol = json.loads((tmp_path / "solution.json").read_text())
    assert "max_scaled_residual" in sol and "riccati_control_error" not in sol


def test_control_needs_problem_name(tmp_path):
    cfg = write_config(tmp_path, None, grid={"nu": 0.5})
    assert main(["control", str(cfg)]) == 1
    cfg = write_config(tmp_path, "scalar_lqr.yaml", problem={"name": "cartpole"})
    assert main(["control", str(cfg)]) == 1


def test_verify_suites(capsys):
    assert main(["verify", "roundtrip"]) == 0
    assert "[PASS]" in capsys.readouterr().out
    assert main(["verify", "cfl"]) == 0
    out = capsys.readouterr().out
    assert "nu=1.2" in out and "[PASS]" in out
    assert main(["verify", "nope"]) == 1
    err = capsys.readouterr().err
    assert "roundtrip" in err and "unlocked" in err


def parse_table(out):
    rows = []
    for line in out.splitlines():
        parts = line.split()
        if parts and parts[0].isdigit():
            rows.append([float(p) for p in parts])
    return rows


def test_compare_xor(tmp_path, capsys):
    cfg = write_config(tmp_path, "xor.yaml", trainer={"budget": 800})
    assert main(["compare", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "wave_loss" in out and "sgd_loss" in out and "grad_cos" in out and "sequential depth" in out
    rows = parse_table(out)
    assert len(rows) == 8 and all(-1.0 <= r[4] <= 1.0 for r in rows)


def test_compare_eta_zero(tmp_path, capsys):
    cfg = write_config(tmp_path, "xor.yaml", optimizer={"eta": 0.0}, trainer={"budget": 400})
    assert main(["compare", str(cfg)]) == 0
    rows = parse_table(capsys.readouterr().out)
    losses = {r[2] for r in rows} | {r[3] for r in rows}
    assert len(losses) == 1
    # the wave gradient aligns with the exact one once the residuals have relaxed
    assert rows[-1][4] == pytest.approx(1.0, abs=1e-6)


def test_console_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "wavepmp.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "wavepmp" in out.stdout

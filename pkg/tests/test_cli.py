import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from aggmark.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def read_csv(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    return list(csv.DictReader(lines[1:]))


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "da"
    assert main(["run", str(CONFIGS / "disability_annuity.json"), "--out", str(out)]) == EXIT_OK
    assert {p.name for p in out.iterdir()} == {"cashflows.csv", "reserves.csv", "report.json"}
    res = read_csv(out / "reserves.csv")
    assert [r["initial_state"] for r in res] == ["2", "2"]
    v = {float(r["initial_duration"]): float(r["reserve"]) for r in res}
    assert v[1.0] == pytest.approx(6.5817, abs=1e-3)
    assert v[0.0] == pytest.approx(3.0549, abs=1e-3)
    report = json.loads((out / "report.json").read_text())
    assert report["grid"]["steps"] == 300
    assert "V[state=2" in capsys.readouterr().out


def test_reruns_are_byte_identical(tmp_path):
    cfg = str(CONFIGS / "disability_annuity.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", cfg, "--out", str(a), "--grid-steps", "60"]) == EXIT_OK
    assert main(["run", cfg, "--out", str(b), "--grid-steps", "60"]) == EXIT_OK
    for name in ("cashflows.csv", "reserves.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_overrides_recorded(tmp_path):
    out = tmp_path / "o"
    assert main(["run", str(CONFIGS / "disability_annuity.json"), "--out", str(out), "--grid-steps", "50", "--substeps", "4"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["grid"]["steps"] == 50 and report["grid"]["substeps"] == 4
    rows = read_csv(out / "cashflows.csv")
    assert len(rows) == 2 * 51


def test_zero_payments_all_zero(tmp_path):
    out = tmp_path / "z"
    assert main(["run", str(CONFIGS / "zero_payments.json"), "--out", str(out)]) == EXIT_OK
    for r in read_csv(out / "cashflows.csv"):
        assert float(r["rate"]) == 0 and float(r["accumulated"]) == 0 and float(r["discounted"]) == 0
    for r in read_csv(out / "reserves.csv"):
        assert float(r["reserve"]) == 0


def test_bad_row_sums(tmp_path, capsys):
    assert main(["run", str(CONFIGS / "bad_row_sums.json"), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "row (1,1)" in err
    assert not (tmp_path / "x").exists()


def test_json_syntax_error_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "model": "m.json",\n  "grid": {"start": 40,,}\n}\n')
    assert main(["run", str(bad)]) == EXIT_CONFIG
    assert "bad.json:3" in capsys.readouterr().err


def test_missing_field_reports_line(tmp_path, capsys):
    shutil.copy(CONFIGS / "disability_d2.json", tmp_path)
    cfg = json.loads((CONFIGS / "zero_payments.json").read_text())
    cfg["grid"]["end"] = 70
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg, indent=2))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "c.json:" in err and "horizon" in err


def test_verify_flat_chain(tmp_path):
    out = tmp_path / "v"
    assert main(["verify", str(CONFIGS / "flat_chain_verify.json"), "--out", str(out)]) == EXIT_OK
    rows = read_csv(out / "verify.csv")
    assert len(rows) == 2 * 6
    assert all(abs(float(r["z"])) <= 4 for r in rows)
    report = json.loads((out / "report.json").read_text())
    assert report["verification"]["passed"]


def test_verify_detects_corrupted_simulator(tmp_path, capsys):
    out = tmp_path / "c"
    assert main(["verify", str(CONFIGS / "flat_chain_corrupted.json"), "--out", str(out)]) == EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["verification"]["max_abs_z"] > 4


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "aggmark.cli", "run", str(CONFIGS / "zero_payments.json"), "--out", str(tmp_path / "e")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "V[state=1" in proc.stdout

import csv
import json
import shutil

import pytest

from motioncalib import io
from motioncalib.cli import main


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--trajectory", "n_horizontal=2,n_vertical=2", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def calibrated(small_dataset):
    report = small_dataset / "report.json"
    code = main(["calibrate", "--manifest", str(small_dataset / "manifest.json"), "--out", str(report)])
    return code, report


def test_round_trip(small_dataset, calibrated, tmp_path, capsys):
    code, report = calibrated
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["format"] == "motioncalib-report" and doc["status"] == "converged"
    curves = tmp_path / "curves.csv"
    assert main(["eval", "--report", str(report), "--oracle", str(small_dataset / "oracle.json"), "--out", str(curves)]) == 0
    rows = list(csv.DictReader(curves.open()))
    final = rows[0]
    assert final["section"] == "final"
    assert float(final["rotation_error_deg"]) < 0.01 and float(final["translation_error_m"]) < 0.001
    assert [r["iteration"] for r in rows if r["section"] == "iteration"][0] == "0"


def test_eval_mismatched_oracle(small_dataset, calibrated, tmp_path, capsys):
    _, report = calibrated
    oracle = json.loads((small_dataset / "oracle.json").read_text())
    oracle["dataset_id"] = "someone-else"
    other = tmp_path / "oracle.json"
    other.write_text(json.dumps(oracle))
    assert main(["eval", "--report", str(report), "--oracle", str(other), "--out", str(tmp_path / "c.csv")]) != 0
    assert "mismatch" in capsys.readouterr().err


def test_eval_sweep_table(small_dataset, calibrated, tmp_path, capsys):
    _, report = calibrated
    doc = json.loads(report.read_text())
    ext = doc["extrinsic"]
    doc["sweep"] = [
        {"n": n, "trial": t, "ids": [], "status": "converged", "initial": ext, "extrinsic": ext} for n in (1, 2) for t in range(2)
    ] + [{"n": 2, "trial": 2, "ids": [], "status": "failed", "error": "x"}]
    rep = tmp_path / "r.json"
    rep.write_text(json.dumps(doc))
    assert main(["eval", "--report", str(rep), "--oracle", str(small_dataset / "oracle.json"), "--out", str(tmp_path / "c.csv")]) == 0
    sections = [r["section"] for r in csv.DictReader((tmp_path / "c.csv").open())]
    assert sections.count("sweep_median_final") == 2 and sections.count("sweep_final") == 5


def test_missing_scan_exits_66(small_dataset, tmp_path, capsys):
    broken = tmp_path / "broken"
    shutil.copytree(small_dataset, broken)
    (broken / "scans" / "s02.ply").unlink()
    code = main(["calibrate", "--manifest", str(broken / "manifest.json"), "--out", str(tmp_path / "r.json")])
    assert code == 66
    assert "s02.ply" in capsys.readouterr().err


def test_unreadable_table_exits_66(small_dataset, tmp_path, capsys):
    broken = tmp_path / "broken"
    shutil.copytree(small_dataset, broken)
    (broken / "matches" / "m00.txt").write_text("1 2 3\n")
    assert main(["diagnose", "--manifest", str(broken / "manifest.json")]) == 66
    assert "line 1" in capsys.readouterr().err


def test_usage_errors_exit_64(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["calibrate"])
    assert exc.value.code == 64
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 64
    assert main(["simulate", "--scene", "kind=cave", "--out", str(tmp_path)]) == 64
    assert main(["simulate", "--camera", "fisheye", "--out", str(tmp_path)]) == 64


def test_diagnose_table(small_dataset, capsys):
    assert main(["diagnose", "--manifest", str(small_dataset / "manifest.json")]) == 0
    out = capsys.readouterr().out
    assert "WEAK_ROTATION" in out and "m00" in out and "engineering defaults" in out


def test_max_iter_exit_code(small_dataset, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[pipeline]\nmax_outer_iterations = 1\n")
    code = main(["calibrate", "--manifest", str(small_dataset / "manifest.json"), "--config", str(cfg), "--out", str(tmp_path / "r.json")])
    assert code == 2
    assert io.read_report(tmp_path / "r.json")["status"] == "max_iter"

import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mms_glhad.cli import main
from mms_glhad.model import dumps_system, load_system

from conftest import SHIPPED_SYSTEM, scalar_chain

SYS = str(SHIPPED_SYSTEM)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["simulate", "--system", SYS]) == 1            # missing --out
    assert main(["detect", "--system", SYS, "--input", "x", "--lambda", "-1"]) == 1
    assert main(["detect", "--system", SYS, "--input", "x", "--method", "cusum"]) == 1


def test_simulate_stage_needs_snr(tmp_path):
    assert main(["simulate", "--system", SYS, "--out", str(tmp_path / "r.csv"), "--stage", "1"]) == 1


def test_model_errors(tmp_path):
    assert main(["synthesize", "--system", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["synthesize", "--system", str(bad)]) == 2
    d = json.loads(SHIPPED_SYSTEM.read_text())
    d["stages"][1]["V"] = (-np.eye(5)).tolist()
    bad.write_text(json.dumps(d))
    assert main(["dump-structure", "--system", str(bad), "--out", str(tmp_path)]) == 2


def test_numerical_failure(tmp_path):
    p = tmp_path / "singular.json"
    p.write_text(dumps_system(scalar_chain(K=2, U=0.0, Z=0.0)))
    assert main(["synthesize", "--system", str(p)]) == 3


def test_synthesize_writes_gains(tmp_path):
    out = tmp_path / "synth.json"
    assert main(["synthesize", "--system", SYS, "--out", str(out)]) == 0
    s = load_system(out)
    assert s.gains is not None and len(s.gains.K) == 4


def test_dump_structure(tmp_path):
    assert main(["dump-structure", "--system", SYS, "--out", str(tmp_path), "--no-timestamp"]) == 0
    shapes = {"H": 12, "H1": 20, "Hw": 9, "Sigma_eps": 20}
    for name, cols in shapes.items():
        rows = _rows(tmp_path / f"{name}.csv")
        assert len(rows) == 20 and len(rows[0]) == cols + 1
        assert rows[0]["row"] == "y0_0" and rows[-1]["row"] == "y3_4"
    header = next(csv.reader(open(tmp_path / "H.csv")))
    assert header[1] == "x0_0" and header[4] == "r1_0"


def test_simulate_then_detect(tmp_path):
    runs = tmp_path / "runs.csv"
    assert main(["simulate", "--system", SYS, "--out", str(runs), "--n", "6", "--stage", "2", "--snr", "4",
                 "--seed", "100"]) == 0
    rows = _rows(runs)
    assert len(rows) == 6
    assert [r["seed"] for r in rows] == [str(100 + i) for i in range(6)]
    assert {r["attacked_stage"] for r in rows} == {"2"} and {r["snr"] for r in rows} == {"4"}
    assert len(rows[0]) == 3 + 20

    out = tmp_path / "det.csv"
    assert main(["detect", "--system", SYS, "--input", str(runs), "--out", str(out), "--method", "both"]) == 0
    det = _rows(out)
    assert len(det) == 12
    assert [r["method"] for r in det[:2]] == ["glhad", "benchmark"]
    assert list(det[0])[:3] == ["method", "alarmed", "localized"]
    assert "t2_3" in det[0] and "ucl_3" in det[0]
    for r in det:
        assert (r["alarmed"] == "1") == (r["localized"] != "none")


def test_detect_to_stdout(tmp_path, capsys):
    runs = tmp_path / "runs.csv"
    main(["simulate", "--system", SYS, "--out", str(runs), "--n", "3"])
    capsys.readouterr()
    assert main(["detect", "--system", SYS, "--input", str(runs), "--method", "glhad"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4 and lines[0].startswith("method,alarmed,localized,t2_0")


def test_detect_bad_records(tmp_path):
    p = tmp_path / "runs.csv"
    p.write_text("seed,y_0\n1,2\n")
    assert main(["detect", "--system", SYS, "--input", str(p)]) == 2


def test_simulate_is_reproducible(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["simulate", "--system", SYS, "--out", str(p), "--n", "4", "--seed", "7",
                     "--no-timestamp"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert not a.read_text().startswith("#")
    main(["simulate", "--system", SYS, "--out", str(a), "--n", "1"])
    assert a.read_text().startswith("# generated ")


def test_experiment_command(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"system": SYS, "snr_levels": [3.0], "stages": [1], "replications": 3,
                                "master_seed": 1}))
    out = tmp_path / "res"
    assert main(["experiment", "--plan", str(plan), "--out", str(out), "--no-timestamp", "--method",
                 "benchmark", "--horizon", "50"]) == 0
    for name in ("arl.csv", "localization.csv", "summary.csv"):
        assert (out / name).exists()
    assert {r["method"] for r in _rows(out / "arl.csv")} == {"benchmark"}


def test_selftest_command(capsys):
    assert main(["selftest", "--system", SYS, "--reps", "3000", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3 + 2 * 5
    assert all(ln.startswith("PASS ") for ln in lines)


def test_log_env_and_module_entry(tmp_path):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"system": SYS, "snr_levels": [3.0], "stages": [0], "replications": 1}))
    env = dict(os.environ, MMS_GLHAD_LOG="INFO")
    proc = subprocess.run([sys.executable, "-m", "mms_glhad.cli", "experiment", "--plan", str(plan), "--out",
                           str(tmp_path / "o")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert "wrote" in proc.stderr

import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from mms_glhad.detect import decide
from mms_glhad.experiment import (
    Bench, ExperimentPlan, load_plan, run_experiment, run_length, run_lengths, write_report,
)
from mms_glhad.model import AttackSpec

from conftest import SHIPPED_PLAN


@pytest.fixture(scope="module")
def bench(shipped, shipped_structures):
    return Bench(shipped, shipped_structures)


def _always(y):
    return decide("stub", [1.0], [0.0])


def _never(y):
    return decide("stub", [0.0], [1.0])


def test_always_alarm_stub(shipped, shipped_structures, bench):
    assert run_length(shipped, shipped_structures, _always, None, bench=bench) == (1, False)


def test_never_alarm_stub_is_censored(shipped, shipped_structures, bench):
    assert run_length(shipped, shipped_structures, _never, None, horizon=37, bench=bench) == (37, True)


def test_null_run_length_is_geometric(bench):
    # per-stage alpha 0.01 over four stages: family-wise 0.0394, mean run length about 25.4
    fw = 1 - 0.99 ** 4
    lengths = {m: [] for m in bench.detectors}
    for rep in range(2000):
        out = run_lengths(bench, None, np.random.default_rng([5, rep]), horizon=1000)
        for m, (length, cens) in out.items():
            assert not cens
            lengths[m].append(length)
    for m, xs in lengths.items():
        assert np.mean(xs) == pytest.approx(1 / fw, rel=0.10), m


def test_run_lengths_share_one_stream(bench):
    a = run_lengths(bench, AttackSpec(stage=1, snr=2.0), np.random.default_rng(3))
    b = run_lengths(bench, AttackSpec(stage=1, snr=2.0), np.random.default_rng(3))
    assert a == b
    assert set(a) == {"glhad", "benchmark"}


def test_single_replication_report(shipped):
    plan = ExperimentPlan(system=shipped, snr_levels=[2.2], stages_to_attack=[1], replications=1,
                          null_replications=1, master_seed=4)
    rep = run_experiment(plan)
    for m in ("glhad", "benchmark"):
        assert rep.arl_samples(m, 2.2, 1).size == 1
        assert rep.loc_trials[(m, 2.2, 1)] == 1
        row = rep.confusion[(m, 2.2)][1]
        assert row.sum() <= 1
        assert not rep.confusion[(m, 2.2)][[0, 2, 3]].any()
        assert rep.arl_samples(m, 0.0, None).size == 1


@pytest.fixture(scope="module")
def small_report(shipped):
    plan = ExperimentPlan(system=shipped, snr_levels=[1.0, 4.0], stages_to_attack=[0, 3], replications=25,
                          null_replications=40, master_seed=11)
    return plan, run_experiment(plan)


def test_report_invariants(small_report):
    plan, rep = small_report
    for r in rep.arl_rows:
        assert isinstance(r["run_length"], int) and r["run_length"] >= 1
    for (m, snr), M in rep.confusion.items():
        for stage in plan.stages_to_attack:
            alarmed = M[stage].sum()
            assert alarmed <= rep.loc_trials[(m, snr, stage)]
            assert rep.accuracy(m, snr, stage) == M[stage, stage] / 25
    for m in rep.methods:
        assert 0 <= rep.null_alarm_rate(m) <= 1
        assert rep.arl_samples(m, 0.0, None).size == 40


def test_report_is_deterministic_and_parallel_safe(shipped, small_report, tmp_path):
    plan, rep = small_report
    again = run_experiment(plan, jobs=2)
    write_report(rep, tmp_path / "a", timestamp=False)
    write_report(again, tmp_path / "b", timestamp=False)
    for name in ("arl.csv", "localization.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_master_seed_changes_output(shipped, small_report):
    plan, rep = small_report
    other = run_experiment(replace(plan, master_seed=12, replications=3, null_replications=3))
    first = [r["run_length"] for r in rep.arl_rows[:6]]
    assert first != [r["run_length"] for r in other.arl_rows[:6]]


def test_csv_schemas(small_report, tmp_path):
    _, rep = small_report
    write_report(rep, tmp_path, timestamp=True)
    with open(tmp_path / "arl.csv") as fh:
        assert fh.readline().startswith("# generated ")
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["method", "snr", "stage", "replicate", "run_length", "censored"]
    assert rows[0]["stage"] == "none"
    with open(tmp_path / "localization.csv") as fh:
        fh.readline()
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["method", "snr", "true_stage", "predicted_stage", "count"]
    # rows of the confusion matrix are the truly attacked stage
    truth = {(r["method"], r["snr"], r["true_stage"]) for r in rows if r["true_stage"] != "none"}
    assert ("glhad", "4.0", "3") in truth and ("glhad", "4.0", "1") not in truth
    with open(tmp_path / "summary.csv") as fh:
        fh.readline()
        header = next(csv.reader(fh))
    assert header[:5] == ["method", "snr", "stage", "replications", "arl_mean"]
    assert "accuracy" in header and "false_alarm_rate" in header


def test_load_plan(tmp_path):
    plan = load_plan(SHIPPED_PLAN)
    assert plan.system.name == "paper_numerical.json" and plan.system.exists()
    assert tuple(plan.snr_levels) == (0.6, 1.0, 1.4, 2.2, 3.0, 4.0)
    assert plan.replications == 300 and plan.alpha == 0.01 and plan.lam == "auto"
    p = tmp_path / "plan.json"
    p.write_text(json.dumps({"system": "nowhere.json", "stages": [1], "lambda": 0.5}))
    plan = load_plan(p)
    assert plan.system == (tmp_path / "nowhere.json").resolve()
    assert plan.stages_to_attack == [1] and plan.lam == 0.5


@pytest.mark.parametrize("kw", [{"replications": 0}, {"snr_levels": [-1.0]}, {"horizon": 0},
                                {"methods": ["cusum"]}])
def test_plan_validation(shipped, kw):
    with pytest.raises(ValueError):
        ExperimentPlan(system=shipped, **kw)


def test_bad_stage_in_plan(shipped):
    with pytest.raises(ValueError, match="outside"):
        run_experiment(ExperimentPlan(system=shipped, stages_to_attack=[4], replications=1))

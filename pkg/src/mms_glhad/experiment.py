"""Monte-Carlo run-length and localization study for both detectors.

Seeding: every trial gets its own generator
``SeedSequence(master_seed, spawn_key=(block, snr_index, stage_index, replicate))``
with block 0 = run-length trials, 1 = single-product localization trials.
The null calibration block uses ``snr_index = stage_index = 0`` under
block ids 2 (run length) and 3 (single product).  All methods in a plan
see the same product stream for a given trial (paired comparison).
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .control import synthesize
from .detect import BENCHMARK, GLHAD, make_detector
from .model import AttackSpec, SystemModel, load_system
from .simulate import ClosedLoop, random_direction, stage_cov_pinv
from .structure import StructureMatrices, build_structures

log = logging.getLogger(__name__)

ARL_BLOCK, LOC_BLOCK, NULL_ARL_BLOCK, NULL_LOC_BLOCK = 0, 1, 2, 3
STUDY_SNR = (0.6, 1.0, 1.4, 2.2, 3.0, 4.0)


@dataclass
class ExperimentPlan:
    system: Union[str, Path, SystemModel]
    snr_levels: Sequence[float] = STUDY_SNR
    stages_to_attack: Optional[Sequence[int]] = None   # default: every stage
    replications: int = 300
    null_replications: Optional[int] = None            # default: replications
    alpha: float = 0.01
    master_seed: int = 0
    lam: Union[str, float] = "auto"
    lambda_ratio: float = 0.1
    refit: bool = True
    horizon: int = 1000
    methods: Sequence[str] = (GLHAD, BENCHMARK)

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if any(s < 0 for s in self.snr_levels):
            raise ValueError("snr levels must be nonnegative")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for m in self.methods:
            if m not in (GLHAD, BENCHMARK):
                raise ValueError(f"unknown method {m!r}")


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    d = json.loads(path.read_text())
    sys_path = Path(d.pop("system"))
    if not sys_path.is_absolute():
        sys_path = (path.parent / sys_path).resolve()
    if "stages" in d:
        d["stages_to_attack"] = d.pop("stages")
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    return ExperimentPlan(system=sys_path, **d)


def _trial_rng(master_seed, block, snr_idx, stage_idx, rep):
    ss = np.random.SeedSequence(master_seed, spawn_key=(block, snr_idx, stage_idx, rep))
    return np.random.default_rng(ss)


class Bench:
    """Everything needed to simulate and score products of one system."""

    def __init__(self, system: SystemModel, structures: Optional[StructureMatrices] = None,
                 alpha: float = 0.01, lam="auto", lambda_ratio: float = 0.1, refit: bool = True,
                 methods=(GLHAD, BENCHMARK)):
        if system.gains is None:
            system = synthesize(system)
        self.system = system
        self.structures = build_structures(system) if structures is None else structures
        self.loop = ClosedLoop(system)
        self.detectors = {}
        for m in methods:
            kw = {"lambda_ratio": lambda_ratio, "refit": refit} if m == GLHAD else {}
            self.detectors[m] = make_detector(m, system, self.structures, alpha, lam, **kw)
        S = self.structures.Sigma_eps
        self._cov_pinv = [stage_cov_pinv(S[sl, sl]) for sl in system.block_slices()]

    def attack_delta(self, rng, stage, snr, direction=None):
        """Draw (or use) a direction and scale it to the requested SNR."""
        n = self.system.stages[stage].n
        d = random_direction(rng, n) if direction is None else np.asarray(direction, dtype=float)
        vecs, vals = self._cov_pinv[stage]
        c = vecs.T @ d
        base = float(np.sqrt(np.sum(c * c / vals)))
        if base <= 0:
            raise ValueError("attack direction lies in the null space of the stage covariance")
        return (snr / base) * d

    def product(self, rng, attack: Optional[AttackSpec]):
        if attack is None:
            return self.loop.measurements(rng, 1)[0]
        delta = attack.delta
        if delta is None:
            delta = self.attack_delta(rng, attack.stage, attack.snr, attack.direction)
        return self.loop.measurements(rng, 1, attack.stage, delta)[0]


def run_lengths(bench: Bench, attack: Optional[AttackSpec], rng: np.random.Generator, horizon: int = 1000,
                detectors: Optional[dict] = None) -> dict:
    """First alarming product (1-based) per detector on one shared product stream.

    Returns ``{method: (run_length, censored)}``; censored runs report ``horizon``.
    """
    detectors = bench.detectors if detectors is None else detectors
    pending = dict(detectors)
    out = {}
    for t in range(1, horizon + 1):
        y = bench.product(rng, attack)
        for name in list(pending):
            if pending[name](y).alarmed:
                out[name] = (t, False)
                del pending[name]
        if not pending:
            break
    for name in pending:
        out[name] = (horizon, True)
    return out


def run_length(system: SystemModel, structures: StructureMatrices, method: Union[str, Callable],
               attack: Optional[AttackSpec], alpha: float = 0.01, seed: int = 0, horizon: int = 1000,
               lam="auto", bench: Optional[Bench] = None):
    """Run length of one detector; ``method`` may be a name or any detector callable.

    Returns ``(run_length, censored)``.
    """
    if bench is None:
        bench = Bench(system, structures, alpha, lam, methods=())
    if callable(method):
        det = method
    else:
        det = bench.detectors.get(method) or make_detector(method, bench.system, bench.structures, alpha, lam)
    rng = np.random.default_rng(seed)
    return run_lengths(bench, attack, rng, horizon, {"d": det})["d"]


@dataclass
class ExperimentReport:
    K: int
    methods: list
    arl_rows: list = field(default_factory=list)          # dicts: method, snr, stage, replicate, run_length, censored
    confusion: dict = field(default_factory=dict)         # (method, snr) -> (K+1) x (K+1) alarmed counts
    null_confusion: dict = field(default_factory=dict)    # method -> K+1 counts of predicted stage under the null
    loc_trials: dict = field(default_factory=dict)        # (method, snr, stage) -> number of trials
    null_trials: int = 0

    def arl_samples(self, method, snr, stage):
        return np.array([r["run_length"] for r in self.arl_rows
                         if r["method"] == method and r["snr"] == snr and r["stage"] == stage])

    def accuracy(self, method, snr, stage) -> float:
        """Share of single-product trials localized to the true stage."""
        n = self.loc_trials.get((method, snr, stage), 0)
        return float(self.confusion[(method, snr)][stage, stage]) / n if n else float("nan")

    def null_alarm_rate(self, method) -> float:
        return float(self.null_confusion[method].sum()) / self.null_trials if self.null_trials else float("nan")


def _cell(args):
    """One (snr, stage) cell: run-length and localization replications."""
    bench, plan, snr_idx, snr, stage_idx, stage, reps, blocks = args
    arl_block, loc_block = blocks
    attack = None if stage is None else AttackSpec(stage=stage, snr=snr)
    arl, loc = [], []
    for rep in range(reps):
        rl = run_lengths(bench, attack, _trial_rng(plan.master_seed, arl_block, snr_idx, stage_idx, rep), plan.horizon)
        arl.append(rl)
        y = bench.product(_trial_rng(plan.master_seed, loc_block, snr_idx, stage_idx, rep), attack)
        loc.append({m: det(y).localized for m, det in bench.detectors.items()})
    return snr_idx, stage_idx, arl, loc


def run_experiment(plan: ExperimentPlan, jobs: int = 1, bench: Optional[Bench] = None) -> ExperimentReport:
    system = plan.system
    if not isinstance(system, SystemModel):
        system = load_system(system)
    if bench is None:
        bench = Bench(system, alpha=plan.alpha, lam=plan.lam, lambda_ratio=plan.lambda_ratio,
                      refit=plan.refit, methods=tuple(plan.methods))
    K = bench.system.K
    stages = list(range(K + 1)) if plan.stages_to_attack is None else list(plan.stages_to_attack)
    for s in stages:
        if not 0 <= s <= K:
            raise ValueError(f"attack stage {s} outside 0..{K}")
    null_reps = plan.replications if plan.null_replications is None else plan.null_replications

    # null calibration block first
    tasks = [(bench, plan, 0, 0.0, 0, None, null_reps, (NULL_ARL_BLOCK, NULL_LOC_BLOCK))]
    for i, snr in enumerate(plan.snr_levels):
        for j, stage in enumerate(stages):
            tasks.append((bench, plan, i, float(snr), j, stage, plan.replications, (ARL_BLOCK, LOC_BLOCK)))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_cell, tasks))
    else:
        results = [_cell(t) for t in tasks]

    methods = list(bench.detectors)
    rep = ExperimentReport(K=K, methods=methods, null_trials=null_reps)
    for m in methods:
        rep.null_confusion[m] = np.zeros(K + 1, dtype=int)
        for snr in plan.snr_levels:
            rep.confusion[(m, float(snr))] = np.zeros((K + 1, K + 1), dtype=int)
    # results are in task order, so aggregation never depends on completion order
    for task, (snr_idx, stage_idx, arl, loc) in zip(tasks, results):
        stage, snr = task[5], task[3]
        for r, rl in enumerate(arl):
            for m in methods:
                length, cens = rl[m]
                rep.arl_rows.append({"method": m, "snr": snr, "stage": stage, "replicate": r,
                                     "run_length": length, "censored": cens})
        for pred in loc:
            for m in methods:
                if stage is None:
                    if pred[m] is not None:
                        rep.null_confusion[m][pred[m]] += 1
                else:
                    key = (m, snr, stage)
                    rep.loc_trials[key] = rep.loc_trials.get(key, 0) + 1
                    if pred[m] is not None:
                        rep.confusion[(m, snr)][stage, pred[m]] += 1
    return rep


# --------------------------------------------------------------------------
# CSV output


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return "none"
    return format(float(x), ".17g")


def _stage(s):
    return "none" if s is None else str(s)


def _writer(path: Path, header, timestamp: bool):
    fh = path.open("w", newline="")
    if timestamp:
        fh.write(f"# generated {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def summarize(rep: ExperimentReport, method, snr, stage) -> dict:
    x = rep.arl_samples(method, snr, stage).astype(float)
    cens = sum(1 for r in rep.arl_rows if r["method"] == method and r["snr"] == snr
               and r["stage"] == stage and r["censored"])
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    row = {
        "method": method, "snr": snr, "stage": stage, "replications": x.size,
        "arl_mean": x.mean(), "arl_se": x.std(ddof=1) / np.sqrt(x.size) if x.size > 1 else 0.0,
        "arl_q1": q1, "arl_median": med, "arl_q3": q3, "censored": cens,
    }
    if stage is None:
        alarms = int(rep.null_confusion[method].sum())
        row.update(loc_trials=rep.null_trials, loc_alarms=alarms, loc_correct=None, accuracy=None,
                   false_alarm_rate=alarms / rep.null_trials if rep.null_trials else None)
    else:
        n = rep.loc_trials.get((method, snr, stage), 0)
        row_counts = rep.confusion[(method, snr)][stage]
        row.update(loc_trials=n, loc_alarms=int(row_counts.sum()), loc_correct=int(row_counts[stage]),
                   accuracy=rep.accuracy(method, snr, stage), false_alarm_rate=None)
    return row


SUMMARY_COLUMNS = ["method", "snr", "stage", "replications", "arl_mean", "arl_se", "arl_q1", "arl_median",
                   "arl_q3", "censored", "loc_trials", "loc_alarms", "loc_correct", "accuracy",
                   "false_alarm_rate"]


def write_report(rep: ExperimentReport, out_dir, timestamp: bool = True) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fh, w = _writer(out / "arl.csv", ["method", "snr", "stage", "replicate", "run_length", "censored"], timestamp)
    with fh:
        for r in rep.arl_rows:
            w.writerow([r["method"], repr(r["snr"]), _stage(r["stage"]), r["replicate"], r["run_length"],
                        fmt(r["censored"])])
    paths.append(out / "arl.csv")

    fh, w = _writer(out / "localization.csv", ["method", "snr", "true_stage", "predicted_stage", "count"], timestamp)
    with fh:
        for m in rep.methods:
            for k, c in enumerate(rep.null_confusion[m]):
                w.writerow([m, repr(0.0), "none", k, int(c)])
            for (mm, snr), M in rep.confusion.items():
                if mm != m:
                    continue
                for i in range(M.shape[0]):
                    if not any(key == (m, snr, i) for key in rep.loc_trials):
                        continue
                    for j in range(M.shape[1]):
                        w.writerow([m, repr(snr), i, j, int(M[i, j])])
    paths.append(out / "localization.csv")

    keys = []
    for r in rep.arl_rows:
        key = (r["method"], r["snr"], r["stage"])
        if key not in keys:
            keys.append(key)
    fh, w = _writer(out / "summary.csv", SUMMARY_COLUMNS, timestamp)
    with fh:
        for key in keys:
            row = summarize(rep, *key)
            w.writerow([row["method"], repr(row["snr"]), _stage(row["stage"])] +
                       [fmt(row[c]) for c in SUMMARY_COLUMNS[3:]])
    paths.append(out / "summary.csv")
    return paths

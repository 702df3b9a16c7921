"""Built-in consistency checks used by ``mms-glhad selftest``."""
from __future__ import annotations

import numpy as np

from .detect import BenchmarkDetector, GlhadDetector
from .model import SystemModel
from .simulate import ClosedLoop
from .structure import build_structures, compare_routes


def null_exceedance(system: SystemModel, reps: int, alpha: float, seed: int, detectors=None):
    """Per-stage and family-wise alarm rates over ``reps`` attack-free products."""
    S = build_structures(system)
    if detectors is None:
        detectors = {"glhad": GlhadDetector(S, alpha), "benchmark": BenchmarkDetector(system, S.Sigma_eps, alpha)}
    Y = ClosedLoop(system).measurements(np.random.default_rng(seed), reps)
    out = {}
    for name, det in detectors.items():
        exceed = np.zeros(system.K + 1)
        any_alarm = 0
        for y in Y:
            res = det(y)
            exceed += res.t2 > res.ucl
            any_alarm += res.alarmed
        out[name] = (exceed / reps, any_alarm / reps)
    return out


def run_selftest(system: SystemModel, reps: int = 10_000, alpha: float = 0.01, seed: int = 0,
                 tol: float = 1e-8, echo=print) -> bool:
    ok = True
    for name, (err, bad) in compare_routes(system, tol).items():
        passed = err <= tol
        ok &= passed
        echo(f"{'PASS' if passed else 'FAIL'} closed-form {name} vs impulse oracle: max abs err {err:.3e}"
             + ("" if passed else f" blocks {bad}"))

    K1 = system.K + 1
    fw_target = 1.0 - (1.0 - alpha) ** K1
    se_stage = np.sqrt(alpha * (1 - alpha) / reps)
    se_fw = np.sqrt(fw_target * (1 - fw_target) / reps)
    for name, (stage_rates, fw) in null_exceedance(system, reps, alpha, seed).items():
        for k, rate in enumerate(stage_rates):
            passed = abs(rate - alpha) <= 3 * se_stage
            ok &= passed
            echo(f"{'PASS' if passed else 'FAIL'} {name} null exceedance stage {k}: {rate:.4f} "
                 f"(target {alpha:.4f} +/- {3 * se_stage:.4f})")
        passed = abs(fw - fw_target) <= 3 * se_fw
        ok &= passed
        echo(f"{'PASS' if passed else 'FAIL'} {name} family-wise null alarm rate: {fw:.4f} "
             f"(target {fw_target:.4f} +/- {3 * se_fw:.4f})")
    return bool(ok)

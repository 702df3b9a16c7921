from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from mms_glhad.control import synthesize
from mms_glhad.detect import (
    BenchmarkDetector, GlhadDetector, benchmark_detect, chi2_quantile, decide, glhad_detect, make_detector,
    quadratic_form,
)
from mms_glhad.model import AttackSpec, random_system
from mms_glhad.selftest import null_exceedance
from mms_glhad.simulate import ClosedLoop, make_attack, random_direction, run_product
from mms_glhad.structure import GeometryError

from conftest import noiseless


# --- chi-square quantile

def _bisect_quantile(p, d):
    lo, hi = 0.0, 1.0
    while special.gammainc(d / 2, hi / 2) < p:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if special.gammainc(d / 2, mid / 2) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_chi2_table_values():
    assert chi2_quantile(0.95, 5) == pytest.approx(11.0705, abs=1e-3)
    assert chi2_quantile(0.5, 1) == pytest.approx(0.6745 ** 2, abs=1e-3)
    assert chi2_quantile(0.5, 1) == pytest.approx(0.4549, abs=1e-4)
    assert chi2_quantile(1e-12, 3) < 1e-7


@settings(max_examples=100, deadline=None)
@given(p=st.floats(1e-6, 1 - 1e-6), d=st.integers(1, 40))
def test_chi2_matches_bisection(p, d):
    assert chi2_quantile(p, d) == pytest.approx(_bisect_quantile(p, d), rel=1e-9)


@pytest.mark.parametrize("p, d", [(0.0, 2), (1.0, 2), (0.5, 0), (-0.1, 3), (0.5, 0.5)])
def test_chi2_domain(p, d):
    with pytest.raises(ValueError):
        chi2_quantile(p, d)


# --- decision rule

def test_quadratic_form_25():
    assert quadratic_form([3.0, 4.0], [1.0, 1.0]) == 25.0
    res = decide("glhad", [0.0, 25.0], [9.21, 9.21])
    assert res.alarmed_stages == (1,) and res.localized == 1


def test_ties_go_to_lowest_stage():
    res = decide("glhad", [1.0, 30.0, 30.0, 2.0], [5.0] * 4)
    assert res.alarmed_stages == (1, 2) and res.localized == 1


def test_no_alarm_without_exceedance():
    res = decide("glhad", [1.0, 2.0], [5.0, 5.0], delta_hat=np.ones(4))
    assert not res.alarmed and res.localized is None


@settings(max_examples=100, deadline=None)
@given(t2=st.lists(st.floats(0, 100), min_size=1, max_size=6), c=st.floats(1e-3, 1e3))
def test_argmax_invariance(t2, c):
    ucl = np.full(len(t2), 10.0)
    a = decide("glhad", t2, ucl)
    b = decide("glhad", c * np.array(t2), c * ucl)
    assert a.localized == b.localized
    if a.alarmed:
        assert a.localized in a.alarmed_stages
        assert a.t2[a.localized] == max(a.t2[k] for k in a.alarmed_stages)
    else:
        assert a.localized is None


# --- detectors on the shipped system

def test_dofs_and_ucls(shipped, shipped_structures):
    g = GlhadDetector(shipped_structures)
    b = BenchmarkDetector(shipped, shipped_structures.Sigma_eps)
    assert g.dofs == [2, 2, 2, 2] and b.dofs == [2, 2, 2, 2]
    np.testing.assert_allclose(g.ucl, chi2_quantile(0.99, 2))
    np.testing.assert_allclose(b.ucl, g.ucl)


def test_noiseless_no_alarm(shipped, shipped_structures):
    y = run_product(noiseless(shipped), seed=0).y
    for res in (glhad_detect(shipped_structures, y), benchmark_detect(shipped, y)):
        assert np.all(res.t2 <= 1e-9)
        assert not res.alarmed


def test_benchmark_consistent_measurement(shipped, shipped_structures):
    rng = np.random.default_rng(0)
    y = np.concatenate([s.C @ rng.standard_normal(s.m) for s in shipped.stages])
    res = BenchmarkDetector(shipped, shipped_structures.Sigma_eps)(y)
    assert np.all(res.t2 <= 1e-9) and not res.alarmed


def test_benchmark_rejects_identity_sensors():
    rng = np.random.default_rng(0)
    s = random_system(rng, 2, 3, [3, 3, 3])
    s = replace(s, stages=tuple(replace(st_, C=np.eye(3)) for st_ in s.stages))
    s = synthesize(s)
    with pytest.raises(GeometryError, match="spans all"):
        BenchmarkDetector(s, np.eye(9))


def test_benchmark_rejects_rank_deficient_stage(shipped, shipped_structures):
    stages = list(shipped.stages)
    C = stages[1].C.copy()
    C[:, 2] = C[:, 0]
    stages[1] = replace(stages[1], C=C)
    with pytest.raises(GeometryError, match="stage 1"):
        BenchmarkDetector(replace(shipped, stages=tuple(stages)), shipped_structures.Sigma_eps)


def test_residual_ignores_inputs(shipped, shipped_structures):
    other = replace(shipped, x0=np.array([5.0, -3.0, 0.2]), refs=tuple(10 * r + 1 for r in shipped.refs))
    for seed in range(5):
        a = run_product(shipped, seed=seed).y
        b = run_product(other, seed=seed).y
        assert np.abs(a - b).max() > 1e-3
        geom = shipped_structures.geometry
        np.testing.assert_allclose(geom.residual(a), geom.residual(b), atol=1e-9)


@pytest.mark.parametrize("stage", [0, 1, 2, 3])
def test_infinite_snr_recovery(shipped, shipped_structures, stage):
    S = shipped_structures
    s, d = S.groups[stage]
    base = noiseless(shipped)
    y = run_product(base, seed=0).y + 50.0 * S.Rp[:, s:s + d] @ np.ones(d)
    res = GlhadDetector(S)(y)
    assert res.localized == stage
    assert res.alarmed_stages == (stage,)
    # a raw bias on that stage, noiseless
    delta = 5.0 * random_direction(np.random.default_rng(stage), 5)
    y = run_product(base, AttackSpec(stage=stage, delta=delta), seed=0).y
    assert GlhadDetector(S)(y).localized == stage


def test_stage2_snr4_majority(shipped, shipped_structures):
    det = GlhadDetector(shipped_structures)
    loop = ClosedLoop(shipped)
    alarms = correct = 0
    for rep in range(300):
        rng = np.random.default_rng([7, rep])
        atk = make_attack(shipped, shipped_structures, 2, random_direction(rng, 5), 4.0)
        res = det(loop.measurements(rng, 1, 2, atk.delta)[0])
        alarms += res.alarmed
        correct += res.localized == 2
    assert alarms > 0 and correct > alarms / 2


def test_shape_checks(shipped, shipped_structures):
    with pytest.raises(ValueError):
        GlhadDetector(shipped_structures)(np.zeros(19))
    with pytest.raises(ValueError):
        BenchmarkDetector(shipped, shipped_structures.Sigma_eps)(np.zeros(21))
    with pytest.raises(ValueError):
        GlhadDetector(shipped_structures, alpha=1.0)
    with pytest.raises(ValueError):
        make_detector("cusum", shipped, shipped_structures)


def test_refit_equals_benchmark_when_sensor_models_are_full_rank(shipped, shipped_structures):
    # col(H) = col(diag C) here, so both residuals coincide and refit statistics agree
    g = GlhadDetector(shipped_structures)
    b = BenchmarkDetector(shipped, shipped_structures.Sigma_eps)
    np.testing.assert_allclose(shipped_structures.proj, b.geometry.proj, atol=1e-10)
    Y = ClosedLoop(shipped).measurements(np.random.default_rng(0), 400)
    Y[:, 10:15] += 1.5
    for y in Y:
        rg, rb = g(y), b(y)
        assert rg.alarmed_stages == rb.alarmed_stages
        assert rg.localized == rb.localized


def test_shrunk_statistics_never_exceed_refit(shipped_structures):
    g, shrunk = GlhadDetector(shipped_structures), GlhadDetector(shipped_structures, refit=False)
    rng = np.random.default_rng(1)
    for _ in range(50):
        y = rng.standard_normal(20)
        assert np.all(shrunk(y).t2 <= g(y).t2 + 1e-12)


def test_fixed_lambda(shipped_structures):
    y = np.random.default_rng(2).standard_normal(20)
    res = GlhadDetector(shipped_structures, lam=1e9)(y)
    assert not res.alarmed and not np.any(res.delta_hat)


def test_null_calibration_random_system():
    rng = np.random.default_rng(12)
    s = synthesize(random_system(rng, 2, 2, [4, 5, 4]))
    reps, alpha = 10_000, 0.01
    se = np.sqrt(alpha * (1 - alpha) / reps)
    for name, (rates, _) in null_exceedance(s, reps, alpha, seed=3).items():
        assert np.all(np.abs(rates - alpha) <= 3 * se), (name, rates)

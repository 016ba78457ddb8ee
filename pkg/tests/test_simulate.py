"""Cohort generation, enrollment laws, and true regime values."""

import numpy as np
import pytest

from smartmon import (
    EnrollmentProcess,
    calibrate_effects,
    enumerate_embedded_regimes,
    simulate_cohort,
    true_value,
)
from smartmon.design import History
from smartmon.fixtures import (
    bp_design,
    bp_model,
    pain_design,
    pain_model,
    pain_targets,
    registry_design,
    registry_model,
    staged_enrollment,
    uniform_enrollment,
)


def test_uniform_enrollment_draw_and_cdf():
    proc = uniform_enrollment(1000.0)
    rng = np.random.default_rng(0)
    days = proc.draw(5000, rng)
    assert days.min() >= 0 and days.max() <= 1000
    assert abs(days.mean() - 500) < 15
    assert proc.cdf(-5) == 0.0
    assert proc.cdf(500) == pytest.approx(0.5)
    assert proc.cdf(2000) == 1.0


def test_staged_enrollment_composition():
    """Period probabilities reproduce the prescribed interim composition."""
    proc = staged_enrollment(50, 10, 10, analysis_day=500.0,
                             stage_gap_days=(100.0, 100.0))
    # completed by day 500 <=> enrolled by day 300
    assert proc.cdf(300.0) == pytest.approx(0.5)
    assert proc.cdf(400.0) == pytest.approx(0.6)
    assert proc.cdf(500.0) == pytest.approx(0.7)
    assert proc.cdf(1000.0) == pytest.approx(1.0)
    rng = np.random.default_rng(1)
    days = proc.draw(20000, rng)
    assert np.mean(days <= 300) == pytest.approx(0.5, abs=0.02)
    assert np.mean(days <= 500) == pytest.approx(0.7, abs=0.02)


def test_staged_enrollment_rejects_impossible_timing():
    with pytest.raises(ValueError):
        staged_enrollment(50, 10, 10, analysis_day=150.0,
                          stage_gap_days=(100.0, 100.0))
    with pytest.raises(ValueError):
        staged_enrollment(60, 30, 30, analysis_day=500.0,
                          stage_gap_days=(100.0, 100.0))


def test_simulate_cohort_deterministic_and_well_formed():
    design = pain_design()
    model = pain_model("null")
    enroll = uniform_enrollment().draw(80, np.random.default_rng(5))
    c1 = simulate_cohort(model, design, enroll, np.random.default_rng(9))
    c2 = simulate_cohort(model, design, enroll, np.random.default_rng(9))
    assert np.array_equal(c1.outcome, c2.outcome)
    assert np.array_equal(c1.acodes[1], c2.acodes[1])
    assert c1.n == 80
    # every assigned action is feasible for its cell, and positions agree
    for i in range(c1.n):
        h1 = History(covariates=[c1.blocks[0][i]], actions=[])
        assert c1.acodes[0][i] in design.options(h1)
        h2 = History(covariates=[c1.blocks[0][i], c1.blocks[1][i]],
                     actions=[int(c1.acodes[0][i])])
        assert c1.acodes[1][i] in design.options(h2)
        assert c1.apos[1][i] == design.action_position(h2, int(c1.acodes[1][i]))


def test_forced_regime_is_always_consistent():
    design = pain_design()
    regime = enumerate_embedded_regimes(design)[2]
    cohort = simulate_cohort(
        pain_model("null"), design, np.zeros(60), np.random.default_rng(4),
        forced_regime=regime,
    )
    assert np.all(cohort.acodes[0] == regime.stage1)
    r2 = cohort.blocks[1][:, design.response_coords[2]]
    want = np.where(r2 == 1, regime.rules[(2, 1)], regime.rules[(2, 0)])
    assert np.array_equal(cohort.acodes[1], want)


@pytest.mark.parametrize("scenario", ["null", "stage1", "graded"])
def test_pain_calibration_hits_targets(scenario):
    design = pain_design()
    model = pain_model(scenario)
    vals = [true_value(model, design, r)[0]
            for r in enumerate_embedded_regimes(design)]
    assert vals == pytest.approx(pain_targets(scenario), abs=1e-8)


def test_true_value_mc_agrees_with_analytic():
    design = pain_design()
    model = pain_model("stage1")
    regime = enumerate_embedded_regimes(design)[0]
    exact, se0 = true_value(model, design, regime, method="analytic")
    assert se0 == 0.0
    mc, se = true_value(model, design, regime, method="mc", mc_reps=40_000, seed=2)
    assert se > 0
    assert abs(mc - exact) < 4 * se


def test_bp_true_values():
    design = bp_design()
    model = bp_model()
    vals = [true_value(model, design, r)[0]
            for r in enumerate_embedded_regimes(design)]
    assert vals == pytest.approx(
        [37.5, 35.0, 35.0, 32.5, 26.5, 23.0, 23.0, 19.5], abs=1e-8
    )


def test_registry_scenarios():
    design = registry_design()
    for scenario, want in (
        ("null", (47.5, 47.5, 47.5, 47.5)),
        ("interaction", (47.5, 47.5, 47.5, 50.5)),
        ("stage1", (50.0, 50.0, 47.5, 47.5)),
    ):
        model = registry_model(scenario)
        vals = [true_value(model, design, r)[0]
                for r in enumerate_embedded_regimes(design)]
        assert vals == pytest.approx(want, abs=1e-8)


def test_calibrate_effects_unattainable_targets_raise():
    design = pain_design()
    template = pain_model("null")
    with pytest.raises(ValueError):
        calibrate_effects(template, design, (1.0,) * 8, free=["base0"])


def test_periods_enrollment_cdf_piecewise():
    proc = EnrollmentProcess(
        kind="periods", bounds=(0.0, 200.0, 600.0, 1000.0), probs=(0.5, 0.2, 0.3)
    )
    assert proc.cdf(0) == 0.0
    assert proc.cdf(100) == pytest.approx(0.25)
    assert proc.cdf(200) == pytest.approx(0.5)
    assert proc.cdf(400) == pytest.approx(0.6)
    assert proc.cdf(1000) == pytest.approx(1.0)

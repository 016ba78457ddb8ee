"""Interim observation, coarsening levels, and progress/hazard estimates.

The hazard/survivor numbers in the hand-built cases below follow the
discrete coarsening model: at odd level 2k-1 the hazard is one minus the
propensity of the regime's stage-k action; at even level 2k it is the
conditional probability of stalling at stage k, (nu_k - nu_{k+1})/nu_k.
Survivor values multiply the progress rate by the propensities along the
regime's path so far.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smartmon import (
    DesignError,
    EstimationError,
    ProgressRates,
    Snapshot,
    coarsening_level,
    enumerate_embedded_regimes,
    estimate_nu,
    estimate_propensities,
    hazard_and_survivor,
    observe,
    observe_cohort,
    simulate_cohort,
)
from smartmon.snapshot import ObservedRecord
from smartmon.fixtures import pain_design, pain_model, uniform_enrollment

DESIGN = pain_design()  # stage gaps (100, 100)
REGIMES = enumerate_embedded_regimes(DESIGN)


class _Traj:
    def __init__(self, enroll_day, stage_days, outcome=50.0):
        self.enroll_day = enroll_day
        self.stage_days = stage_days
        self.covariates = [np.array([0.1, 0.0]), np.array([0.2, 0.0])]
        self.actions = [0, 2]
        self.action_positions = [0, 0]
        self.outcome = outcome


def test_observe_masks_by_calendar_time():
    # stage_days = (stage-2 assignment day, outcome day)
    traj = _Traj(enroll_day=40.0, stage_days=(140.0, 240.0))
    not_yet = observe(traj, DESIGN, 20.0)
    assert (not_yet.gamma, not_yet.kappa, not_yet.delta) == (0, 0, 0)
    stage1 = observe(traj, DESIGN, 100.0)
    assert (stage1.gamma, stage1.kappa, stage1.delta) == (1, 1, 0)
    assert stage1.outcome is None and len(stage1.actions) == 1
    stage2 = observe(traj, DESIGN, 160.0)
    assert (stage2.kappa, stage2.delta) == (2, 0)
    done = observe(traj, DESIGN, 240.0)
    assert (done.kappa, done.delta) == (2, 1)
    assert done.outcome == 50.0


def test_observed_record_validation():
    with pytest.raises(DesignError):
        ObservedRecord(gamma=0, kappa=1, delta=0)
    with pytest.raises(DesignError):
        ObservedRecord(gamma=1, kappa=1, delta=1, covariates=((0.0,),),
                       actions=(0,), action_positions=(0,), outcome=None)


def _record(actions, kappa, delta, response=0, outcome=None):
    cov = [(0.1, 0.0), (0.2, float(response))][:kappa]
    return ObservedRecord(
        gamma=1, kappa=kappa, delta=delta, enroll_day=0.0,
        covariates=tuple(cov), actions=tuple(actions[:kappa]),
        action_positions=tuple(0 for _ in actions[:kappa]),
        outcome=outcome,
    )


def test_coarsening_levels_by_hand():
    reg = REGIMES[0]  # stage1 = 0, non-responder -> 2, responder -> 3
    assert coarsening_level(_record([1], 1, 0), reg, DESIGN) == 1.0
    assert coarsening_level(_record([0], 1, 0), reg, DESIGN) == 2.0
    assert coarsening_level(_record([0, 3], 2, 0), reg, DESIGN) == 3.0
    assert coarsening_level(_record([0, 2], 2, 0), reg, DESIGN) == 4.0
    assert math.isinf(coarsening_level(_record([0, 2], 2, 1, outcome=47.0),
                                       reg, DESIGN))
    # responders follow the (2, 1) rule instead
    assert coarsening_level(_record([0, 3], 2, 0, response=1), reg, DESIGN) == 4.0
    with pytest.raises(DesignError):
        coarsening_level(ObservedRecord(gamma=0, kappa=0, delta=0), reg, DESIGN)


def test_estimate_nu_average_hand_proportions():
    rng = np.random.default_rng(7)
    enroll = uniform_enrollment().draw(300, rng)
    cohort = simulate_cohort(pain_model("null"), DESIGN, enroll, rng)
    snap = observe_cohort(cohort, DESIGN, 450.0)
    nu = estimate_nu(snap)
    assert nu.reached(1) == 1.0
    assert nu.reached(2) == pytest.approx(np.mean(snap.kappa >= 2))
    assert nu.completed == pytest.approx(np.mean(snap.delta == 1))
    # enrollment is uniform, so reach fractions track the gap days
    assert 0 < nu.completed < nu.reached(2) < 1


def test_estimate_nu_logistic_close_to_average():
    rng = np.random.default_rng(8)
    enroll = uniform_enrollment().draw(400, rng)
    cohort = simulate_cohort(pain_model("null"), DESIGN, enroll, rng)
    snap = observe_cohort(cohort, DESIGN, 500.0)
    avg = estimate_nu(snap, "average")
    logi = estimate_nu(snap, "logistic")
    assert logi.reached(2) == pytest.approx(avg.reached(2), abs=0.05)
    assert logi.completed == pytest.approx(avg.completed, abs=0.05)
    with pytest.raises(ValueError):
        estimate_nu(snap, "bogus")


def test_progress_rates_validation():
    with pytest.raises(DesignError):
        ProgressRates((0.9, 0.5, 0.4))
    with pytest.raises(DesignError):
        ProgressRates((1.0, 0.5, 0.6))


def test_hazard_and_survivor_hand_case():
    """nu = (1, 0.6, 0.4) with equal two-option randomization at both stages."""
    rates = ProgressRates((1.0, 0.6, 0.4))
    reg = REGIMES[0]
    complete = _record([0, 2], 2, 1, outcome=47.0)
    lam, surv = hazard_and_survivor(complete, reg, rates, DESIGN)
    assert set(lam) == {1, 2, 3, 4}
    assert lam[1] == pytest.approx(0.5)        # 1 - pi_1
    assert surv[1] == pytest.approx(0.5)       # nu_1 * pi_1
    assert lam[2] == pytest.approx(0.4)        # (nu_1 - nu_2) / nu_1
    assert surv[2] == pytest.approx(0.3)       # nu_2 * pi_1
    assert lam[3] == pytest.approx(0.5)        # 1 - pi_2
    assert surv[3] == pytest.approx(0.15)      # nu_2 * pi_2 * pi_1
    assert lam[4] == pytest.approx(1.0 / 3.0)  # (nu_2 - nu_3) / nu_2
    assert surv[4] == pytest.approx(0.1)       # nu_3 * pi_2 * pi_1


def test_hazard_at_risk_stops_after_deviation():
    rates = ProgressRates((1.0, 0.6, 0.4))
    reg = REGIMES[0]
    lam, _ = hazard_and_survivor(_record([1], 1, 0), reg, rates, DESIGN)
    assert set(lam) == {1}
    lam2, _ = hazard_and_survivor(_record([0, 3], 2, 0), reg, rates, DESIGN)
    assert set(lam2) == {1, 2, 3}


def test_degenerate_progress_rate_raises():
    rates = ProgressRates((1.0, 0.0, 0.0))
    reg = REGIMES[0]
    with pytest.raises(EstimationError):
        hazard_and_survivor(_record([0, 2], 2, 1, outcome=47.0), reg, rates, DESIGN)


@settings(max_examples=40, deadline=None)
@given(nu2=st.floats(0.2, 1.0), frac=st.floats(0.05, 1.0))
def test_survivor_decreasing_and_hazards_bounded(nu2, frac):
    nu3 = nu2 * frac
    rates = ProgressRates((1.0, float(nu2), float(nu3)))
    reg = REGIMES[0]
    lam, surv = hazard_and_survivor(_record([0, 2], 2, 1, outcome=1.0),
                                    reg, rates, DESIGN)
    levels = sorted(surv)
    assert all(0.0 <= lam[r] <= 1.0 for r in levels)
    vals = [surv[r] for r in levels]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 0


def test_snapshot_completers_subset():
    rng = np.random.default_rng(9)
    enroll = uniform_enrollment().draw(150, rng)
    cohort = simulate_cohort(pain_model("null"), DESIGN, enroll, rng)
    snap = observe_cohort(cohort, DESIGN, 420.0, n_planned=150)
    comp = snap.completers()
    assert comp.n == int((snap.delta == 1).sum())
    assert np.all(comp.delta == 1)
    assert comp.n_planned == snap.n_planned
    assert not np.isnan(comp.outcome).any()


def test_estimate_propensities_recovers_randomization():
    rng = np.random.default_rng(10)
    cohort = simulate_cohort(pain_model("null"), DESIGN, np.zeros(4000), rng)
    snap = observe_cohort(cohort, DESIGN, 1500.0)
    table = estimate_propensities(snap, DESIGN)
    for key, probs in table.items():
        options = DESIGN.feasible[key]
        assert np.sum(probs) == pytest.approx(1.0)
        assert probs == pytest.approx([1 / len(options)] * len(options), abs=0.05)

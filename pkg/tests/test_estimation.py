"""Value estimators: hand-checked weights, algebraic identities, covariance."""

import numpy as np
import pytest

from smartmon import (
    ControlSpec,
    EstimationError,
    Snapshot,
    aipwe,
    enumerate_embedded_regimes,
    estimate_nu,
    iaipwe,
    ipwe,
    observe_cohort,
    point_values,
    simulate_cohort,
    stacked_estimate,
)
from smartmon.estimation import _telescoped_contributions, _weights
from smartmon.sequential import z_statistics
from smartmon.snapshot import RegimeView
from smartmon.fixtures import pain_design, pain_model, pain_q_terms, uniform_enrollment

DESIGN = pain_design()
REGIMES = enumerate_embedded_regimes(DESIGN)
QT = pain_q_terms()


def _complete_snapshot(rows, t=400.0):
    """Build an all-stages-observed snapshot from (a1, resp, a2, y) rows."""
    n = len(rows)
    a1 = np.array([r[0] for r in rows])
    resp = np.array([r[1] for r in rows], dtype=float)
    a2 = np.array([r[2] for r in rows])
    y = np.array([r[3] for r in rows], dtype=float)
    pos1 = a1.copy()  # stage-1 options are (0, 1)
    pos2 = np.empty(n, dtype=np.int64)
    for i in range(n):
        options = DESIGN.feasible[(2, (int(a1[i]),), int(resp[i]))]
        pos2[i] = options.index(int(a2[i]))
    blocks = [np.stack([np.linspace(0.1, 0.9, n), np.zeros(n)], axis=1),
              np.stack([np.linspace(-0.5, 0.5, n), resp], axis=1)]
    return Snapshot(
        t=t, num_stages=2, enroll=np.zeros(n),
        kappa=np.full(n, 2), delta=np.ones(n, dtype=int),
        blocks=blocks, acodes=[a1, a2], apos=[pos1, pos2], outcome=y,
    )


def test_ipwe_hand_value():
    """Three consistent completers at weight 4 among five records."""
    snap = _complete_snapshot([
        (0, 0, 2, 10.0),   # consistent with regime 0 (full/intensified/...)
        (0, 0, 2, 20.0),
        (0, 0, 2, 20.0),
        (0, 0, 3, 99.0),   # deviates at stage 2
        (1, 0, 0, 99.0),   # deviates at stage 1
    ])
    # weight = 1 / (nu3 * pi2 * pi1) = 1 / (1 * .5 * .5) = 4
    assert ipwe(snap, DESIGN, REGIMES[0]) == pytest.approx(40.0, abs=1e-12)
    # normalized variant divides by the realized weight total 12
    assert ipwe(snap, DESIGN, REGIMES[0], normalized=True) == pytest.approx(
        200.0 / 12.0, abs=1e-12
    )


def test_ipwe_respects_supplied_propensities():
    snap = _complete_snapshot([
        (0, 0, 2, 10.0), (0, 0, 2, 20.0), (0, 0, 2, 20.0),
        (0, 0, 3, 99.0), (1, 0, 0, 99.0),
    ])
    table = {key: (1.0 / len(opts),) * len(opts)
             for key, opts in DESIGN.feasible.items()}
    table[(1, (), None)] = (0.8, 0.2)  # weight becomes 1/(0.5*0.8) = 2.5
    got = ipwe(snap, DESIGN, REGIMES[0], propensities=table)
    assert got == pytest.approx((10 + 20 + 20) * 2.5 / 5, abs=1e-12)


def _interim_snapshot(seed=21, n=300, day=600.0, scenario="null"):
    rng = np.random.default_rng(seed)
    enroll = uniform_enrollment().draw(n, rng)
    cohort = simulate_cohort(pain_model(scenario), DESIGN, enroll, rng)
    return observe_cohort(cohort, DESIGN, day, n_planned=n)


def test_telescoped_equals_levels_form():
    snap = _interim_snapshot()
    for reg in REGIMES[:3]:
        a = iaipwe(snap, DESIGN, reg, QT, form="telescoped")
        b = iaipwe(snap, DESIGN, reg, QT, form="levels")
        assert a == pytest.approx(b, abs=1e-10)
    with pytest.raises(ValueError):
        iaipwe(snap, DESIGN, REGIMES[0], QT, form="other")


def test_interim_estimator_on_complete_data_is_aipwe():
    snap = _interim_snapshot(day=2000.0)  # everyone finished
    assert np.all(snap.delta == 1)
    for reg in REGIMES[:3]:
        assert iaipwe(snap, DESIGN, reg, QT) == pytest.approx(
            aipwe(snap, DESIGN, reg, QT), abs=1e-12
        )


def test_zero_augmentation_collapses_to_ipwe():
    snap = _interim_snapshot()
    rates = estimate_nu(snap)
    reg = REGIMES[1]
    view = RegimeView(snap, DESIGN, reg)
    zeros = [np.zeros(snap.n)] * 2
    contrib = _telescoped_contributions(snap, _weights(view, rates), zeros)
    assert np.mean(contrib) == pytest.approx(
        ipwe(snap, DESIGN, reg), abs=1e-12
    )


def test_aipwe_refuses_partial_data():
    snap = _interim_snapshot()
    assert np.any(snap.delta == 0)
    with pytest.raises(EstimationError):
        aipwe(snap, DESIGN, REGIMES[0], QT)


def test_unidentified_regime_raises():
    snap = _complete_snapshot([(0, 0, 2, 10.0), (0, 0, 3, 12.0)])
    with pytest.raises(EstimationError, match="unidentified"):
        ipwe(snap, DESIGN, REGIMES[-1])


def test_point_values_matches_scalar_estimators():
    snap = _interim_snapshot()
    vals, v0, rates = point_values(
        snap, DESIGN, REGIMES, estimator="iaipwe", q_terms=QT,
        control=ControlSpec.fixed(47.5),
    )
    assert v0 == 47.5
    assert rates.completed == pytest.approx(np.mean(snap.delta == 1))
    for j, reg in enumerate(REGIMES):
        assert vals[j] == pytest.approx(iaipwe(snap, DESIGN, reg, QT), abs=1e-12)


def test_point_values_ipwe_normalization_switch():
    snap = _interim_snapshot()
    raw, _, _ = point_values(snap, DESIGN, REGIMES, estimator="ipwe",
                             ipwe_normalized=False)
    norm, _, _ = point_values(snap, DESIGN, REGIMES, estimator="ipwe",
                              ipwe_normalized=True)
    for j, reg in enumerate(REGIMES):
        assert raw[j] == pytest.approx(ipwe(snap, DESIGN, reg), abs=1e-12)
        assert norm[j] == pytest.approx(
            ipwe(snap, DESIGN, reg, normalized=True), abs=1e-12
        )
    assert not np.allclose(raw, norm)


def test_stacked_estimate_points_and_z():
    snap = _interim_snapshot(seed=5)
    est = stacked_estimate(
        snap, DESIGN, REGIMES, estimator="iaipwe", q_terms=QT,
        control=ControlSpec.fixed(47.5),
    )
    assert est.labels == tuple(r.label for r in REGIMES)
    assert est.n == snap.n
    vals, _, _ = point_values(snap, DESIGN, REGIMES, estimator="iaipwe",
                              q_terms=QT, control=ControlSpec.fixed(47.5))
    assert est.values == pytest.approx(vals, abs=1e-10)
    cv = est.contrast_variances()
    assert np.all(cv > 0)
    z = z_statistics(est, delta=1.0)
    assert z == pytest.approx((est.values - 47.5 - 1.0) / np.sqrt(cv))


def test_arm_control_uses_holdout_completers():
    snap = _interim_snapshot(seed=6)
    est = stacked_estimate(
        snap, DESIGN, REGIMES[:2], estimator="ipwe",
        control=ControlSpec.arm(1),
    )
    mask = (snap.delta == 1) & (snap.acodes[0] == 1)
    assert est.control_value == pytest.approx(np.mean(snap.outcome[mask]))
    assert est.control_variance > 0


def test_sandwich_close_to_bootstrap():
    snap = _interim_snapshot(seed=12, n=400)
    sand = stacked_estimate(snap, DESIGN, REGIMES[:4], estimator="iaipwe",
                            q_terms=QT, control=ControlSpec.fixed(47.5))
    boot = stacked_estimate(snap, DESIGN, REGIMES[:4], estimator="iaipwe",
                            q_terms=QT, control=ControlSpec.fixed(47.5),
                            cov_method="bootstrap", bootstrap_reps=400, seed=3)
    se_s = np.sqrt(sand.contrast_variances())
    se_b = np.sqrt(boot.contrast_variances())
    assert se_b == pytest.approx(se_s, rel=0.25)


def test_sandwich_matches_monte_carlo_spread():
    """Reported SEs should track the replication SD of the point estimates."""
    reps, n = 120, 250
    vals = np.empty((reps, 2))
    for b in range(reps):
        snap = _interim_snapshot(seed=1000 + b, n=n, day=650.0)
        v, _, _ = point_values(snap, DESIGN, REGIMES[:2], estimator="iaipwe",
                               q_terms=QT)
        vals[b] = v
    snap = _interim_snapshot(seed=77, n=n, day=650.0)
    est = stacked_estimate(snap, DESIGN, REGIMES[:2], estimator="iaipwe",
                           q_terms=QT, control=ControlSpec.fixed(47.5))
    mc_sd = vals.std(axis=0, ddof=1)
    assert est.ses == pytest.approx(mc_sd, rel=0.35)

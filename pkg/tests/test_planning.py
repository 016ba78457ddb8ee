"""Power integrals, the sample-size climb, and pilot-based alternatives."""

import numpy as np
import pytest

from smartmon import (
    AlternativeSpec,
    EstimationError,
    build_null_covariance,
    enumerate_embedded_regimes,
    pilot_alternative,
    power,
    sample_size_search,
    solve_boundaries,
)
from smartmon.planning import mu_alternative, replicate_contrasts
from smartmon.estimation import ControlSpec
from smartmon.fixtures import (
    pain_design,
    pain_model,
    pain_q_terms,
    pain_targets,
    uniform_enrollment,
)


def _toy_alt(effect=2.0, rho=0.3, sd=20.0):
    within = np.full((2, 2), rho) + (1 - rho) * np.eye(2)
    cov = build_null_covariance([within, within], (0.5, 1.0))
    return AlternativeSpec(
        regime_values=(47.5 + effect, 47.5),
        control_value=47.5,
        delta=0.0,
        unit_sds=np.full((2, 2), sd),
        null_cov=cov,
    )


def test_alternative_spec_validation():
    with pytest.raises(ValueError):
        _toy_alt(effect=0.0)  # no signal to power against
    alt = _toy_alt()
    with pytest.raises(ValueError):
        AlternativeSpec(alt.regime_values, 47.5, 0.0,
                        np.full((3, 2), 20.0), alt.null_cov)
    with pytest.raises(ValueError):
        AlternativeSpec(alt.regime_values, 47.5, 0.0,
                        np.full((2, 2), -1.0), alt.null_cov)


def test_mu_scales_with_sqrt_n():
    alt = _toy_alt()
    m1 = mu_alternative(200, alt)
    m4 = mu_alternative(800, alt)
    assert m4 == pytest.approx(2.0 * m1)
    assert m1.shape == (2, 2)
    assert m1[0, 1] == 0.0
    with pytest.raises(ValueError):
        mu_alternative(0, alt)


def test_power_near_alpha_when_effect_vanishes():
    alt = _toy_alt(effect=1e-9)
    spec = solve_boundaries(alt.null_cov, alpha=0.05, seed=0)
    res = power(400, alt, spec, method="integral")
    assert res.total == pytest.approx(0.05, abs=0.004)


def test_power_monotone_in_n_and_decomposition():
    alt = _toy_alt()
    spec = solve_boundaries(alt.null_cov, alpha=0.05, seed=0)
    totals = []
    for n in (200, 400, 800, 1600):
        res = power(n, alt, spec, method="integral")
        assert res.total == pytest.approx(sum(res.per_analysis), abs=5e-3)
        totals.append(res.total)
    assert totals == sorted(totals)
    assert totals[-1] > 0.9


def test_simulated_power_agrees_with_integral():
    alt = _toy_alt()
    spec = solve_boundaries(alt.null_cov, alpha=0.05, seed=0)
    exact = power(600, alt, spec, method="integral")
    mc = power(600, alt, spec, method="simulated", reps=40_000, seed=8)
    se = np.sqrt(exact.total * (1 - exact.total) / 40_000)
    assert mc.total == pytest.approx(exact.total, abs=4 * se + 5e-3)
    assert mc.reps == 40_000


def test_sample_size_search_reaches_target_and_is_minimal():
    alt = _toy_alt()
    spec = solve_boundaries(alt.null_cov, alpha=0.05, seed=0)
    res = sample_size_search(0.8, alt, spec, method="integral", seed=0)
    assert res.power >= 0.8 - 0.005
    below = power(res.N - 3, alt, spec, method="integral")
    assert below.total < 0.8 + 0.01
    assert res.N in res.evaluations
    assert res.target == 0.8


def test_search_with_simulated_power_lands_near_integral_answer():
    alt = _toy_alt()
    spec = solve_boundaries(alt.null_cov, alpha=0.05, seed=0)
    exact = sample_size_search(0.8, alt, spec, method="integral", seed=0)
    noisy = sample_size_search(0.8, alt, spec, method="simulated",
                               reps=20_000, seed=5)
    assert abs(noisy.N - exact.N) / exact.N < 0.06


def test_huge_effect_returns_floor():
    alt = _toy_alt(effect=40.0, sd=5.0)
    spec = solve_boundaries(alt.null_cov, alpha=0.05, seed=0)
    res = sample_size_search(0.8, alt, spec, n0=50, method="integral")
    assert res.N == 50
    assert res.power > 0.99


def test_search_rejects_bad_target():
    alt = _toy_alt()
    spec = solve_boundaries(alt.null_cov, alpha=0.05, seed=0)
    with pytest.raises(ValueError):
        sample_size_search(1.2, alt, spec)


def test_search_flags_decreasing_power_as_noise():
    """A shrinking per-N alternative makes the climb see falling power."""
    base = _toy_alt()
    spec = solve_boundaries(base.null_cov, alpha=0.05, seed=0)

    def alt_at(n):
        # per-patient effect shrinking faster than sqrt(n) grows
        return AlternativeSpec(
            regime_values=(47.5 + 170.0 / n, 47.5),
            control_value=47.5, delta=0.0,
            unit_sds=base.unit_sds, null_cov=base.null_cov,
        )

    with pytest.raises(EstimationError, match="decreased"):
        sample_size_search(0.95, alt_at, spec, n0=50, step=40,
                           method="integral", seed=0)


def test_replicate_contrasts_shape_and_seeding():
    design = pain_design()
    regimes = enumerate_embedded_regimes(design)
    kw = dict(
        control=ControlSpec.fixed(47.5),
        q_terms=pain_q_terms(),
        enrollment=uniform_enrollment(),
        analysis_days=(500.0, 1200.0),
        n=250,
        reps=40,
        estimator="iaipwe",
        seed=31,
    )
    a = replicate_contrasts(design, pain_model("null"), regimes, **kw)
    b = replicate_contrasts(design, pain_model("null"), regimes, **kw)
    assert a.shape[1:] == (2, 8)
    assert a.shape[0] >= 38  # failed replicates, if any, are dropped
    assert np.array_equal(a, b)
    assert abs(a[:, 1, :].mean()) < 1.0


def test_pilot_alternative_is_internally_consistent():
    design = pain_design()
    regimes = enumerate_embedded_regimes(design)
    alt = pilot_alternative(
        design, pain_model("stage1"), regimes,
        control=ControlSpec.fixed(47.5),
        q_terms=pain_q_terms(),
        enrollment=uniform_enrollment(),
        analysis_days=(500.0, 1200.0),
        n_pilot=200, reps=150, seed=2,
    )
    assert alt.regime_values == pytest.approx(pain_targets("stage1"), abs=1e-8)
    assert alt.control_value == 47.5
    assert alt.unit_sds.shape == (2, 8)
    assert np.all(alt.unit_sds > 0)
    # interim estimates are noisier than final ones, patient for patient
    assert np.all(alt.unit_sds[0] > alt.unit_sds[1])
    assert alt.null_cov.num_analyses == 2
    assert 0 < alt.null_cov.info_proportions[0] < 1
    assert alt.null_cov.info_proportions[1] == 1.0

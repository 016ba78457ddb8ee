"""Joint null law, rectangle probabilities, boundary solving, decisions.

The multivariate-normal oracles come from scipy (norm/mvn cdf and 1-D
quadrature over the shared factor of an equicorrelated law), so the
quasi-Monte Carlo integrator is checked against independent numerics.
"""

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from smartmon import (
    BoundarySpec,
    NullCovariance,
    build_null_covariance,
    chi_square_statistic,
    decide,
    mvn_rectangle,
    null_covariance_from_samples,
    solve_boundaries,
)
from smartmon.sequential import chi_boundaries, sample_null_statistics


def test_rectangle_univariate_matches_norm_cdf():
    p, err = mvn_rectangle([1.6449], np.eye(1))
    assert err < 1e-3
    assert p == pytest.approx(stats.norm.cdf(1.6449), abs=3e-4)
    p2, _ = mvn_rectangle([0.0], np.eye(1))
    assert p2 == pytest.approx(0.5, abs=3e-4)


def test_rectangle_independent_product_rule():
    upper = [0.3, 1.1, -0.4, 2.0]
    p, err = mvn_rectangle(upper, np.eye(4), tol=5e-4)
    want = float(np.prod(stats.norm.cdf(upper)))
    assert p == pytest.approx(want, abs=max(3 * err, 1e-3))


def test_rectangle_equicorrelated_against_quadrature():
    """One-factor representation: integrate the conditional product."""
    rho, c, d = 0.5, 1.2, 5

    def integrand(u):
        return stats.norm.pdf(u) * stats.norm.cdf(
            (c - np.sqrt(rho) * u) / np.sqrt(1 - rho)
        ) ** d

    want, quad_err = integrate.quad(integrand, -9, 9)
    assert quad_err < 1e-7
    cov = np.full((d, d), rho) + (1 - rho) * np.eye(d)
    p, err = mvn_rectangle([c] * d, cov, tol=5e-4)
    assert p == pytest.approx(want, abs=max(3 * err, 1.5e-3))


def test_rectangle_mean_shift_and_duplicated_coordinate():
    p_shift, _ = mvn_rectangle([2.0], np.eye(1), mean=[0.5])
    assert p_shift == pytest.approx(stats.norm.cdf(1.5), abs=3e-4)
    # X duplicated: P(X <= a, X <= b) = Phi(min(a, b))
    cov = np.ones((2, 2))
    p_dup, _ = mvn_rectangle([0.7, 1.9], cov, tol=5e-4)
    assert p_dup == pytest.approx(stats.norm.cdf(0.7), abs=2e-3)


def test_rectangle_deterministic_and_monotone():
    cov = np.array([[1.0, 0.4], [0.4, 1.0]])
    a1, _ = mvn_rectangle([1.0, 1.0], cov, seed=42)
    a2, _ = mvn_rectangle([1.0, 1.0], cov, seed=42)
    assert a1 == a2
    b, _ = mvn_rectangle([1.5, 1.0], cov, seed=42)
    assert b > a1


def test_rectangle_input_validation():
    with pytest.raises(ValueError):
        mvn_rectangle([1.0, 2.0], np.eye(3))
    with pytest.raises(ValueError):
        mvn_rectangle([1.0], np.eye(1), tol=0.5)


def _null_cov(matrix, S, L, info):
    return NullCovariance(np.asarray(matrix, dtype=float), S, L, tuple(info))


def test_single_analysis_boundary_is_normal_quantile():
    spec = solve_boundaries(_null_cov(np.eye(1), 1, 1, (1.0,)), alpha=0.05)
    assert spec.values[0] == pytest.approx(stats.norm.ppf(0.95), abs=2e-3)
    assert spec.attained == pytest.approx(0.05, abs=2e-3)


def test_two_independent_analyses_product_solution():
    """With no cross-analysis correlation the exact constant is analytic."""
    spec = solve_boundaries(
        _null_cov(np.eye(2), 2, 1, (0.5, 1.0)), alpha=0.05, family="pocock"
    )
    want = stats.norm.ppf(np.sqrt(0.95))
    assert spec.values == pytest.approx((want, want), abs=3e-3)


def test_two_correlated_analyses_against_scipy_mvn():
    rho = np.sqrt(0.5)
    cov = np.array([[1.0, rho], [rho, 1.0]])
    spec = solve_boundaries(_null_cov(cov, 2, 1, (0.5, 1.0)), alpha=0.05)

    def attained(c):
        law = stats.multivariate_normal(mean=[0.0, 0.0], cov=cov)
        return 1.0 - law.cdf([c, c])

    want = optimize.brentq(lambda c: attained(c) - 0.05, 1.5, 3.0, xtol=1e-6)
    assert spec.values[0] == pytest.approx(want, abs=3e-3)


def test_obf_scales_with_information():
    cov = build_null_covariance([np.eye(1), np.eye(1)], (0.4, 1.0))
    ob = solve_boundaries(cov, alpha=0.05, family="obf")
    pk = solve_boundaries(cov, alpha=0.05, family="pocock")
    assert ob.values[0] > ob.values[1]
    assert ob.values[0] / ob.values[1] == pytest.approx(1 / np.sqrt(0.4), rel=1e-6)
    assert ob.values[1] < pk.values[1]
    assert pk.values[0] == pk.values[1]
    assert ob.scale == pytest.approx((1 / np.sqrt(0.4), 1.0))


def test_boundary_monotone_in_alpha():
    cov = build_null_covariance([np.eye(2), np.eye(2)], (0.5, 1.0),
                                source="analytic")
    crit = [solve_boundaries(cov, alpha=a, seed=1).values[0]
            for a in (0.01, 0.05, 0.10)]
    assert crit[0] > crit[1] > crit[2]


def test_build_null_covariance_cross_blocks():
    within = np.array([[1.0, 0.3], [0.3, 1.0]])
    cov = build_null_covariance([within, within], (0.25, 1.0))
    assert cov.block(1, 1) == pytest.approx(within)
    assert cov.block(1, 2) == pytest.approx(np.sqrt(0.25) * within)
    assert cov.iota() == pytest.approx((2.0, 1.0))
    with pytest.raises(ValueError):
        build_null_covariance([within], (0.25, 1.0))


def test_null_covariance_validation():
    with pytest.raises(ValueError):
        _null_cov(np.eye(3), 2, 1, (0.5, 1.0))
    bad = np.array([[1.0, 0.2], [0.4, 1.0]])
    with pytest.raises(ValueError):
        _null_cov(bad, 2, 1, (0.5, 1.0))
    with pytest.raises(ValueError):
        _null_cov(np.eye(2), 2, 1, (0.0, 1.0))


def test_sampled_null_statistics_recover_the_law():
    within = np.array([[1.0, 0.6], [0.6, 1.0]])
    cov = build_null_covariance([within, within], (0.5, 1.0))
    draws = sample_null_statistics(cov, reps=60_000, seed=4)
    assert draws.shape == (60_000, 2, 2)
    flat = draws.reshape(len(draws), -1)
    emp = np.corrcoef(flat.T)
    assert emp == pytest.approx(cov.matrix, abs=0.02)
    assert flat.std(axis=0) == pytest.approx(np.ones(4), abs=0.02)


def test_null_covariance_from_samples_round_trip():
    within = np.array([[1.0, 0.45], [0.45, 1.0]])
    truth = build_null_covariance([within, within], (0.5, 1.0))
    samples = sample_null_statistics(truth, reps=40_000, seed=9)
    # rescale the interim so the variance ratio encodes the information
    samples[:, 0, :] *= np.sqrt(2.0)
    est = null_covariance_from_samples(samples)
    assert est.source == "simulated"
    assert est.matrix == pytest.approx(truth.matrix, abs=0.03)
    assert est.info_proportions[0] == pytest.approx(0.5, abs=0.03)
    assert est.info_proportions[1] == 1.0


def test_chi_square_statistic_hand_cases():
    t, dof = chi_square_statistic([2.0, 0.5], np.eye(2))
    assert dof == 1
    assert t == pytest.approx((2.0 - 0.5) ** 2 / 2.0)
    # perfectly correlated contrast has no information left
    t0, dof0 = chi_square_statistic([1.3, 1.3], np.ones((2, 2)))
    assert (t0, dof0) == (0.0, 0)
    with pytest.raises(ValueError):
        chi_square_statistic([1.0], np.eye(1))


def test_chi_boundary_single_analysis_quantile():
    cov = _null_cov(np.eye(2), 1, 2, (1.0,))
    spec = chi_boundaries(cov, alpha=0.05, reps=400_000, seed=2)
    assert spec.statistic == "chi2"
    assert spec.values[0] == pytest.approx(stats.chi2.ppf(0.95, df=1), abs=0.12)


def test_solve_boundaries_dispatches_chi():
    cov = _null_cov(np.eye(2), 1, 2, (1.0,))
    a = solve_boundaries(cov, alpha=0.05, statistic="chi2", reps=100_000, seed=3)
    b = chi_boundaries(cov, alpha=0.05, reps=100_000, seed=3)
    assert a.values == b.values


def _spec(values, statistic="z"):
    return BoundarySpec(
        family="pocock", statistic=statistic, alpha=0.05,
        values=tuple(values), scale=(1.0,) * len(values),
        num_analyses=len(values), num_regimes=3,
    )


def test_decide_interim_and_final_actions():
    spec = _spec([2.0, 2.0])
    d = decide([1.2, -0.5, 1.9], spec, 1)
    assert d.action == "continue" and d.crossed == ()
    d = decide([2.4, 1.0, 2.1], spec, 1)
    assert d.action == "stop-reject"
    assert d.crossed == (0, 2)
    assert d.stopped
    d = decide([1.2, 0.0, -0.3], spec, 2)
    assert d.action == "final-fail-to-reject"
    d = decide([2.6, 0.0, 0.0], spec, 2)
    assert d.action == "stop-reject" and d.analysis == 2


def test_decide_boundary_is_strict():
    spec = _spec([2.0, 2.0])
    d = decide([2.0, 2.0, 2.0], spec, 1)
    assert d.action == "continue"
    with pytest.raises(ValueError):
        decide([0.0, 0.0, 0.0], spec, 3)


def test_boundary_at_is_one_based():
    spec = _spec([3.1, 2.2])
    assert spec.boundary_at(1) == 3.1
    assert spec.boundary_at(2) == 2.2

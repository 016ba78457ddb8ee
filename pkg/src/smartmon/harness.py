"""Monte Carlo evaluation of monitored trials.

run_experiment simulates the full pipeline — enroll, snapshot at each
analysis day, estimate with standard errors, compare against stopping
boundaries — and summarizes rejection rates, expected sample size, and
estimator performance across replications.  mse_ratio_table compares
estimators on shared simulated cohorts, point estimates only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .design import Regime, SmartDesign
from .estimation import ControlSpec, point_values, stacked_estimate
from .features import LinearTerms
from .simulate import EnrollmentProcess, GenerativeModel, simulate_cohort, true_value
from .snapshot import EstimationError, observe_cohort
from .sequential import (
    BoundarySpec,
    chi_square_statistic,
    contrast_correlation,
    z_statistics,
)

__all__ = [
    "ExperimentConfig",
    "MonteCarloReport",
    "run_experiment",
    "mse_ratio_table",
]


@dataclass
class ExperimentConfig:
    """Everything needed to simulate and monitor one trial design."""

    design: SmartDesign
    model: GenerativeModel
    regimes: Sequence[Regime]
    control: ControlSpec
    enrollment: EnrollmentProcess
    analysis_days: Sequence[float]
    N: int
    estimator: str = "iaipwe"
    q_terms: Sequence[LinearTerms] | None = None
    delta: float = 0.0
    nu_method: str = "average"
    ipwe_normalized: bool = True
    propensities: object = None
    cov_method: str = "sandwich"

    def __post_init__(self) -> None:
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if len(self.analysis_days) < 1:
            raise ValueError("need at least one analysis day")
        if list(self.analysis_days) != sorted(self.analysis_days):
            raise ValueError("analysis days must be increasing")
        if self.estimator in ("iaipwe", "aipwe") and self.q_terms is None:
            raise ValueError("augmented estimators need stage feature terms")


@dataclass
class MonteCarloReport:
    """Replication-level results of a monitored trial experiment."""

    N: int
    estimator: str
    analysis_days: tuple[float, ...]
    labels: tuple[str, ...]
    boundary: BoundarySpec
    seed: int
    reps: int
    kept: int
    values: np.ndarray       # (kept, S, L)
    ses: np.ndarray          # (kept, S, L)
    statistics: np.ndarray   # (kept, S, L) z statistics
    rejected_at: np.ndarray  # (kept,) analysis index 1..S, or 0 if never
    enrolled: np.ndarray     # (kept, S) patients enrolled at each analysis
    failures: list[str] = field(default_factory=list)

    @property
    def num_analyses(self) -> int:
        return len(self.analysis_days)

    @property
    def early_rate(self) -> float:
        """Fraction of replicates rejecting before the final analysis."""
        s = self.rejected_at
        return float(((s > 0) & (s < self.num_analyses)).mean())

    @property
    def total_rate(self) -> float:
        return float((self.rejected_at > 0).mean())

    def stop_days(self) -> np.ndarray:
        days = np.asarray(self.analysis_days)
        idx = np.where(self.rejected_at > 0, self.rejected_at, self.num_analyses)
        return days[idx - 1]

    def stop_sample_sizes(self) -> np.ndarray:
        idx = np.where(self.rejected_at > 0, self.rejected_at, self.num_analyses)
        return self.enrolled[np.arange(self.kept), idx - 1]

    def expected_sample_size(self) -> tuple[float, float]:
        n = self.stop_sample_sizes()
        return float(n.mean()), float(n.std(ddof=1))

    def expected_stop_day(self) -> tuple[float, float]:
        d = self.stop_days()
        return float(d.mean()), float(d.std(ddof=1))

    def value_mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def value_sd(self) -> np.ndarray:
        return self.values.std(axis=0, ddof=1)

    def se_mean(self) -> np.ndarray:
        return self.ses.mean(axis=0)

    def summary(self) -> dict:
        """JSON-friendly rollup of the replication results."""
        ess, ess_sd = self.expected_sample_size()
        stop, stop_sd = self.expected_stop_day()
        return {
            "N": self.N,
            "estimator": self.estimator,
            "reps": self.reps,
            "kept": self.kept,
            "seed": self.seed,
            "analysis_days": list(self.analysis_days),
            "boundary": [float(c) for c in self.boundary.values],
            "boundary_family": self.boundary.family,
            "early_rate": self.early_rate,
            "total_rate": self.total_rate,
            "expected_sample_size": ess,
            "expected_sample_size_sd": ess_sd,
            "expected_stop_day": stop,
            "expected_stop_day_sd": stop_sd,
            "value_mean": self.value_mean().tolist(),
            "value_sd": self.value_sd().tolist(),
            "se_mean": self.se_mean().tolist(),
            "labels": list(self.labels),
        }


def _analysis_statistics(est, boundary: BoundarySpec, delta: float) -> tuple[np.ndarray, float]:
    """Per-regime z statistics and the scalar compared against the boundary."""
    zs = z_statistics(est, delta=delta)
    if boundary.statistic == "chi2":
        corr = contrast_correlation(est)
        stat, _ = chi_square_statistic(zs, corr)
        return zs, stat
    return zs, float(np.max(zs))


def run_experiment(
    config: ExperimentConfig,
    boundary: BoundarySpec,
    *,
    reps: int = 1000,
    seed: int = 0,
    max_failure_rate: float = 0.01,
) -> MonteCarloReport:
    """Replicate the monitored trial and tabulate operating characteristics.

    Every replicate is estimated at all analysis days regardless of whether
    an earlier analysis crossed, so the value/SE summaries describe the
    estimators themselves; the stopping summaries (rejection rates, expected
    sample size and stop day) apply the boundary to the replicate's
    statistic path.  The same seed reproduces the report bit for bit.
    """
    design, regimes = config.design, list(config.regimes)
    S, L = len(config.analysis_days), len(regimes)
    if boundary.num_analyses != S:
        raise ValueError("boundary and config disagree on the analysis count")
    crit = np.asarray(boundary.values, dtype=float)
    labels = tuple(r.label or f"regime {j + 1}" for j, r in enumerate(regimes))
    seeds = np.random.SeedSequence(seed).spawn(reps)
    values = np.full((reps, S, L), np.nan)
    ses = np.full((reps, S, L), np.nan)
    stats = np.full((reps, S, L), np.nan)
    rejected_at = np.zeros(reps, dtype=np.int64)
    enrolled = np.zeros((reps, S), dtype=np.int64)
    failures: list[str] = []
    for b in range(reps):
        rng = np.random.default_rng(seeds[b])
        cohort = simulate_cohort(
            config.model, design, config.enrollment.draw(config.N, rng), rng
        )
        try:
            for s, day in enumerate(config.analysis_days):
                snap = observe_cohort(cohort, design, day, n_planned=config.N)
                enrolled[b, s] = snap.n
                if config.estimator == "aipwe":
                    snap = snap.completers()
                est = stacked_estimate(
                    snap,
                    design,
                    regimes,
                    estimator=config.estimator,
                    q_terms=config.q_terms,
                    control=config.control,
                    propensities=config.propensities,
                    nu_method=config.nu_method,
                    cov_method=config.cov_method,
                    ipwe_normalized=config.ipwe_normalized,
                )
                zs, crossing_stat = _analysis_statistics(
                    est, boundary, config.delta
                )
                values[b, s] = est.values
                ses[b, s] = np.sqrt(est.contrast_variances())
                stats[b, s] = zs
                if rejected_at[b] == 0 and crossing_stat > crit[s]:
                    rejected_at[b] = s + 1
        except EstimationError as exc:
            failures.append(f"rep {b}: {exc}")
            values[b] = np.nan
    ok = ~np.isnan(values).any(axis=(1, 2))
    if len(failures) > max_failure_rate * reps:
        raise EstimationError(
            f"estimation failed in {len(failures)}/{reps} replicates "
            f"(limit {max_failure_rate:.0%}); first: {failures[0]}"
        )
    if failures:
        warnings.warn(
            f"dropped {len(failures)} failed replicates", stacklevel=2
        )
    return MonteCarloReport(
        N=config.N,
        estimator=config.estimator,
        analysis_days=tuple(float(t) for t in config.analysis_days),
        labels=labels,
        boundary=boundary,
        seed=seed,
        reps=reps,
        kept=int(ok.sum()),
        values=values[ok],
        ses=ses[ok],
        statistics=stats[ok],
        rejected_at=rejected_at[ok],
        enrolled=enrolled[ok],
        failures=failures,
    )


def mse_ratio_table(
    config: ExperimentConfig,
    *,
    estimators: Sequence[str] = ("ipwe", "aipwe", "iaipwe"),
    truth: Sequence[float] | None = None,
    reps: int = 1000,
    seed: int = 0,
    max_failure_rate: float = 0.01,
) -> dict:
    """Estimator comparison on shared cohorts: MC mean, MC SD, MSE ratio.

    Every estimator sees the same simulated cohorts (common random numbers),
    so MSE ratios — baseline MSE divided by the row estimator's, per regime
    per analysis — are not inflated by between-cohort noise.  The baseline
    is the first listed estimator.  A 0/0 ratio is reported as 1.
    """
    design, regimes = config.design, list(config.regimes)
    S, L = len(config.analysis_days), len(regimes)
    if truth is None:
        truth = [
            true_value(config.model, design, r, method="analytic")[0]
            for r in regimes
        ]
    truth = np.asarray(truth, dtype=float)
    if truth.shape != (L,):
        raise ValueError(f"truth must have one value per regime, got {truth.shape}")
    seeds = np.random.SeedSequence(seed).spawn(reps)
    vals = {e: np.full((reps, S, L), np.nan) for e in estimators}
    failures = 0
    for b in range(reps):
        rng = np.random.default_rng(seeds[b])
        cohort = simulate_cohort(
            config.model, design, config.enrollment.draw(config.N, rng), rng
        )
        try:
            for s, day in enumerate(config.analysis_days):
                snap = observe_cohort(cohort, design, day, n_planned=config.N)
                for e in estimators:
                    v, _, _ = point_values(
                        snap.completers() if e == "aipwe" else snap,
                        design,
                        regimes,
                        estimator=e,
                        q_terms=config.q_terms,
                        control=config.control,
                        nu_method=config.nu_method,
                        ipwe_normalized=config.ipwe_normalized,
                    )
                    vals[e][b, s] = v
        except EstimationError:
            failures += 1
            for e in estimators:
                vals[e][b] = np.nan
    ok = ~np.isnan(vals[estimators[0]]).any(axis=(1, 2))
    if failures > max_failure_rate * reps:
        raise EstimationError(
            f"estimation failed in {failures}/{reps} replicates "
            f"(limit {max_failure_rate:.0%})"
        )
    if failures:
        warnings.warn(f"dropped {failures} failed replicates", stacklevel=2)
    base = estimators[0]
    mse = {
        e: np.mean((vals[e][ok] - truth[None, None, :]) ** 2, axis=0)
        for e in estimators
    }
    out: dict = {
        "baseline": base,
        "truth": truth.tolist(),
        "reps": reps,
        "kept": int(ok.sum()),
        "analysis_days": [float(t) for t in config.analysis_days],
        "labels": [r.label or f"regime {j + 1}" for j, r in enumerate(regimes)],
        "estimators": {},
    }
    for e in estimators:
        num, den = mse[base], mse[e]
        ratio = np.where(
            (num == 0) & (den == 0), 1.0, num / np.where(den == 0, np.nan, den)
        )
        out["estimators"][e] = {
            "mc_mean": vals[e][ok].mean(axis=0).tolist(),
            "mc_sd": vals[e][ok].std(axis=0, ddof=1).tolist(),
            "mse_ratio": ratio.tolist(),
        }
    return out

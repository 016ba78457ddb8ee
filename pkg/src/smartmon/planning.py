"""Power and planned-sample-size calculations for sequential monitoring.

The alternative is summarized by the true regime values, the control value,
and per-analysis, per-regime unit standard deviations — the standard
deviation of each value contrast when one patient is enrolled, so that the
contrast SD at total sample size N is ``unit_sd / sqrt(N)`` and the mean of
the standardized statistic grows like sqrt(N).  Power comes either from
rectangle probabilities of the shifted null law (integral mode) or from
simulated statistic draws (simulated mode, required for the chi-square
procedure), and the planned sample size is found by a coarse-to-fine climb
that discounts its step after each overshoot.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .design import Regime, SmartDesign
from .estimation import ControlSpec, point_values
from .sequential import (
    BoundarySpec,
    NullCovariance,
    EstimationError,
    _chi_stats,
    mvn_rectangle,
    null_covariance_from_samples,
    sample_null_statistics,
)
from .simulate import EnrollmentProcess, GenerativeModel, simulate_cohort, true_value
from .snapshot import observe_cohort

__all__ = [
    "AlternativeSpec",
    "PowerResult",
    "SampleSizeResult",
    "mu_alternative",
    "pilot_alternative",
    "power",
    "sample_size_search",
]


@dataclass
class AlternativeSpec:
    """Alternative hypothesis summary for power calculations.

    ``unit_sds`` has shape (num_analyses, num_regimes): entry (s, l) is the
    standard deviation of the regime-l value contrast at analysis s scaled to
    a single enrolled patient (i.e. SD at total size N times sqrt(N)).
    """

    regime_values: tuple[float, ...]
    control_value: float
    delta: float
    unit_sds: np.ndarray
    null_cov: NullCovariance

    def __post_init__(self) -> None:
        self.regime_values = tuple(float(v) for v in self.regime_values)
        self.unit_sds = np.asarray(self.unit_sds, dtype=float)
        S, L = self.null_cov.num_analyses, self.null_cov.num_regimes
        if len(self.regime_values) != L:
            raise ValueError(f"expected {L} regime values, got {len(self.regime_values)}")
        if self.unit_sds.shape != (S, L):
            raise ValueError(f"unit_sds must have shape ({S}, {L}), got {self.unit_sds.shape}")
        if np.any(self.unit_sds <= 0) or not np.all(np.isfinite(self.unit_sds)):
            raise ValueError("unit standard deviations must be positive and finite")
        if max(self.regime_values) <= self.control_value + self.delta:
            raise ValueError(
                "no regime exceeds the control value plus delta; "
                "the alternative carries no signal to power against"
            )


def mu_alternative(N: float, alt: AlternativeSpec) -> np.ndarray:
    """Mean of the stacked statistics under the alternative at total size N.

    mu(s, l) = (V_l - control - delta) * sqrt(N) / unit_sd(s, l); doubling
    sqrt(N) doubles every entry.
    """
    if N <= 0:
        raise ValueError("sample size must be positive")
    shift = np.asarray(alt.regime_values) - alt.control_value - alt.delta
    return shift[None, :] * math.sqrt(N) / alt.unit_sds


@dataclass
class PowerResult:
    """Power at one sample size with its first-crossing decomposition.

    ``per_analysis[s]`` is the probability that the first boundary crossing
    happens at analysis s+1; the entries sum to ``total``.
    """

    total: float
    method: str
    N: int
    per_analysis: tuple[float, ...]
    err: float = 0.0
    reps: int | None = None


def power(
    N: float,
    alt: AlternativeSpec,
    boundaries: BoundarySpec,
    *,
    method: str = "integral",
    reps: int = 10_000,
    seed: int = 0,
    mvn_tol: float = 3e-4,
) -> PowerResult:
    """Probability of rejecting at any analysis under the alternative.

    Integral mode evaluates prefix rectangle probabilities of the shifted
    null law, so the per-analysis decomposition is exact up to integration
    tolerance.  Simulated mode shifts null draws by mu and counts first
    crossings; it is the only mode available for chi-square boundaries.
    """
    null_cov = alt.null_cov
    S, L = null_cov.num_analyses, null_cov.num_regimes
    if boundaries.num_analyses != S:
        raise ValueError("boundaries and alternative disagree on the analysis count")
    mu = mu_alternative(N, alt)
    crit = np.asarray(boundaries.values)
    if boundaries.statistic == "chi2":
        if method != "simulated":
            raise ValueError("chi-square boundaries require method='simulated'")
        draws = sample_null_statistics(null_cov, reps, seed) + mu[None]
        stats = _chi_stats(draws, null_cov)
        crossed = stats > crit[None, :]
    elif method == "simulated":
        draws = sample_null_statistics(null_cov, reps, seed) + mu[None]
        crossed = (draws > crit[None, :, None]).any(axis=2)
    elif method == "integral":
        mu_flat = mu.reshape(-1)
        rects = [1.0]
        err_total = 0.0
        for s in range(1, S + 1):
            dim = s * L
            upper = np.repeat(crit[:s], L)
            p, err = mvn_rectangle(
                upper,
                null_cov.matrix[:dim, :dim],
                mean=mu_flat[:dim],
                tol=mvn_tol,
                seed=seed,
            )
            rects.append(p)
            err_total += err
        per = tuple(max(rects[s - 1] - rects[s], 0.0) for s in range(1, S + 1))
        return PowerResult(
            total=1.0 - rects[-1],
            method="integral",
            N=int(round(N)),
            per_analysis=per,
            err=err_total,
        )
    else:
        raise ValueError(f"unknown power method {method!r}; use 'integral' or 'simulated'")

    any_cross = crossed.any(axis=1)
    first = np.where(any_cross, crossed.argmax(axis=1), S)
    per = tuple(float((first == s).mean()) for s in range(S))
    total = float(any_cross.mean())
    return PowerResult(
        total=total,
        method="simulated",
        N=int(round(N)),
        per_analysis=per,
        err=3.0 * math.sqrt(max(total * (1 - total), 1e-12) / reps),
        reps=reps,
    )


@dataclass
class SampleSizeResult:
    """Outcome of the planned-sample-size climb."""

    N: int
    power: float
    target: float
    detail: PowerResult | None = None
    evaluations: dict[int, float] = field(default_factory=dict)


def sample_size_search(
    target: float,
    alt: AlternativeSpec | Callable[[float], AlternativeSpec],
    boundaries: BoundarySpec,
    *,
    n0: int = 50,
    step: float = 10.0,
    discount: float = 0.1,
    reps: int = 10_000,
    method: str = "simulated",
    seed: int = 0,
    power_tol: float | None = None,
    mvn_tol: float = 3e-4,
    max_iter: int = 2000,
) -> SampleSizeResult:
    """Smallest explored N whose power reaches the target within tolerance.

    Climb N from ``n0`` in steps of ``step``; on the first overshoot of the
    target, shrink the step by ``discount`` and resume from the last N below
    target, stopping once the step reaches one patient.  Power evaluations
    share one seed (common random numbers), so in simulated mode the climb
    sees a monotone objective; three consecutive decreasing evaluations are
    diagnosed as noise and raised as an error.
    """
    if not 0.0 < target < 1.0:
        raise ValueError(f"target power must lie in (0, 1), got {target}")
    if power_tol is None:
        power_tol = (
            0.005
            if method == "integral"
            else 1.5 * math.sqrt(target * (1 - target) / reps)
        )
    alt_at = alt if callable(alt) else (lambda _n: alt)
    cache: dict[int, PowerResult] = {}

    def pw(n: int) -> PowerResult:
        if n not in cache:
            cache[n] = power(
                n, alt_at(n), boundaries, method=method, reps=reps, seed=seed,
                mvn_tol=mvn_tol,
            )
        return cache[n]

    n = int(n0)
    result = pw(n)
    if result.total >= target - power_tol:
        return SampleSizeResult(
            N=n, power=result.total, target=target, detail=result,
            evaluations={k: v.total for k, v in cache.items()},
        )
    last_below = n
    lam = float(step)
    prev_power = result.total
    decreases = 0
    for _ in range(max_iter):
        n = last_below + max(1, int(round(lam)))
        result = pw(n)
        if result.total < prev_power:
            decreases += 1
            if decreases >= 3:
                raise EstimationError(
                    "power estimates decreased across 3 consecutive steps; "
                    "the search assumes power nondecreasing in N — rerun with "
                    "method='simulated' and more reps to reduce noise"
                )
        else:
            decreases = 0
        prev_power = result.total
        if result.total >= target - power_tol:
            if lam <= 1.0:
                return SampleSizeResult(
                    N=n, power=result.total, target=target, detail=result,
                    evaluations={k: v.total for k, v in cache.items()},
                )
            lam = max(1.0, lam * discount)
        else:
            last_below = n
    raise EstimationError(
        f"sample size search did not converge within {max_iter} iterations "
        f"(last N={n}, power={result.total:.3f}, target={target})"
    )


def replicate_contrasts(
    design: SmartDesign,
    model: GenerativeModel,
    regimes: Sequence[Regime],
    *,
    control: ControlSpec,
    q_terms: Mapping | None = None,
    enrollment: EnrollmentProcess,
    analysis_days: Sequence[float],
    n: int,
    reps: int,
    estimator: str = "iaipwe",
    nu_method: str = "average",
    ipwe_normalized: bool = True,
    seed: int = 0,
    max_failure_rate: float = 0.05,
) -> np.ndarray:
    """Replicated point value contrasts, one simulated trial per row.

    Each replicate simulates a trial of ``n`` patients, snapshots it at every
    analysis day, and records value minus control per regime, shape
    (kept reps, analyses, regimes).  Replicates where estimation fails are
    dropped with a warning; more than ``max_failure_rate`` of them is an
    error.
    """
    S, L = len(analysis_days), len(regimes)
    if S < 1 or L < 1:
        raise ValueError("need at least one analysis day and one regime")
    seeds = np.random.SeedSequence(seed).spawn(reps)
    contrasts = np.empty((reps, S, L))
    failures = 0
    for b in range(reps):
        rng = np.random.default_rng(seeds[b])
        cohort = simulate_cohort(model, design, enrollment.draw(n, rng), rng)
        try:
            for s, day in enumerate(analysis_days):
                snap = observe_cohort(cohort, design, day, n_planned=n)
                if estimator == "aipwe":
                    snap = snap.completers()
                vals, v0, _ = point_values(
                    snap,
                    design,
                    regimes,
                    estimator=estimator,
                    q_terms=q_terms,
                    control=control,
                    nu_method=nu_method,
                    ipwe_normalized=ipwe_normalized,
                )
                base = v0 if v0 is not None else control.value
                contrasts[b, s] = np.asarray(vals) - base
        except EstimationError:
            failures += 1
            contrasts[b] = np.nan
    ok = ~np.isnan(contrasts).any(axis=(1, 2))
    if failures > max_failure_rate * reps:
        raise EstimationError(
            f"replicated simulation failed in {failures}/{reps} replicates; "
            "increase n or adjust the working models"
        )
    if failures:
        warnings.warn(
            f"replicated simulation dropped {failures} failed replicates",
            stacklevel=2,
        )
    return contrasts[ok]


def pilot_alternative(
    design: SmartDesign,
    model: GenerativeModel,
    regimes: Sequence[Regime],
    *,
    control: ControlSpec,
    q_terms: Mapping | None = None,
    delta: float = 0.0,
    enrollment: EnrollmentProcess,
    analysis_days: Sequence[float],
    n_pilot: int = 250,
    reps: int = 500,
    estimator: str = "iaipwe",
    nu_method: str = "average",
    ipwe_normalized: bool = True,
    control_value_truth: float | None = None,
    seed: int = 0,
) -> AlternativeSpec:
    """Estimate an AlternativeSpec by replicated pilot simulation.

    Each replicate simulates a pilot trial of ``n_pilot`` patients, snapshots
    it at every analysis day, and records the point value contrasts.  Unit
    SDs are the replicate SDs rescaled by sqrt(n_pilot); the null law is the
    empirical correlation of the replicates with variance-ratio information
    proportions; regime and control values are computed analytically from
    the generative model.
    """
    if control.kind == "fixed":
        control_value = float(control.value)
    elif control_value_truth is not None:
        control_value = float(control_value_truth)
    else:
        raise ValueError(
            "an arm control needs control_value_truth (its true mean outcome) "
            "to anchor the alternative"
        )
    good = replicate_contrasts(
        design,
        model,
        regimes,
        control=control,
        q_terms=q_terms,
        enrollment=enrollment,
        analysis_days=analysis_days,
        n=n_pilot,
        reps=reps,
        estimator=estimator,
        nu_method=nu_method,
        ipwe_normalized=ipwe_normalized,
        seed=seed,
    )
    null_cov = null_covariance_from_samples(good)
    unit_sds = good.std(axis=0, ddof=1) * math.sqrt(n_pilot)
    regime_values = tuple(
        true_value(model, design, r, method="analytic")[0] for r in regimes
    )
    return AlternativeSpec(
        regime_values=regime_values,
        control_value=control_value,
        delta=delta,
        unit_sds=unit_sds,
        null_cov=null_cov,
    )

"""Group-sequential testing: joint null law, stopping boundaries, decisions.

The monitoring procedure standardizes each regime's value contrast into a
Z statistic at every analysis, stacks them (regime index fast, analysis index
slow), and controls the family-wise error rate through rectangle
probabilities of the stacked multivariate-normal null law.  This module
builds that law, solves Pocock / O'Brien-Fleming boundaries against it by
bisection, and turns observed statistics into stop/continue decisions.  A
Wald-type chi-square homogeneity procedure (contrasting each regime against
the last) is provided as an alternative statistic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .estimation import ValueEstimate
from .snapshot import EstimationError

__all__ = [
    "BoundarySpec",
    "Decision",
    "NullCovariance",
    "build_null_covariance",
    "chi_boundaries",
    "chi_square_statistic",
    "contrast_correlation",
    "decide",
    "mvn_rectangle",
    "null_covariance_from_samples",
    "sample_null_statistics",
    "solve_boundaries",
    "z_statistics",
]

_TINY = 1e-300


# ---------------------------------------------------------------------------
# multivariate-normal rectangle probabilities


def _ordered_cholesky(cov: np.ndarray, upper: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factor with greedy variable reordering.

    At each step the remaining variable with the smallest conditional
    one-sided probability is pivoted to the front, which concentrates the
    integrand's variation in the leading coordinates and speeds up QMC
    convergence.  Singular directions get a zero diagonal and are resolved
    as deterministic indicators during integration.
    """
    m = upper.size
    a = np.array(cov, dtype=float)
    b = np.array(upper, dtype=float)
    chol = np.zeros((m, m))
    y = np.zeros(m)  # truncated conditional means along the integration path
    for j in range(m):
        best, best_p, best_t = j, np.inf, -np.inf
        for i in range(j, m):
            s2 = a[i, i] - chol[i, :j] @ chol[i, :j]
            s = math.sqrt(s2) if s2 > 0 else 0.0
            if s > 0:
                t = (b[i] - chol[i, :j] @ y[:j]) / s
            else:
                t = np.inf if b[i] - chol[i, :j] @ y[:j] >= 0 else -np.inf
            p = ndtr(t)
            if p < best_p:
                best, best_p, best_t = i, p, t
        if best != j:
            a[[j, best]] = a[[best, j]]
            a[:, [j, best]] = a[:, [best, j]]
            chol[[j, best], :j] = chol[[best, j], :j]
            b[[j, best]] = b[[best, j]]
        s2 = a[j, j] - chol[j, :j] @ chol[j, :j]
        if s2 <= 1e-12:
            chol[j, j] = 0.0
            y[j] = 0.0
            continue
        chol[j, j] = math.sqrt(s2)
        for i in range(j + 1, m):
            chol[i, j] = (a[i, j] - chol[i, :j] @ chol[j, :j]) / chol[j, j]
        if best_p > 1e-12 and np.isfinite(best_t):
            y[j] = -math.exp(-0.5 * best_t * best_t) / math.sqrt(2 * math.pi) / best_p
        else:
            y[j] = min(best_t, 0.0)
    return chol, b


def _genz_sweep(chol: np.ndarray, b: np.ndarray, u: np.ndarray) -> float:
    """One quasi-random estimate of the rectangle probability."""
    n, m = u.shape[0], b.size
    if chol[0, 0] > 0:
        e = np.full(n, ndtr(b[0] / chol[0, 0]))
    else:
        e = np.full(n, 1.0 if b[0] >= 0 else 0.0)
    prod = e.copy()
    y = np.zeros((n, m))
    for j in range(1, m):
        if chol[j - 1, j - 1] > 0:
            q = np.clip(u[:, j - 1] * e, _TINY, 1 - 1e-16)
            y[:, j - 1] = ndtri(q)
        mu = y[:, :j] @ chol[j, :j]
        if chol[j, j] > 0:
            e = ndtr((b[j] - mu) / chol[j, j])
        else:
            e = (b[j] - mu >= 0).astype(float)
        prod *= e
    return float(prod.mean())


def mvn_rectangle(
    upper: Sequence[float],
    cov: np.ndarray,
    *,
    mean: Sequence[float] | None = None,
    tol: float = 1e-3,
    seed: int = 0,
    max_points: int = 1 << 17,
) -> tuple[float, float]:
    """P(X <= upper componentwise) for X ~ N(mean, cov).

    Randomized quasi-Monte Carlo (scrambled Sobol points pushed through the
    sequential-conditioning transform) with ten independent randomizations;
    the reported error is three standard errors across randomizations.  The
    point count doubles until the error estimate drops below ``tol`` or
    ``max_points`` per randomization is reached.  Deterministic for a fixed
    ``seed``.
    """
    if not 1e-7 < tol <= 1e-2:
        raise ValueError(f"tol must lie in (1e-7, 1e-2], got {tol}")
    upper = np.asarray(upper, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (upper.size, upper.size):
        raise ValueError(
            f"dimension mismatch: {upper.size} bounds vs covariance {cov.shape}"
        )
    if mean is not None:
        upper = upper - np.asarray(mean, dtype=float)
    if np.isneginf(upper).any():
        return 0.0, 0.0
    keep = ~np.isposinf(upper)
    if not keep.any():
        return 1.0, 0.0
    upper = upper[keep]
    cov = cov[np.ix_(keep, keep)]
    m = upper.size
    if m == 1:
        sd = math.sqrt(max(cov[0, 0], 0.0))
        if sd == 0.0:
            return (1.0 if upper[0] >= 0 else 0.0), 0.0
        return float(ndtr(upper[0] / sd)), 0.0

    chol, b = _ordered_cholesky(cov, upper)
    randomizations = 10
    seeds = np.random.SeedSequence(seed)
    n = 1 << 10
    level = 0
    while True:
        children = seeds.spawn(randomizations)
        estimates = np.empty(randomizations)
        for r in range(randomizations):
            sampler = qmc.Sobol(d=m - 1, scramble=True, seed=np.random.default_rng(children[r]))
            estimates[r] = _genz_sweep(chol, b, sampler.random(n))
        prob = float(estimates.mean())
        err = 3.0 * float(estimates.std(ddof=1)) / math.sqrt(randomizations)
        if err <= tol or n >= max_points:
            if err > tol:
                warnings.warn(
                    f"mvn_rectangle reached max_points={max_points} with error "
                    f"estimate {err:.2e} > tol {tol:.2e}",
                    stacklevel=2,
                )
            return min(max(prob, 0.0), 1.0), err
        n *= 2
        level += 1
        seeds = np.random.SeedSequence(seed, spawn_key=(level,))


# ---------------------------------------------------------------------------
# the stacked null law


def _nearest_psd_correlation(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Project to the nearest PSD matrix (eigenvalue floor 0), unit diagonal."""
    sym = 0.5 * (mat + mat.T)
    w, u = np.linalg.eigh(sym)
    fixed = (u * np.clip(w, 0.0, None)) @ u.T
    d = np.sqrt(np.clip(np.diag(fixed), 1e-12, None))
    fixed = fixed / np.outer(d, d)
    np.fill_diagonal(fixed, 1.0)
    return fixed, float(np.linalg.norm(fixed - sym))


@dataclass
class NullCovariance:
    """Correlation structure of the stacked statistics under the null.

    ``matrix`` is (S·L, S·L) with the regime index varying fastest, so the
    block at ``[sL:(s+1)L, tL:(t+1)L]`` relates analyses s and t.
    ``info_proportions`` holds the per-analysis statistical-information
    fractions p_s (p_S = 1); their inverse square roots are the boundary
    scale factors.
    """

    matrix: np.ndarray
    num_analyses: int
    num_regimes: int
    info_proportions: tuple[float, ...]
    source: str = "analytic"
    per_regime_info: np.ndarray | None = None
    psd_adjustment: float = 0.0

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        dim = self.num_analyses * self.num_regimes
        if self.matrix.shape != (dim, dim):
            raise ValueError(
                f"null covariance must be {dim}x{dim} for "
                f"{self.num_analyses} analyses x {self.num_regimes} regimes"
            )
        if not np.allclose(np.diag(self.matrix), 1.0, atol=1e-6):
            raise ValueError("null covariance must have a unit diagonal")
        if not np.allclose(self.matrix, self.matrix.T, atol=1e-8):
            raise ValueError("null covariance must be symmetric")
        if len(self.info_proportions) != self.num_analyses:
            raise ValueError("one information proportion per analysis required")
        for p in self.info_proportions:
            if not 0.0 < p <= 1.0 + 1e-9:
                raise ValueError(f"information proportions must lie in (0, 1], got {p}")

    def block(self, s: int, t: int) -> np.ndarray:
        """(L, L) correlation block between analyses ``s`` and ``t`` (1-based)."""
        L = self.num_regimes
        return self.matrix[(s - 1) * L : s * L, (t - 1) * L : t * L]

    def iota(self) -> np.ndarray:
        """Boundary scale factors 1/sqrt(p_s), normalized so the last is 1."""
        p = np.asarray(self.info_proportions, dtype=float)
        raw = 1.0 / np.sqrt(p)
        return raw / raw[-1]


def build_null_covariance(
    corr_blocks: Sequence[np.ndarray],
    info_proportions: Sequence[float],
    *,
    per_regime_info: np.ndarray | None = None,
    source: str = "analytic",
) -> NullCovariance:
    """Assemble the stacked null correlation from per-analysis blocks.

    The within-analysis blocks are used as-is; the cross block between an
    earlier analysis s and a later analysis t is sqrt(p_s / p_t) times the
    later within-analysis block, which is the independent-increments form of
    the joint law.  A non-PSD assembly (possible with simulated inputs) is
    projected to the nearest PSD correlation with a warning.
    """
    S = len(corr_blocks)
    if S != len(info_proportions):
        raise ValueError("need one correlation block and one info proportion per analysis")
    blocks = [np.asarray(b, dtype=float) for b in corr_blocks]
    L = blocks[0].shape[0]
    for b in blocks:
        if b.shape != (L, L):
            raise ValueError("correlation blocks must share one square shape")
        if not np.allclose(np.diag(b), 1.0, atol=1e-6):
            raise ValueError("correlation blocks must have unit diagonals")
    p = np.asarray(info_proportions, dtype=float)
    if p[-1] <= 0:
        raise ValueError("final information proportion must be positive")
    p = p / p[-1]
    mat = np.zeros((S * L, S * L))
    for s in range(S):
        mat[s * L : (s + 1) * L, s * L : (s + 1) * L] = blocks[s]
        for t in range(s + 1, S):
            cross = math.sqrt(p[s] / p[t]) * blocks[t]
            mat[s * L : (s + 1) * L, t * L : (t + 1) * L] = cross
            mat[t * L : (t + 1) * L, s * L : (s + 1) * L] = cross.T
    adjustment = 0.0
    if np.linalg.eigvalsh(mat).min() < -1e-10:
        mat, adjustment = _nearest_psd_correlation(mat)
        warnings.warn(
            f"assembled null covariance was not PSD; projected "
            f"(perturbation {adjustment:.3e})",
            stacklevel=2,
        )
    return NullCovariance(
        matrix=mat,
        num_analyses=S,
        num_regimes=L,
        info_proportions=tuple(float(x) for x in p),
        source=source,
        per_regime_info=per_regime_info,
        psd_adjustment=adjustment,
    )


def null_covariance_from_samples(values: np.ndarray) -> NullCovariance:
    """Empirical null law from replicated statistics of shape (reps, S, L).

    The matrix is the sample correlation of the stacked replicates; the
    information proportion of analysis s is derived from the per-regime
    variance ratios var_S / var_s via the averaged scale factor
    iota_s = mean over regimes of sqrt(var_s / var_S).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("expected an array of shape (reps, analyses, regimes)")
    reps, S, L = values.shape
    if reps < 10:
        raise ValueError("need at least 10 replicates to estimate a correlation")
    flat = values.reshape(reps, S * L)
    var = flat.var(axis=0, ddof=1)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise EstimationError("degenerate replicate column: zero or non-finite variance")
    corr = np.corrcoef(flat, rowvar=False)
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    adjustment = 0.0
    if np.linalg.eigvalsh(corr).min() < -1e-10:
        corr, adjustment = _nearest_psd_correlation(corr)
        warnings.warn(
            f"simulated null correlation was not PSD; projected "
            f"(perturbation {adjustment:.3e})",
            stacklevel=2,
        )
    v = var.reshape(S, L)
    per_regime_p = v[-1][None, :] / v
    iota = np.sqrt(1.0 / per_regime_p).mean(axis=1)
    iota = iota / iota[-1]
    p = 1.0 / iota**2
    return NullCovariance(
        matrix=corr,
        num_analyses=S,
        num_regimes=L,
        info_proportions=tuple(float(x) for x in p),
        source="simulated",
        per_regime_info=per_regime_p,
        psd_adjustment=adjustment,
    )


def contrast_correlation(estimate: ValueEstimate) -> np.ndarray:
    """Correlation matrix of the regime-vs-control contrasts in an estimate."""
    if estimate.covariance is None:
        raise EstimationError("estimate carries no covariance; run with a cov_method")
    cov = np.asarray(estimate.covariance, dtype=float)
    if estimate.control_variance is not None:
        cv = np.asarray(estimate.control_covariances, dtype=float)
        cov = cov + estimate.control_variance - cv[:, None] - cv[None, :]
    sd = np.sqrt(np.diag(cov))
    if np.any(sd <= 0):
        raise EstimationError("zero contrast variance; correlation undefined")
    corr = cov / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    return corr


# ---------------------------------------------------------------------------
# test statistics


def z_statistics(estimate: ValueEstimate, *, delta: float = 0.0) -> np.ndarray:
    """Standardized per-regime statistics (V-hat - control - delta) / SE.

    With a fixed scalar control the SE is the regime value's own; with an
    estimated control arm it is the SE of the difference, including the
    cross-covariance term.
    """
    if estimate.control_value is None:
        raise EstimationError("z statistics need a control value on the estimate")
    var = estimate.contrast_variances()
    if var is None:
        raise EstimationError("z statistics need a covariance; run with a cov_method")
    var = np.asarray(var, dtype=float)
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise EstimationError("zero standard error: cannot standardize the contrast")
    values = np.asarray(estimate.values, dtype=float)
    return (values - estimate.control_value - delta) / np.sqrt(var)


def chi_square_statistic(zs: Sequence[float], cov: np.ndarray) -> tuple[float, int]:
    """Wald-type homogeneity statistic contrasting each regime with the last.

    T = (CZ)' (C cov C')^- (CZ) with C = [I_{L-1} | -1]; the generalized
    inverse comes from an eigendecomposition with relative threshold 1e-10,
    and the degrees of freedom equal the retained rank.
    """
    z = np.asarray(zs, dtype=float)
    L = z.size
    if L < 2:
        raise ValueError("homogeneity needs >= 2 regimes")
    cov = np.asarray(cov, dtype=float)
    contrast = np.hstack([np.eye(L - 1), -np.ones((L - 1, 1))])
    mid = contrast @ cov @ contrast.T
    w, u = np.linalg.eigh(mid)
    keep = w > 1e-10 * max(w.max(), 0.0)
    dof = int(keep.sum())
    if dof == 0:
        return 0.0, 0
    proj = u[:, keep].T @ (contrast @ z)
    return float(proj**2 @ (1.0 / w[keep])), dof


# ---------------------------------------------------------------------------
# boundaries


@dataclass
class BoundarySpec:
    """Solved stopping boundaries for one testing family.

    ``values`` holds the per-analysis critical values; ``scale`` the shape
    factors applied to the base constant (all ones for Pocock,
    information-based for O'Brien-Fleming).  ``attained`` reports the
    family-wise error rate evaluated at the solved boundaries.
    """

    family: str
    statistic: str
    alpha: float
    values: tuple[float, ...]
    scale: tuple[float, ...]
    num_analyses: int
    num_regimes: int
    attained: float | None = None
    attained_err: float | None = None
    meta: dict = field(default_factory=dict)

    def boundary_at(self, s: int) -> float:
        """Critical value at analysis ``s`` (1-based)."""
        return self.values[s - 1]


def _boundary_shape(null_cov: NullCovariance, family: str, statistic: str) -> np.ndarray:
    family = family.lower()
    if family == "pocock":
        return np.ones(null_cov.num_analyses)
    if family in {"obf", "obrien-fleming", "o'brien-fleming"}:
        iota = null_cov.iota()
        return iota**2 if statistic == "chi2" else iota
    raise ValueError(f"unknown boundary family {family!r}; use 'pocock' or 'obf'")


def solve_boundaries(
    null_cov: NullCovariance,
    *,
    alpha: float,
    family: str = "pocock",
    statistic: str = "z",
    seed: int = 0,
    tol: float = 1e-4,
    mvn_tol: float | None = None,
    reps: int = 200_000,
) -> BoundarySpec:
    """Solve the family's base constant so the family-wise error equals alpha.

    Bisection on c in [0, 8] standard-normal units; each candidate's error
    rate is the complement of an MVN rectangle probability evaluated with
    common random numbers (default integration tolerance alpha/100), so the
    objective is exactly monotone along the search.  ``statistic='chi2'``
    dispatches to the simulated chi-square solver.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    if statistic == "chi2":
        return chi_boundaries(null_cov, alpha=alpha, family=family, reps=reps, seed=seed)
    if statistic != "z":
        raise ValueError(f"unknown statistic {statistic!r}; use 'z' or 'chi2'")
    shape = _boundary_shape(null_cov, family, statistic)
    if mvn_tol is None:
        mvn_tol = min(alpha / 100.0, 1e-2)
    L = null_cov.num_regimes

    def fwer(c: float) -> tuple[float, float]:
        upper = np.repeat(shape * c, L)
        p, err = mvn_rectangle(upper, null_cov.matrix, tol=mvn_tol, seed=seed)
        return 1.0 - p, err

    lo, hi = 0.0, 8.0
    f_lo, _ = fwer(lo)
    f_hi, _ = fwer(hi)
    if not (f_lo >= alpha >= f_hi):
        raise EstimationError(
            f"boundary bracketing failed on [0, 8]: FWER(0)={f_lo:.4f}, "
            f"FWER(8)={f_hi:.2e} do not straddle alpha={alpha}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        f_mid, _ = fwer(mid)
        if f_mid > alpha:
            lo = mid
        else:
            hi = mid
    c = 0.5 * (lo + hi)
    attained, err = fwer(c)
    return BoundarySpec(
        family=family.lower(),
        statistic="z",
        alpha=alpha,
        values=tuple(float(x) for x in shape * c),
        scale=tuple(float(x) for x in shape),
        num_analyses=null_cov.num_analyses,
        num_regimes=L,
        attained=attained,
        attained_err=err,
        meta={"base_constant": c, "mvn_tol": mvn_tol, "seed": seed},
    )


def _chi_stats(draws: np.ndarray, null_cov: NullCovariance, *, with_dof: bool = False):
    """Homogeneity statistics for (reps, S, L) draws, one column per analysis."""
    reps, S, L = draws.shape
    contrast = np.hstack([np.eye(L - 1), -np.ones((L - 1, 1))])
    stats = np.empty((reps, S))
    dofs = []
    for s in range(S):
        block = null_cov.block(s + 1, s + 1)
        mid = contrast @ block @ contrast.T
        w, u = np.linalg.eigh(mid)
        keep = w > 1e-10 * max(w.max(), 0.0)
        dofs.append(int(keep.sum()))
        half = (u[:, keep] / np.sqrt(w[keep])).T @ contrast  # (rank, L)
        stats[:, s] = ((draws[:, s, :] @ half.T) ** 2).sum(axis=1)
    return (stats, dofs) if with_dof else stats


def sample_null_statistics(null_cov: NullCovariance, reps: int, seed: int = 0) -> np.ndarray:
    """Draw (reps, S, L) statistics from the stacked null law."""
    dim = null_cov.num_analyses * null_cov.num_regimes
    w, u = np.linalg.eigh(null_cov.matrix)
    factor = u * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = rng.standard_normal((reps, dim)) @ factor.T
    return draws.reshape(reps, null_cov.num_analyses, null_cov.num_regimes)


def chi_boundaries(
    null_cov: NullCovariance,
    *,
    alpha: float,
    family: str = "pocock",
    reps: int = 200_000,
    seed: int = 0,
    tol: float = 1e-4,
) -> BoundarySpec:
    """Per-analysis chi-square critical values controlling the FWER at alpha.

    Null statistic vectors are simulated from the stacked law, reduced to the
    homogeneity statistic at each analysis, and the family's base constant is
    solved by bisection on [0, 60] against the empirical exceedance rate.
    O'Brien-Fleming boundaries scale as iota_s^2 times the base constant.
    """
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"alpha must lie in (0, 0.5), got {alpha}")
    L, S = null_cov.num_regimes, null_cov.num_analyses
    if L < 2:
        raise ValueError("homogeneity needs >= 2 regimes")
    draws = sample_null_statistics(null_cov, reps, seed)
    stats, dofs = _chi_stats(draws, null_cov, with_dof=True)
    shape = _boundary_shape(null_cov, family, "chi2")

    def fwer(c: float) -> float:
        return float(np.any(stats > shape * c, axis=1).mean())

    lo, hi = 0.0, 60.0
    f_lo, f_hi = fwer(lo), fwer(hi)
    if not (f_lo >= alpha >= f_hi):
        raise EstimationError(
            f"chi-square boundary bracketing failed on [0, 60]: "
            f"FWER(0)={f_lo:.4f}, FWER(60)={f_hi:.2e} do not straddle alpha={alpha}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fwer(mid) > alpha:
            lo = mid
        else:
            hi = mid
    c = 0.5 * (lo + hi)
    attained = fwer(c)
    return BoundarySpec(
        family=family.lower(),
        statistic="chi2",
        alpha=alpha,
        values=tuple(float(x) for x in shape * c),
        scale=tuple(float(x) for x in shape),
        num_analyses=S,
        num_regimes=L,
        attained=attained,
        attained_err=3.0 * math.sqrt(alpha * (1 - alpha) / reps),
        meta={"base_constant": c, "dof": dofs, "reps": reps, "seed": seed},
    )


# ---------------------------------------------------------------------------
# decisions


@dataclass(frozen=True)
class Decision:
    """Outcome of applying solved boundaries to observed statistics."""

    action: str  # stop-reject | continue | final-fail-to-reject
    analysis: int  # 1-based analysis index
    crossed: tuple[int, ...]  # indices of statistics exceeding the boundary
    statistics: tuple[float, ...]
    boundary: float

    @property
    def stopped(self) -> bool:
        return self.action == "stop-reject"


def decide(statistics: Sequence[float], boundaries: BoundarySpec, s: int) -> Decision:
    """Stop/continue decision at analysis ``s`` (1-based).

    Rejects (and stops) when any statistic strictly exceeds the analysis-s
    critical value; otherwise continues, or fails to reject at the final
    analysis.
    """
    if not 1 <= s <= boundaries.num_analyses:
        raise ValueError(
            f"analysis index {s} outside 1..{boundaries.num_analyses}"
        )
    stats = np.asarray(statistics, dtype=float)
    c = boundaries.boundary_at(s)
    crossed = tuple(int(i) for i in np.flatnonzero(stats > c))
    if crossed:
        action = "stop-reject"
    elif s == boundaries.num_analyses:
        action = "final-fail-to-reject"
    else:
        action = "continue"
    return Decision(
        action=action,
        analysis=s,
        crossed=crossed,
        statistics=tuple(float(x) for x in stats),
        boundary=float(c),
    )

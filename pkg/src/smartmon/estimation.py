"""Value estimation for embedded regimes from complete or interim data.

Three estimators of the mean outcome had everyone followed a regime:

``ipwe``
    Inverse-probability weighting of consistent completers.  On an interim
    snapshot the weight also divides by the estimated completion rate, so
    enrolled-but-unfinished patients shrink the effective sample honestly.

``aipwe``
    The augmented version for a complete dataset: regression models for
    the stage-specific conditional means are folded in so that the
    estimator is consistent if either the randomization probabilities or
    the outcome models are right, and more precise when both are.

``iaipwe``
    The interim generalization.  Each record is classified by how far it
    progressed while following the regime (a coarsening level); levels are
    weighted by inverse products of randomization probabilities and
    progress rates, with regression augmentation at every level.  Two
    algebraically equivalent forms are implemented: a per-level sum using
    discrete hazards ("levels") and a telescoped weighted sum ("telescoped",
    the default, which is cheaper and is also what the variance stack
    differentiates).

``stacked_estimate`` runs any of these for several regimes at once and
returns a joint covariance, treating every fitted quantity (progress
rates, regression coefficients, optionally randomization probabilities
and a hold-out control mean) as solutions of stacked estimating equations
so the sandwich variance accounts for all of them.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .design import DesignError, Regime, SmartDesign
from .features import FeatureData, LinearTerms
from .snapshot import (
    EstimationError,
    ProgressRates,
    RegimeView,
    Snapshot,
    _hazard_survivor_arrays,
    estimate_nu,
    estimate_propensities,
)

__all__ = [
    "ControlSpec",
    "QFit",
    "ValueEstimate",
    "fit_q_models",
    "ipwe",
    "aipwe",
    "iaipwe",
    "point_values",
    "stacked_estimate",
]


@dataclass(frozen=True)
class ControlSpec:
    """How the comparison value is obtained.

    Either a fixed known constant, or the mean outcome of completers on a
    designated first-stage hold-out arm (whose uncertainty then enters the
    monitoring statistics).
    """

    kind: str
    value: float | None = None
    arm_code: int | None = None

    @classmethod
    def fixed(cls, value: float) -> "ControlSpec":
        return cls(kind="fixed", value=float(value))

    @classmethod
    def arm(cls, arm_code: int) -> "ControlSpec":
        return cls(kind="arm", arm_code=int(arm_code))

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "arm"):
            raise ValueError("control kind must be 'fixed' or 'arm'")
        if self.kind == "fixed" and self.value is None:
            raise ValueError("fixed control requires a value")
        if self.kind == "arm" and self.arm_code is None:
            raise ValueError("arm control requires the stage-1 treatment code")


@dataclass
class QFit:
    """Fitted stage-specific outcome regressions for one regime."""

    coefficients: tuple[np.ndarray, ...]  # stage 1..K
    num_rows: tuple[int, ...]
    residual_sd: tuple[float, ...]


def _check_fit_matrix(M: np.ndarray, stage: int, t: float) -> None:
    rows, cols = M.shape
    if rows < cols:
        raise EstimationError(
            f"stage-{stage} working model starved: {rows} usable rows for "
            f"{cols} coefficients at day {t:g}"
        )
    if np.linalg.matrix_rank(M) < cols:
        raise EstimationError(
            f"stage-{stage} working model is rank deficient at day {t:g}; "
            "drop redundant feature terms"
        )


def _validate_q_terms(
    q_terms: Sequence[LinearTerms], design: SmartDesign
) -> None:
    if len(q_terms) != design.num_stages:
        raise DesignError(
            f"expected {design.num_stages} stage models, got {len(q_terms)}"
        )
    for k, terms in enumerate(q_terms, start=1):
        for term in terms.terms:
            for f in term.factors:
                if f.kind != "const" and f.stage > k:
                    raise DesignError(
                        f"stage-{k} model references stage {f.stage} "
                        f"(factor '{f.text}')"
                    )


def _feature_variants(snap: Snapshot, view: RegimeView, k: int):
    """Observed / stage-k-substituted / fully substituted feature sources."""
    K = snap.num_stages
    obs = FeatureData(snap.blocks, snap.acodes, snap.apos)
    tilde_codes = list(snap.acodes)
    tilde_pos = list(snap.apos)
    tilde_codes[k - 1] = view.d_codes[:, k - 1]
    tilde_pos[k - 1] = view.d_pos[:, k - 1]
    tilde = FeatureData(snap.blocks, tilde_codes, tilde_pos)
    sub = FeatureData(
        snap.blocks,
        [view.d_codes[:, j] for j in range(K)],
        [view.d_pos[:, j] for j in range(K)],
    )
    return obs, tilde, sub


def fit_q_models(
    snap: Snapshot,
    design: SmartDesign,
    view: RegimeView,
    q_terms: Sequence[LinearTerms],
    final_fit: tuple[np.ndarray, int, float] | None = None,
) -> "_QParts":
    """Fit the stage models for one regime, deepest stage first.

    The deepest stage regresses the observed outcome on features of the
    full history among completers (this fit does not depend on the regime
    and can be passed in precomputed).  Each earlier stage regresses a
    pseudo-outcome on features of the history so far, where the
    pseudo-outcome is the next stage's fitted value with that stage's
    treatment set to the regime's choice -- except that records whose next
    feasible set was a singleton contribute their most informative actual
    data (the observed outcome when available).
    """
    _validate_q_terms(q_terms, design)
    K = design.num_stages
    n = snap.n
    ft_obs = snap.feature_data()
    coefs: list[np.ndarray | None] = [None] * K
    nrows: list[int] = [0] * K
    rsd: list[float] = [0.0] * K
    preds_tilde: list[np.ndarray | None] = [None] * K  # E[.|observed<k, d_k]
    lvals: list[np.ndarray | None] = [None] * K  # fully substituted
    tilde_mats: list[np.ndarray | None] = [None] * K
    sub_mats: list[np.ndarray | None] = [None] * K
    obs_mats: list[np.ndarray | None] = [None] * K
    # keyed by the stage whose fit consumes them
    pseudo: dict[int, np.ndarray] = {}
    pseudo_from_model: dict[int, np.ndarray] = {}
    y0 = np.nan_to_num(snap.outcome)

    for k in range(K, 0, -1):
        terms = q_terms[k - 1]
        _, tilde_ft, sub_ft = _feature_variants(snap, view, k)
        M_obs = np.nan_to_num(ft_obs.matrix(terms, design))
        M_tilde = np.nan_to_num(tilde_ft.matrix(terms, design))
        M_sub = np.nan_to_num(sub_ft.matrix(terms, design))
        obs_mats[k - 1] = M_obs
        tilde_mats[k - 1] = M_tilde
        sub_mats[k - 1] = M_sub
        if k == K:
            fit_mask = snap.delta == 1
            y_fit = y0
        else:
            fit_mask = snap.kappa > k
            y_fit = pseudo[k]  # assembled when processing stage k+1
        if final_fit is not None and k == K:
            beta, nr, sd = final_fit
        else:
            Mf = M_obs[fit_mask]
            _check_fit_matrix(Mf, k, snap.t)
            beta, *_ = np.linalg.lstsq(Mf, y_fit[fit_mask], rcond=None)
            resid = y_fit[fit_mask] - Mf @ beta
            nr = int(fit_mask.sum())
            sd = float(np.sqrt(np.mean(resid**2))) if nr else 0.0
        coefs[k - 1] = beta
        nrows[k - 1] = nr
        rsd[k - 1] = sd
        preds_tilde[k - 1] = M_tilde @ beta
        lvals[k - 1] = M_sub @ beta
        if k > 1:
            # Pseudo-outcome for the stage-(k-1) fit, defined on kappa >= k.
            base = preds_tilde[k - 1].copy()
            single = view.n_options[:, k - 1] == 1
            use_y = single & (snap.delta == 1)
            base[use_y] = y0[use_y]
            deeper = single & (snap.delta == 0) & (snap.kappa > k)
            if np.any(deeper):
                for m in range(k + 1, K + 1):
                    sel = deeper & (np.minimum(snap.kappa, K) == m)
                    base[sel] = preds_tilde[m - 1][sel]
            pseudo[k - 1] = base
            pseudo_from_model[k - 1] = ~use_y
    return _QParts(
        coefs=tuple(coefs),
        nrows=tuple(nrows),
        rsd=tuple(rsd),
        lvals=tuple(lvals),
        tilde_mats=tuple(tilde_mats),
        sub_mats=tuple(sub_mats),
        obs_mats=tuple(obs_mats),
        pseudo=pseudo,
        pseudo_from_model=pseudo_from_model,
    )


@dataclass
class _QParts:
    coefs: tuple
    nrows: tuple
    rsd: tuple
    lvals: tuple
    tilde_mats: tuple
    sub_mats: tuple
    obs_mats: tuple
    pseudo: dict
    pseudo_from_model: dict

    def qfit(self) -> QFit:
        return QFit(
            coefficients=tuple(c.copy() for c in self.coefs),
            num_rows=self.nrows,
            residual_sd=self.rsd,
        )


def _resolve_propensities(
    snap: Snapshot, design: SmartDesign, propensities
) -> tuple[dict | None, bool]:
    """Returns (table-or-None-for-design, estimated?)."""
    if propensities is None or propensities == "design":
        return None, False
    if propensities == "estimated":
        return estimate_propensities(snap, design), True
    if isinstance(propensities, Mapping):
        return dict(propensities), False
    raise ValueError("propensities must be None, 'design', 'estimated', or a mapping")


def _weights(view: RegimeView, rates: ProgressRates) -> list[np.ndarray]:
    """Level weights W_1..W_K of the telescoped form (W_k = 0 off support)."""
    snap = view.snap
    K = view.design.num_stages
    nu = rates.values
    piprod = np.ones(snap.n)
    out = []
    for k in range(1, K + 1):
        at = snap.observed_at_stage(k)
        piprod = np.where(at, piprod * np.where(at, view.a_prob[:, k - 1], 1.0), piprod)
        if k < K:
            mask = view.consistent_through(k) & snap.observed_at_stage(k + 1)
            denom = nu[k]
        else:
            mask = view.consistent_through(K) & (snap.delta == 1)
            denom = nu[K]
        if denom < 1e-12:
            if np.any(mask):
                raise EstimationError(
                    f"degenerate progress rate: nu_{k + 1} is zero at day {snap.t:g}"
                )
            out.append(np.zeros(snap.n))
            continue
        w = np.where(mask, 1.0 / (denom * np.where(piprod > 0, piprod, 1.0)), 0.0)
        out.append(w)
    return out


def _telescoped_contributions(
    snap: Snapshot, weights: list[np.ndarray], lvals: Sequence[np.ndarray]
) -> np.ndarray:
    K = snap.num_stages
    y0 = np.nan_to_num(snap.outcome)
    contrib = lvals[0].copy()
    for k in range(1, K):
        contrib += weights[k - 1] * np.where(
            weights[k - 1] != 0, lvals[k] - lvals[k - 1], 0.0
        )
    contrib += weights[K - 1] * np.where(weights[K - 1] != 0, y0 - lvals[K - 1], 0.0)
    return contrib


def _levels_contributions(
    snap: Snapshot,
    view: RegimeView,
    rates: ProgressRates,
    lvals: Sequence[np.ndarray],
) -> np.ndarray:
    """Per-level form: outcome term plus one augmentation term per level."""
    K = snap.num_stages
    lam, surv, at_risk = _hazard_survivor_arrays(view, rates)
    levels = view.levels()
    y0 = np.nan_to_num(snap.outcome)
    complete = np.isinf(levels)
    contrib = np.where(
        complete & at_risk[:, 2 * K - 1], y0 / np.where(complete, surv[:, 2 * K - 1], 1.0), 0.0
    )
    for r in range(1, 2 * K + 1):
        risk = at_risk[:, r - 1]
        ind = levels == r
        inc = np.where(risk, (ind - np.where(risk, lam[:, r - 1], 0.0) * risk), 0.0)
        denom = np.where(risk, surv[:, r - 1], 1.0)
        contrib += np.where(risk, inc / denom, 0.0) * lvals[(r + 1) // 2 - 1]
    return contrib


def _require_identified(view: RegimeView, snap: Snapshot, label: str) -> None:
    mask = view.consistent_through(snap.num_stages) & (snap.delta == 1)
    if not np.any(mask):
        raise EstimationError(
            f"regime '{label}' is unidentified at day {snap.t:g}: "
            "no consistent record with an observed outcome"
        )


def ipwe(
    snap: Snapshot,
    design: SmartDesign,
    regime: Regime,
    *,
    rates: ProgressRates | None = None,
    propensities=None,
    normalized: bool = False,
) -> float:
    """Inverse-probability-weighted value of one regime from a snapshot.

    The default divides the weighted outcome total by the number of
    enrolled records.  ``normalized=True`` divides by the realized sum of
    weights instead, which is the variant usually preferred in practice
    since it is invariant to outcome location shifts.
    """
    table, _ = _resolve_propensities(snap, design, propensities)
    if rates is None:
        rates = estimate_nu(snap)
    if rates.completed < 1e-12:
        raise EstimationError(
            f"degenerate progress rate: no completed outcomes at day {snap.t:g}"
        )
    view = RegimeView(snap, design, regime, propensities=table)
    _require_identified(view, snap, regime.label or "regime")
    w = _weights(view, rates)[-1]
    y0 = np.nan_to_num(snap.outcome)
    if normalized:
        return float(np.sum(w * y0) / np.sum(w))
    return float(np.mean(w * y0))


def iaipwe(
    snap: Snapshot,
    design: SmartDesign,
    regime: Regime,
    q_terms: Sequence[LinearTerms],
    *,
    rates: ProgressRates | None = None,
    propensities=None,
    form: str = "telescoped",
) -> float:
    """Interim augmented value estimate of one regime.

    ``form`` selects between the two equivalent computations; they agree
    to numerical precision and the per-level form exists mainly as an
    independent cross-check of the weighting algebra.
    """
    if form not in ("telescoped", "levels"):
        raise ValueError("form must be 'telescoped' or 'levels'")
    table, _ = _resolve_propensities(snap, design, propensities)
    if rates is None:
        rates = estimate_nu(snap)
    view = RegimeView(snap, design, regime, propensities=table)
    _require_identified(view, snap, regime.label or "regime")
    q = fit_q_models(snap, design, view, q_terms)
    if form == "telescoped":
        contrib = _telescoped_contributions(snap, _weights(view, rates), q.lvals)
    else:
        contrib = _levels_contributions(snap, view, rates, q.lvals)
    return float(np.mean(contrib))


def aipwe(
    snap: Snapshot,
    design: SmartDesign,
    regime: Regime,
    q_terms: Sequence[LinearTerms],
    *,
    propensities=None,
) -> float:
    """Augmented value estimate from a complete dataset (every outcome in)."""
    if np.any(snap.delta == 0):
        raise EstimationError(
            "augmented complete-data estimator requires all outcomes observed; "
            "use the interim estimator on partial snapshots"
        )
    return iaipwe(snap, design, regime, q_terms, propensities=propensities)


def point_values(
    snap: Snapshot,
    design: SmartDesign,
    regimes: Sequence[Regime],
    *,
    estimator: str = "iaipwe",
    q_terms: Sequence[LinearTerms] | None = None,
    propensities=None,
    nu_method: str = "average",
    control: ControlSpec | None = None,
    ipwe_normalized: bool = True,
) -> tuple[np.ndarray, float | None, ProgressRates]:
    """Point estimates only (no covariance): the fast path for simulation.

    Returns (regime values, control value or None, progress rates).
    """
    table, _ = _resolve_propensities(snap, design, propensities)
    rates = estimate_nu(snap, method=nu_method)
    if estimator in ("aipwe",) and np.any(snap.delta == 0):
        raise EstimationError(
            "augmented complete-data estimator requires all outcomes observed"
        )
    final_fit = None
    vals = np.empty(len(regimes))
    for j, regime in enumerate(regimes):
        view = RegimeView(snap, design, regime, propensities=table)
        _require_identified(view, snap, regime.label or f"regime {j}")
        if estimator in ("iaipwe", "aipwe"):
            if q_terms is None:
                raise ValueError("augmented estimators need stage feature terms")
            q = fit_q_models(snap, design, view, q_terms, final_fit=final_fit)
            K = design.num_stages
            final_fit = (q.coefs[K - 1], q.nrows[K - 1], q.rsd[K - 1])
            contrib = _telescoped_contributions(snap, _weights(view, rates), q.lvals)
            vals[j] = float(np.mean(contrib))
        elif estimator == "ipwe":
            if rates.completed < 1e-12:
                raise EstimationError(
                    f"degenerate progress rate: no completed outcomes at day {snap.t:g}"
                )
            w = _weights(view, rates)[-1]
            y0 = np.nan_to_num(snap.outcome)
            vals[j] = (
                float(np.sum(w * y0) / np.sum(w))
                if ipwe_normalized
                else float(np.mean(w * y0))
            )
        else:
            raise ValueError(f"unknown estimator '{estimator}'")
    v0 = None
    if control is not None and control.kind == "arm":
        mask = (snap.delta == 1) & (snap.acodes[0] == control.arm_code)
        if not np.any(mask):
            raise EstimationError(
                f"control arm {control.arm_code} has no completed outcomes "
                f"at day {snap.t:g}"
            )
        v0 = float(np.mean(snap.outcome[mask]))
    elif control is not None:
        v0 = control.value
    return vals, v0, rates


@dataclass
class ValueEstimate:
    """Joint regime-value estimates at one analysis day."""

    kind: str
    t: float
    n: int
    labels: tuple[str, ...]
    values: np.ndarray
    covariance: np.ndarray | None
    rates: ProgressRates
    control: ControlSpec | None = None
    control_value: float | None = None
    control_variance: float = 0.0
    control_covariances: np.ndarray | None = None
    se_method: str | None = None
    details: dict = field(default_factory=dict)

    @property
    def ses(self) -> np.ndarray:
        if self.covariance is None:
            raise EstimationError("no covariance was computed for this estimate")
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def contrast_variances(self) -> np.ndarray:
        """Variance of each (value - control) contrast."""
        var = np.clip(np.diag(self.covariance), 0.0, None)
        if self.control is not None and self.control.kind == "arm":
            cc = self.control_covariances
            return var + self.control_variance - 2.0 * cc
        return var


class _Parts:
    """Everything the stacked estimating equations need, precomputed."""

    def __init__(
        self,
        snap: Snapshot,
        design: SmartDesign,
        regimes: Sequence[Regime],
        q_terms,
        estimator: str,
        control: ControlSpec | None,
        table: dict | None,
        estimated_props: bool,
        ipwe_normalized: bool,
        nu_method: str,
    ) -> None:
        if design.num_stages != 2:
            raise EstimationError(
                "the analytic variance stack covers two-stage designs; "
                "use bootstrap covariance for other depths"
            )
        self.snap = snap
        self.design = design
        self.estimator = estimator
        self.control = control
        self.ipwe_normalized = ipwe_normalized
        self.n = snap.n
        self.kap2 = (snap.kappa >= 2).astype(float)
        self.delta = snap.delta.astype(float)
        self.y0 = np.nan_to_num(snap.outcome)
        self.rates = estimate_nu(snap, method=nu_method)
        self.augmented = estimator in ("iaipwe", "aipwe")

        self.views = [
            RegimeView(snap, design, r, propensities=table) for r in regimes
        ]
        for r, view in zip(regimes, self.views):
            _require_identified(view, snap, r.label or "regime")

        # Per-(row, stage) observed-action probabilities, and for estimated
        # propensities the owning binary cell plus the derivative sign.
        self.a_prob = self.views[0].a_prob.copy()
        self.cell_names: list = []
        self.cell_index = np.full((self.n, 2), -1, dtype=np.int64)
        self.cell_sign = np.zeros((self.n, 2))
        self.cell_at = [self.kap2 * 0 + 1.0, self.kap2]  # at-stage masks
        self.p_hat = np.empty(0)
        if estimated_props:
            p_vals = []
            for key, options in design.feasible.items():
                if len(options) == 1:
                    continue
                if len(options) > 2:
                    raise EstimationError(
                        "the variance stack with estimated randomization "
                        "probabilities supports two-option cells only; "
                        "use bootstrap covariance"
                    )
                stage = key[0]
                atm = self.cell_at[stage - 1] > 0
                rows = np.nonzero(atm)[0]
                if stage == 1:
                    sel = rows
                else:
                    ok = np.ones(rows.size, dtype=bool)
                    for j, code in enumerate(key[1]):
                        ok &= snap.acodes[j][rows] == code
                    vals = snap.blocks[1][rows, design.response_coords[2]]
                    resp = np.where(ok, np.round(np.nan_to_num(vals)), -1)
                    sel = rows[ok & (resp == key[2])]
                if sel.size == 0:
                    continue
                ci = len(self.cell_names)
                self.cell_names.append(key)
                self.cell_index[sel, stage - 1] = ci
                is_opt1 = snap.acodes[stage - 1][sel] == options[1]
                self.cell_sign[sel, stage - 1] = np.where(is_opt1, 1.0, -1.0)
                p_vals.append(float(table[key][1]))
            self.p_hat = np.array(p_vals)

        self.q_parts = []
        if self.augmented:
            final_fit = None
            for view in self.views:
                q = fit_q_models(snap, design, view, q_terms, final_fit=final_fit)
                final_fit = (q.coefs[1], q.nrows[1], q.rsd[1])
                self.q_parts.append(q)
            self.p2 = self.q_parts[0].obs_mats[1].shape[1]
            self.p1 = self.q_parts[0].obs_mats[0].shape[1]
        else:
            self.p1 = self.p2 = 0

        # Parameter layout: nu2, nu3, [p cells], [beta2], [beta1 x L], V x L, [V0]
        self.L = len(regimes)
        self.mcells = len(self.cell_names)
        idx = 2
        self.sl_p = slice(idx, idx + self.mcells)
        idx += self.mcells
        self.sl_b2 = slice(idx, idx + self.p2)
        idx += self.p2
        self.sl_b1 = []
        for _ in range(self.L if self.augmented else 0):
            self.sl_b1.append(slice(idx, idx + self.p1))
            idx += self.p1
        self.sl_v = slice(idx, idx + self.L)
        idx += self.L
        self.has_v0 = control is not None and control.kind == "arm"
        self.sl_v0 = slice(idx, idx + 1) if self.has_v0 else slice(idx, idx)
        idx += int(self.has_v0)
        self.dim = idx
        if self.has_v0:
            self.arm_mask = (snap.delta == 1) & (
                snap.acodes[0] == control.arm_code
            )
            if not np.any(self.arm_mask):
                raise EstimationError(
                    f"control arm {control.arm_code} has no completed outcomes "
                    f"at day {snap.t:g}"
                )

    # -- solving for theta-hat ------------------------------------------------

    def solve(self) -> np.ndarray:
        theta = np.zeros(self.dim)
        theta[0] = self.rates.values[1]
        theta[1] = self.rates.values[2]
        theta[self.sl_p] = self.p_hat
        if self.augmented:
            theta[self.sl_b2] = self.q_parts[0].coefs[1]
            for j, sl in enumerate(self.sl_b1):
                theta[sl] = self.q_parts[j].coefs[0]
        vals = np.empty(self.L)
        for j in range(self.L):
            w1, w2 = self._weights_at(theta, j)
            if self.augmented:
                l1, l2 = self._lvals_at(theta, j)
                vals[j] = np.mean(
                    l1 + w1 * np.where(w1 != 0, l2 - l1, 0.0)
                    + w2 * np.where(w2 != 0, self.y0 - l2, 0.0)
                )
            elif self.ipwe_normalized:
                vals[j] = np.sum(w2 * self.y0) / np.sum(w2)
            else:
                vals[j] = np.mean(w2 * self.y0)
        theta[self.sl_v] = vals
        if self.has_v0:
            theta[self.sl_v0] = np.mean(self.y0[self.arm_mask])
        return theta

    def _pi_at(self, theta: np.ndarray, stage: int) -> np.ndarray:
        """Observed-action probabilities at stage, as a function of theta."""
        base = self.a_prob[:, stage - 1]
        ci = self.cell_index[:, stage - 1]
        if self.mcells == 0 or not np.any(ci >= 0):
            return base
        p = theta[self.sl_p]
        pc = np.where(ci >= 0, p[np.clip(ci, 0, None)], 0.0)
        s = self.cell_sign[:, stage - 1]
        est = np.where(s > 0, pc, 1.0 - pc)
        return np.where(ci >= 0, est, base)

    def _weights_at(self, theta, j) -> tuple[np.ndarray, np.ndarray]:
        view = self.views[j]
        nu2, nu3 = theta[0], theta[1]
        pi1 = self._pi_at(theta, 1)
        pi2 = self._pi_at(theta, 2)
        m1 = view.consistent_through(1) & (self.kap2 > 0)
        m2 = view.consistent_through(2) & (self.delta > 0)
        pi2_safe = np.where(self.kap2 > 0, pi2, 1.0)
        w1 = np.where(m1, 1.0 / (nu2 * pi1), 0.0)
        w2 = np.where(m2, 1.0 / (nu3 * pi1 * pi2_safe), 0.0)
        return w1, w2

    def _pseudo_at(self, theta, j) -> np.ndarray:
        q = self.q_parts[j]
        b2 = theta[self.sl_b2]
        base = q.tilde_mats[1] @ b2
        fromy = ~q.pseudo_from_model[1]
        return np.where(fromy, self.y0, base)

    def _lvals_at(self, theta, j) -> tuple[np.ndarray, np.ndarray]:
        q = self.q_parts[j]
        return q.sub_mats[0] @ theta[self.sl_b1[j]], q.sub_mats[1] @ theta[self.sl_b2]

    # -- stacked estimating functions ------------------------------------------

    def psi(self, theta: np.ndarray) -> np.ndarray:
        """Per-record estimating functions, shape (n, dim)."""
        n = self.n
        out = np.zeros((n, self.dim))
        out[:, 0] = self.kap2 - theta[0]
        out[:, 1] = self.delta - theta[1]
        for ci in range(self.mcells):
            stage = self.cell_names[ci][0]
            inc = self.cell_index[:, stage - 1] == ci
            s = self.cell_sign[:, stage - 1]
            out[:, 2 + ci] = np.where(inc, (s > 0) - theta[self.sl_p][ci], 0.0)
        if self.augmented:
            b2 = theta[self.sl_b2]
            g2 = self.q_parts[0].obs_mats[1]
            out[:, self.sl_b2] = (self.delta * (self.y0 - g2 @ b2))[:, None] * g2
            for j in range(self.L):
                q = self.q_parts[j]
                g1 = q.obs_mats[0]
                yt = self._pseudo_at(theta, j)
                resid = self.kap2 * (yt - g1 @ theta[self.sl_b1[j]])
                out[:, self.sl_b1[j]] = resid[:, None] * g1
        vcols = np.zeros((n, self.L))
        for j in range(self.L):
            w1, w2 = self._weights_at(theta, j)
            v = theta[self.sl_v][j]
            if self.augmented:
                l1, l2 = self._lvals_at(theta, j)
                vcols[:, j] = (
                    l1
                    + w1 * np.where(w1 != 0, l2 - l1, 0.0)
                    + w2 * np.where(w2 != 0, self.y0 - l2, 0.0)
                    - v
                )
            elif self.ipwe_normalized:
                vcols[:, j] = w2 * (self.y0 - v)
            else:
                vcols[:, j] = w2 * self.y0 - v
        out[:, self.sl_v] = vcols
        if self.has_v0:
            out[:, self.sl_v0] = (
                self.arm_mask * (self.y0 - theta[self.sl_v0][0])
            )[:, None]
        return out

    # -- analytic bread ---------------------------------------------------------

    def bread(self, theta: np.ndarray) -> np.ndarray:
        n = self.n
        A = np.zeros((self.dim, self.dim))
        A[0, 0] = 1.0
        A[1, 1] = 1.0
        for ci in range(self.mcells):
            stage = self.cell_names[ci][0]
            inc = self.cell_index[:, stage - 1] == ci
            A[2 + ci, 2 + ci] = np.mean(inc)
        if self.augmented:
            g2 = self.q_parts[0].obs_mats[1]
            A[self.sl_b2, self.sl_b2] = (g2.T * self.delta) @ g2 / n
            for j in range(self.L):
                q = self.q_parts[j]
                g1 = q.obs_mats[0]
                A[self.sl_b1[j], self.sl_b1[j]] = (g1.T * self.kap2) @ g1 / n
                model_rows = self.kap2 * q.pseudo_from_model[1]
                A[self.sl_b1[j], self.sl_b2] = (
                    -(g1.T * model_rows) @ q.tilde_mats[1] / n
                )
        nu2, nu3 = theta[0], theta[1]
        for j in range(self.L):
            row = self.sl_v.start + j
            w1, w2 = self._weights_at(theta, j)
            if self.augmented:
                l1, l2 = self._lvals_at(theta, j)
                t1 = w1 * np.where(w1 != 0, l2 - l1, 0.0)
                t2 = w2 * np.where(w2 != 0, self.y0 - l2, 0.0)
                A[row, 0] = np.mean(t1) / nu2
                A[row, 1] = np.mean(t2) / nu3
                g1s = self.q_parts[j].sub_mats[0]
                g2s = self.q_parts[j].sub_mats[1]
                A[row, self.sl_b1[j]] = -np.mean(
                    (1.0 - w1)[:, None] * g1s, axis=0
                )
                A[row, self.sl_b2] = -np.mean(
                    (w1 - w2)[:, None] * g2s, axis=0
                )
                A[row, row] = 1.0
            elif self.ipwe_normalized:
                v = theta[self.sl_v][j]
                t2 = w2 * (self.y0 - v)
                A[row, 1] = np.mean(t2) / nu3
                A[row, row] = np.mean(w2)
            else:
                t2 = w2 * self.y0
                A[row, 1] = np.mean(t2) / nu3
                A[row, row] = 1.0
            if self.mcells:
                if self.augmented:
                    terms1 = w1 * np.where(w1 != 0, l2 - l1, 0.0)
                    terms2 = w2 * np.where(w2 != 0, self.y0 - l2, 0.0)
                elif self.ipwe_normalized:
                    terms1 = np.zeros(n)
                    terms2 = w2 * (self.y0 - theta[self.sl_v][j])
                else:
                    terms1 = np.zeros(n)
                    terms2 = w2 * self.y0
                pi1 = self._pi_at(theta, 1)
                pi2 = np.where(self.kap2 > 0, self._pi_at(theta, 2), 1.0)
                for ci in range(self.mcells):
                    inc1 = self.cell_index[:, 0] == ci
                    inc2 = self.cell_index[:, 1] == ci
                    sig1 = np.where(inc1, self.cell_sign[:, 0] / pi1, 0.0)
                    sig2 = sig1 + np.where(inc2, self.cell_sign[:, 1] / pi2, 0.0)
                    A[row, 2 + ci] = np.mean(terms1 * sig1 + terms2 * sig2)
        if self.has_v0:
            r0 = self.sl_v0.start
            A[r0, r0] = np.mean(self.arm_mask)
        return A


def _fd_bread(parts: _Parts, theta: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Numerical bread via central differences of the mean psi; test hook."""
    dim = theta.size
    A = np.zeros((dim, dim))
    for c in range(dim):
        h = step * max(1.0, abs(theta[c]))
        up = theta.copy()
        up[c] += h
        dn = theta.copy()
        dn[c] -= h
        A[:, c] = -(parts.psi(up).mean(axis=0) - parts.psi(dn).mean(axis=0)) / (2 * h)
    return A


def stacked_estimate(
    snap: Snapshot,
    design: SmartDesign,
    regimes: Sequence[Regime],
    *,
    estimator: str = "iaipwe",
    q_terms: Sequence[LinearTerms] | None = None,
    control: ControlSpec | None = None,
    propensities=None,
    nu_method: str = "average",
    cov_method: str | None = "sandwich",
    ipwe_normalized: bool = True,
    bootstrap_reps: int = 1000,
    seed: int = 0,
    _fd_check: bool = False,
) -> ValueEstimate:
    """Joint value estimates for several regimes with a full covariance.

    ``cov_method`` is "sandwich" (analytic, two-stage designs), "bootstrap"
    (nonparametric over records), or None for points only.  With the
    sandwich, the uncertainty of estimated progress rates, outcome-model
    coefficients, randomization probabilities (when ``propensities=
    "estimated"``) and a hold-out control mean all propagate into the
    reported covariance.
    """
    if estimator not in ("iaipwe", "aipwe", "ipwe"):
        raise ValueError(f"unknown estimator '{estimator}'")
    if estimator == "aipwe" and np.any(snap.delta == 0):
        raise EstimationError(
            "augmented complete-data estimator requires all outcomes observed; "
            "use the interim estimator on partial snapshots"
        )
    if estimator in ("iaipwe", "aipwe") and q_terms is None:
        raise ValueError("augmented estimators need stage feature terms")
    labels = tuple(r.label or f"regime {j + 1}" for j, r in enumerate(regimes))
    table, est_props = _resolve_propensities(snap, design, propensities)

    if cov_method is None or cov_method == "bootstrap":
        vals, v0, rates = point_values(
            snap,
            design,
            regimes,
            estimator=estimator,
            q_terms=q_terms,
            propensities=propensities if not est_props else "estimated",
            nu_method=nu_method,
            control=control,
            ipwe_normalized=ipwe_normalized,
        )
        est = ValueEstimate(
            kind=estimator,
            t=snap.t,
            n=snap.n,
            labels=labels,
            values=vals,
            covariance=None,
            rates=rates,
            control=control,
            control_value=v0,
            se_method=None,
        )
        if cov_method == "bootstrap":
            _bootstrap_cov(est, snap, design, regimes, estimator, q_terms,
                           control, propensities, nu_method, ipwe_normalized,
                           bootstrap_reps, seed)
        return est

    if cov_method != "sandwich":
        raise ValueError("cov_method must be 'sandwich', 'bootstrap', or None")

    parts = _Parts(
        snap, design, regimes, q_terms, estimator, control, table,
        est_props, ipwe_normalized, nu_method,
    )
    theta = parts.solve()
    check = parts.psi(theta).mean(axis=0)
    if np.max(np.abs(check)) > 1e-6 * max(1.0, float(np.max(np.abs(theta)))):
        raise EstimationError(
            "stacked estimating equations failed to balance at the solution"
        )
    if parts.n < 5 * parts.dim:
        warnings.warn(
            f"sample size {parts.n} is small for {parts.dim} stacked "
            "parameters; the sandwich covariance may be unstable "
            "(consider bootstrap)",
            stacklevel=2,
        )
    A = _fd_bread(parts, theta) if _fd_check else parts.bread(theta)
    psi = parts.psi(theta)
    B = psi.T @ psi / parts.n
    M = np.linalg.solve(A, B)
    cov_theta = np.linalg.solve(A, M.T).T / parts.n
    cov_theta = 0.5 * (cov_theta + cov_theta.T)
    sv = parts.sl_v
    cov = cov_theta[sv, sv]
    eig = np.linalg.eigvalsh(cov)
    if eig.min() < -1e-10 * max(1.0, eig.max()):
        warnings.warn("value covariance was not PSD; projecting", stacklevel=2)
        w, Q = np.linalg.eigh(cov)
        cov = (Q * np.clip(w, 0.0, None)) @ Q.T
    v0 = None
    v0_var = 0.0
    v0_cov = np.zeros(len(regimes))
    if parts.has_v0:
        i0 = parts.sl_v0.start
        v0 = float(theta[i0])
        v0_var = float(cov_theta[i0, i0])
        v0_cov = cov_theta[sv, i0]
    elif control is not None:
        v0 = control.value
    return ValueEstimate(
        kind=estimator,
        t=snap.t,
        n=parts.n,
        labels=labels,
        values=theta[sv].copy(),
        covariance=cov,
        rates=parts.rates,
        control=control,
        control_value=v0,
        control_variance=v0_var,
        control_covariances=v0_cov,
        se_method="sandwich",
        details={
            "theta_dim": parts.dim,
            "estimated_propensities": est_props,
        },
    )


def _bootstrap_cov(
    est: ValueEstimate,
    snap: Snapshot,
    design: SmartDesign,
    regimes,
    estimator,
    q_terms,
    control,
    propensities,
    nu_method,
    ipwe_normalized,
    reps: int,
    seed: int,
) -> None:
    rng = np.random.Generator(np.random.Philox(seed))
    L = len(regimes)
    has_v0 = control is not None and control.kind == "arm"
    draws = np.full((reps, L + int(has_v0)), np.nan)
    failures = 0
    for b in range(reps):
        idx = rng.integers(0, snap.n, snap.n)
        try:
            vals, v0, _ = point_values(
                snap.subset(idx),
                design,
                regimes,
                estimator=estimator,
                q_terms=q_terms,
                propensities=propensities,
                nu_method=nu_method,
                control=control,
                ipwe_normalized=ipwe_normalized,
            )
        except EstimationError:
            failures += 1
            continue
        draws[b, :L] = vals
        if has_v0:
            draws[b, L] = v0
    if failures > 0.05 * reps:
        raise EstimationError(
            f"bootstrap failed on {failures}/{reps} resamples; "
            "the snapshot is too sparse for a stable covariance"
        )
    good = ~np.isnan(draws[:, 0])
    C = np.cov(draws[good].T, ddof=1)
    C = np.atleast_2d(C)
    est.covariance = C[:L, :L]
    if has_v0:
        est.control_variance = float(C[L, L])
        est.control_covariances = C[:L, L]
    else:
        est.control_covariances = np.zeros(L)
    est.se_method = "bootstrap"
    est.details["bootstrap_failures"] = failures

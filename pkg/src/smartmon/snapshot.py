"""Interim views of a trial: what is observed on a given analysis day.

On analysis day t a patient enrolled earlier contributes whatever stages
have concluded by t.  ``kappa`` counts the treatment decisions already made
(1..K for enrolled patients), ``delta`` says whether the final outcome is
in.  Masked fields are structurally absent (NaN / -1), never zero-filled.

For a fixed regime, each record collapses to a coarsening level describing
how far it progressed while remaining consistent with the regime:

    level 2k-1  consistent through stage k-1, reached stage k, but the
                stage-k treatment deviates from the regime (absorbing);
    level 2k    consistent through stage k and stalled there (no further
                stage concluded by t; for k = K, the outcome is pending);
    level inf   fully consistent with the outcome observed.

Progress rates nu_k estimate how far enrolled patients have advanced;
together with the randomization probabilities they give the discrete
hazard and survivor quantities that weight each coarsening level.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DesignError, History, Regime, SmartDesign
from .features import FeatureData
from .simulate import Cohort, Trajectory

__all__ = [
    "ObservedRecord",
    "Snapshot",
    "ProgressRates",
    "EstimationError",
    "observe",
    "observe_cohort",
    "coarsening_level",
    "estimate_nu",
    "hazard_and_survivor",
    "estimate_propensities",
]

COMPLETE = math.inf


class EstimationError(RuntimeError):
    """Raised when a snapshot cannot support the requested computation."""


@dataclass(frozen=True)
class ObservedRecord:
    """One patient's data as visible on the analysis day.

    ``covariates``/``actions`` hold only the observed stages (length kappa).
    ``outcome`` is None unless ``delta`` is 1.  ``gamma`` is 0 for patients
    not yet enrolled, in which case everything else is empty.
    """

    gamma: int
    kappa: int
    delta: int
    enroll_day: float | None = None
    covariates: tuple[tuple[float, ...], ...] = ()
    actions: tuple[int, ...] = ()
    action_positions: tuple[int, ...] = ()
    outcome: float | None = None

    def __post_init__(self) -> None:
        if self.gamma == 0 and self.kappa != 0:
            raise DesignError("kappa must be 0 for unenrolled records")
        if self.gamma == 1 and self.kappa < 1:
            raise DesignError("enrolled records must have kappa >= 1")
        if self.delta == 1 and self.outcome is None:
            raise DesignError("delta = 1 requires an observed outcome")
        if self.delta == 0 and self.outcome is not None:
            raise DesignError("outcome present but delta = 0")
        if len(self.covariates) != self.kappa or len(self.actions) != self.kappa:
            raise DesignError("observed stages must match kappa")


class Snapshot:
    """Column-oriented interim dataset of the enrolled patients at day t."""

    def __init__(
        self,
        t: float,
        num_stages: int,
        enroll: np.ndarray,
        kappa: np.ndarray,
        delta: np.ndarray,
        blocks: list[np.ndarray],
        acodes: list[np.ndarray],
        apos: list[np.ndarray],
        outcome: np.ndarray,
        n_planned: int | None = None,
    ) -> None:
        self.t = float(t)
        self.num_stages = num_stages
        self.enroll = np.asarray(enroll, dtype=float)
        self.kappa = np.asarray(kappa, dtype=np.int64)
        self.delta = np.asarray(delta, dtype=np.int64)
        self.blocks = blocks
        self.acodes = acodes
        self.apos = apos
        self.outcome = np.asarray(outcome, dtype=float)
        self.n = self.enroll.shape[0]
        self.n_planned = n_planned if n_planned is not None else self.n
        if self.n and (self.kappa.min() < 1 or self.kappa.max() > num_stages):
            raise DesignError("kappa out of range for enrolled records")
        if self.n and np.any((self.delta == 1) & (self.kappa != num_stages)):
            raise DesignError("completed records must have kappa = K")

    def observed_at_stage(self, k: int) -> np.ndarray:
        """Boolean mask of rows whose stage-k block and action are visible."""
        return self.kappa >= k

    def feature_data(self) -> FeatureData:
        return FeatureData(self.blocks, self.acodes, self.apos)

    def record(self, i: int) -> ObservedRecord:
        k = int(self.kappa[i])
        d = int(self.delta[i])
        return ObservedRecord(
            gamma=1,
            kappa=k,
            delta=d,
            enroll_day=float(self.enroll[i]),
            covariates=tuple(tuple(b[i]) for b in self.blocks[:k]),
            actions=tuple(int(a[i]) for a in self.acodes[:k]),
            action_positions=tuple(int(a[i]) for a in self.apos[:k]),
            outcome=float(self.outcome[i]) if d else None,
        )

    def subset(self, mask: np.ndarray) -> "Snapshot":
        return Snapshot(
            self.t,
            self.num_stages,
            self.enroll[mask],
            self.kappa[mask],
            self.delta[mask],
            [b[mask] for b in self.blocks],
            [a[mask] for a in self.acodes],
            [a[mask] for a in self.apos],
            self.outcome[mask],
            n_planned=self.n_planned,
        )

    def completers(self) -> "Snapshot":
        return self.subset(self.delta == 1)


@dataclass(frozen=True)
class ProgressRates:
    """Estimated progress-through-trial rates among enrolled patients.

    ``values[k-1]`` estimates the probability an enrolled patient has
    reached stage k (so values[0] is 1); the final entry estimates the
    probability the outcome has been ascertained.
    """

    values: tuple[float, ...]

    def __post_init__(self) -> None:
        v = self.values
        if not v or abs(v[0] - 1.0) > 1e-12:
            raise DesignError("progress rates must start at 1")
        if any(b > a + 1e-12 for a, b in zip(v, v[1:])):
            raise DesignError("progress rates must be non-increasing")
        if v[-1] < -1e-12 or v[0] > 1 + 1e-12:
            raise DesignError("progress rates must lie in [0, 1]")

    def reached(self, k: int) -> float:
        """Probability of having reached stage k (nu_k)."""
        return self.values[k - 1]

    @property
    def completed(self) -> float:
        """Probability the outcome is observed (nu_{K+1})."""
        return self.values[-1]


def observe(trajectory: Trajectory, design: SmartDesign, t: float) -> ObservedRecord:
    """Mask one complete trajectory down to what day-t analysis can see."""
    if trajectory.enroll_day > t:
        return ObservedRecord(gamma=0, kappa=0, delta=0)
    days = trajectory.stage_days
    kappa = 1 + sum(1 for d in days[:-1] if d <= t)
    delta = 1 if days[-1] <= t else 0
    return ObservedRecord(
        gamma=1,
        kappa=kappa,
        delta=delta,
        enroll_day=trajectory.enroll_day,
        covariates=trajectory.covariates[:kappa],
        actions=trajectory.actions[:kappa],
        action_positions=trajectory.action_positions[:kappa],
        outcome=trajectory.outcome if delta else None,
    )


def observe_cohort(
    cohort: Cohort, design: SmartDesign, t: float, n_planned: int | None = None
) -> Snapshot:
    """Snapshot of a simulated cohort at analysis day t (enrolled rows only)."""
    enrolled = cohort.enroll <= t
    idx = np.nonzero(enrolled)[0]
    days = cohort.stage_days[idx]
    kappa = 1 + np.sum(days[:, :-1] <= t, axis=1).astype(np.int64)
    delta = (days[:, -1] <= t).astype(np.int64)
    blocks = []
    acodes = []
    apos = []
    for k in range(1, design.num_stages + 1):
        vis = kappa >= k
        b = cohort.blocks[k - 1][idx].copy()
        b[~vis] = np.nan
        a = cohort.acodes[k - 1][idx].copy()
        a[~vis] = -1
        p = cohort.apos[k - 1][idx].copy()
        p[~vis] = -1
        blocks.append(b)
        acodes.append(a)
        apos.append(p)
    outcome = cohort.outcome[idx].copy()
    outcome[delta == 0] = np.nan
    return Snapshot(
        t,
        design.num_stages,
        cohort.enroll[idx],
        kappa,
        delta,
        blocks,
        acodes,
        apos,
        outcome,
        n_planned=n_planned if n_planned is not None else cohort.n,
    )


class RegimeView:
    """Per-record regime-specific quantities over a snapshot.

    For every observed stage k: the regime's action for the record's
    history, its randomization probability, the probability of the action
    actually received, and cumulative consistency flags.  These drive both
    the coarsening levels and the estimator weights.
    """

    def __init__(
        self,
        snap: Snapshot,
        design: SmartDesign,
        regime: Regime,
        propensities: dict | None = None,
    ) -> None:
        self.snap = snap
        self.design = design
        self.regime = regime
        n = snap.n
        K = design.num_stages
        self.d_codes = np.full((n, K), -1, dtype=np.int64)
        self.d_pos = np.full((n, K), -1, dtype=np.int64)
        self.d_prob = np.full((n, K), np.nan)
        self.a_prob = np.full((n, K), np.nan)
        self.n_options = np.zeros((n, K), dtype=np.int64)
        self.consistent = np.zeros((n, K), dtype=bool)
        self.cum_consistent = np.zeros((n, K), dtype=bool)

        def cell_prob(key, options):
            if propensities is not None:
                return np.asarray(propensities[key], dtype=float)
            if design.propensities is None:
                return np.full(len(options), 1.0 / len(options))
            return np.asarray(design.propensities[key], dtype=float)

        for k in range(1, K + 1):
            at_stage = snap.observed_at_stage(k)
            rows = np.nonzero(at_stage)[0]
            if rows.size == 0:
                continue
            if k == 1:
                keys = np.zeros(rows.size, dtype=np.int64)
                cell_list = [(1, (), None)]
            else:
                resp = snap.blocks[k - 1][rows, design.response_coords[k]]
                prior = np.stack([snap.acodes[j][rows] for j in range(k - 1)], axis=1)
                cells: dict[tuple, int] = {}
                keys = np.empty(rows.size, dtype=np.int64)
                cell_list = []
                for i in range(rows.size):
                    key = (k, tuple(int(a) for a in prior[i]), int(round(resp[i])))
                    if key not in cells:
                        cells[key] = len(cell_list)
                        cell_list.append(key)
                    keys[i] = cells[key]
            for ci, key in enumerate(cell_list):
                sel = rows[keys == ci]
                options = design.feasible.get(key)
                if options is None:
                    raise DesignError(f"no feasible set declared for cell {key!r}")
                probs = cell_prob(key, options)
                self.n_options[sel, k - 1] = len(options)
                if k == 1:
                    choice = regime.stage1
                else:
                    choice = regime.rules.get((k, key[2]), -1)
                if choice in options:
                    pos = options.index(choice)
                    self.d_codes[sel, k - 1] = choice
                    self.d_pos[sel, k - 1] = pos
                    self.d_prob[sel, k - 1] = probs[pos]
                else:
                    # Off the regime's path (an earlier treatment already
                    # deviates); fall back to the first feasible option so
                    # augmentation models still have a defined continuation.
                    self.d_codes[sel, k - 1] = options[0]
                    self.d_pos[sel, k - 1] = 0
                    self.d_prob[sel, k - 1] = probs[0]
                code_map = {code: probs[j] for j, code in enumerate(options)}
                observed = snap.acodes[k - 1][sel]
                self.a_prob[sel, k - 1] = np.array(
                    [code_map[int(a)] for a in observed]
                )
            self.consistent[at_stage, k - 1] = (
                snap.acodes[k - 1][at_stage] == self.d_codes[at_stage, k - 1]
            )
        cum = np.ones(n, dtype=bool)
        for k in range(K):
            observed = snap.observed_at_stage(k + 1)
            cum = cum & np.where(observed, self.consistent[:, k], False)
            self.cum_consistent[:, k] = cum

    def consistent_through(self, k: int) -> np.ndarray:
        """C_k restricted to records that have reached stage k."""
        if k == 0:
            return np.ones(self.snap.n, dtype=bool)
        return self.cum_consistent[:, k - 1]

    def levels(self) -> np.ndarray:
        """Coarsening level of every record for this regime."""
        snap = self.snap
        K = self.design.num_stages
        out = np.full(snap.n, COMPLETE)
        resolved = np.zeros(snap.n, dtype=bool)
        for k in range(1, K + 1):
            at_stage = snap.observed_at_stage(k)
            inconsistent = at_stage & ~self.consistent[:, k - 1] & ~resolved
            out[inconsistent] = 2 * k - 1
            resolved |= inconsistent
        stalled = ~resolved & (snap.delta == 0)
        out[stalled] = 2 * snap.kappa[stalled]
        return out


def coarsening_level(
    record: ObservedRecord, regime: Regime, design: SmartDesign
) -> float:
    """Coarsening level of one observed record for a regime.

    Returns an odd integer 2k-1 when the stage-k treatment is the first to
    deviate from the regime, an even integer 2k when the record is
    consistent so far but has only reached stage k without further
    progress, and ``math.inf`` for consistent completers.
    """
    if record.gamma == 0:
        raise DesignError("coarsening level is defined for enrolled records only")
    for k in range(1, record.kappa + 1):
        history = History(
            covariates=record.covariates[:k], actions=record.actions[: k - 1]
        )
        # The first deviation is always judged on the regime's own path,
        # where the fallback coincides with the regime's rule.
        if record.actions[k - 1] != regime.action_with_fallback(design, history):
            return float(2 * k - 1)
    return COMPLETE if record.delta else float(2 * record.kappa)


def estimate_nu(snap: Snapshot, method: str = "average") -> ProgressRates:
    """Progress rates from a snapshot.

    "average" uses simple proportions among enrolled patients.  "logistic"
    smooths each reach probability against time-on-study with a logistic
    curve and reports the average fitted probability; it exists as a
    model-based alternative and reduces to nearly the same numbers in the
    designs shipped here.
    """
    if snap.n == 0:
        raise EstimationError("empty snapshot: no enrolled records")
    K = snap.num_stages
    if method == "average":
        vals = [float(np.mean(snap.kappa >= k)) for k in range(1, K + 1)]
        vals.append(float(np.mean(snap.delta == 1)))
        return ProgressRates(tuple(vals))
    if method != "logistic":
        raise ValueError("method must be 'average' or 'logistic'")
    elapsed = snap.t - snap.enroll
    vals = [1.0]
    targets = [(snap.kappa >= k).astype(float) for k in range(2, K + 1)]
    targets.append((snap.delta == 1).astype(float))
    for y in targets:
        if y.min() == y.max():
            vals.append(float(y[0]))
            continue
        vals.append(float(np.mean(_logistic_fit_predict(elapsed, y))))
    return ProgressRates(tuple(vals))


def _logistic_fit_predict(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Tiny IRLS logistic fit of y on (1, x); returns fitted probabilities."""
    X = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    for _ in range(50):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        w = np.clip(p * (1 - p), 1e-8, None)
        z = eta + (y - p) / w
        wx = X * w[:, None]
        new = np.linalg.solve(X.T @ wx, wx.T @ z)
        if np.max(np.abs(new - beta)) < 1e-10:
            beta = new
            break
        beta = new
    return 1.0 / (1.0 + np.exp(-(X @ beta)))


def hazard_and_survivor(
    record: ObservedRecord,
    regime: Regime,
    rates: ProgressRates,
    design: SmartDesign,
) -> tuple[dict[int, float], dict[int, float]]:
    """Discrete hazard and survivor values for one record's at-risk levels.

    Returns dicts keyed by level r (1..2K) giving, for the levels at which
    the record is still at risk, the estimated hazard of coarsening there
    and the probability of remaining uncoarsened past the level.  Levels
    the record never reaches are omitted.
    """
    snap = _single_record_snapshot(record, design)
    view = RegimeView(snap, design, regime)
    lam, surv, at_risk = _hazard_survivor_arrays(view, rates)
    lam_out = {}
    surv_out = {}
    for r in range(1, 2 * design.num_stages + 1):
        if at_risk[0, r - 1]:
            lam_out[r] = float(lam[0, r - 1])
            surv_out[r] = float(surv[0, r - 1])
    return lam_out, surv_out


def _single_record_snapshot(record: ObservedRecord, design: SmartDesign) -> Snapshot:
    K = design.num_stages
    blocks = []
    acodes = []
    apos = []
    for k in range(1, K + 1):
        if k <= record.kappa:
            blocks.append(np.array([record.covariates[k - 1]], dtype=float))
            acodes.append(np.array([record.actions[k - 1]], dtype=np.int64))
            apos.append(np.array([record.action_positions[k - 1]], dtype=np.int64))
        else:
            blocks.append(np.full((1, design.block_sizes[k - 1]), np.nan))
            acodes.append(np.array([-1], dtype=np.int64))
            apos.append(np.array([-1], dtype=np.int64))
    y = np.array([record.outcome if record.delta else np.nan])
    return Snapshot(
        t=record.enroll_day or 0.0,
        num_stages=K,
        enroll=np.array([record.enroll_day or 0.0]),
        kappa=np.array([record.kappa]),
        delta=np.array([record.delta]),
        blocks=blocks,
        acodes=acodes,
        apos=apos,
        outcome=y,
    )


def _hazard_survivor_arrays(
    view: RegimeView, rates: ProgressRates
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized hazards/survivors; shapes (n, 2K).  See module docstring."""
    snap = view.snap
    design = view.design
    n, K = snap.n, design.num_stages
    lam = np.full((n, 2 * K), np.nan)
    surv = np.full((n, 2 * K), np.nan)
    at_risk = np.zeros((n, 2 * K), dtype=bool)
    nu = np.array(list(rates.values))  # nu_1..nu_{K+1}
    prior_prob = np.ones(n)  # prod over v < k of pi_v at the regime's actions
    for k in range(1, K + 1):
        reached = snap.observed_at_stage(k)
        risk_odd = view.consistent_through(k - 1) & reached
        risk_even = view.consistent_through(k) & reached
        r_odd, r_even = 2 * k - 1, 2 * k
        if np.any(risk_odd):
            if nu[k - 1] < 1e-12:
                raise EstimationError(
                    f"degenerate progress rate: nu_{k} is zero but records are "
                    f"at risk at level {r_odd}"
                )
            d_prob = view.d_prob[:, k - 1]
            lam[risk_odd, r_odd - 1] = 1.0 - d_prob[risk_odd]
            surv[risk_odd, r_odd - 1] = (
                nu[k - 1] * d_prob[risk_odd] * prior_prob[risk_odd]
            )
            at_risk[:, r_odd - 1] = risk_odd
        if np.any(risk_even):
            if nu[k - 1] < 1e-12:
                raise EstimationError(
                    f"degenerate progress rate: nu_{k} is zero but records are "
                    f"at risk at level {r_even}"
                )
            lam[risk_even, r_even - 1] = (nu[k - 1] - nu[k]) / nu[k - 1]
            surv[risk_even, r_even - 1] = (
                nu[k] * view.a_prob[risk_even, k - 1] * prior_prob[risk_even]
            )
            at_risk[:, r_even - 1] = risk_even
        checks = surv[at_risk[:, r_odd - 1], r_odd - 1]
        if checks.size and np.any(checks < 1e-12):
            raise EstimationError(f"positivity violation at level {r_odd}")
        checks = surv[at_risk[:, r_even - 1], r_even - 1]
        if checks.size and np.any(checks < 1e-12):
            raise EstimationError(f"positivity violation at level {r_even}")
        upd = reached & view.consistent[:, k - 1]
        prior_prob = np.where(upd, prior_prob * view.d_prob[:, k - 1], prior_prob)
    return lam, surv, at_risk


def estimate_propensities(snap: Snapshot, design: SmartDesign) -> dict:
    """Empirical randomization frequencies per decision cell.

    Returns a dict mapping feasible-table keys to probability tuples in the
    order of the cell's options.  Cells with no observed records keep the
    design (or uniform) probabilities; cells where some option was never
    assigned trigger a warning since downstream weights would blow up.
    """
    out = {}
    K = design.num_stages
    for key, options in design.feasible.items():
        stage = key[0]
        rows = np.nonzero(snap.observed_at_stage(stage))[0]
        if stage == 1:
            sel = rows
        else:
            match = np.ones(rows.size, dtype=bool)
            for j, code in enumerate(key[1]):
                match &= snap.acodes[j][rows] == code
            resp = np.full(rows.size, -1)
            ok = match.copy()
            if np.any(match):
                vals = snap.blocks[stage - 1][rows, design.response_coords[stage]]
                resp[match] = np.round(vals[match]).astype(int)
            sel = rows[ok & (resp == key[2])]
        if sel.size == 0:
            if design.propensities is None:
                out[key] = tuple(1.0 / len(options) for _ in options)
            else:
                out[key] = design.propensities[key]
            continue
        counts = np.array(
            [np.sum(snap.acodes[stage - 1][sel] == code) for code in options],
            dtype=float,
        )
        if np.any(counts == 0):
            warnings.warn(
                f"cell {key!r}: some feasible options were never assigned; "
                "estimated propensities are degenerate",
                stacklevel=2,
            )
        out[key] = tuple(counts / counts.sum())
    return out

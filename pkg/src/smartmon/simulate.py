"""Generative models and trajectory simulation for SMART designs.

A :class:`GenerativeModel` pairs per-stage covariate distributions with a
linear outcome mean over feature terms.  Trajectories can be drawn one at a
time from a caller-supplied random stream (useful for exchangeability
arguments and tests) or as a vectorized cohort from a single replication
stream (the Monte Carlo hot path).

Calendar timing: a patient enrolled on day ``e`` is assigned stage-1
treatment on day ``e``, reaches the stage-k decision after the first k-1
stage gaps, and has the outcome ascertained after all K gaps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import DesignError, History, Regime, SmartDesign
from .features import FeatureData, LinearTerms

__all__ = [
    "VarSpec",
    "EnrollmentProcess",
    "GenerativeModel",
    "Trajectory",
    "Cohort",
    "draw_enrollment",
    "simulate_trajectory",
    "simulate_cohort",
    "true_value",
    "calibrate_effects",
]


@dataclass(frozen=True)
class VarSpec:
    """Distribution of one covariate coordinate.

    Supported kinds:
        "normal":       params mean, sd
        "bernoulli":    params p
        "uniform":      params lo, hi
        "linear_normal": params parent=(stage, index), slope, intercept, sd
                        -- normal noise around a linear function of an
                        earlier coordinate
        "uniform_by_response": params if1=(lo, hi), if0=(lo, hi)
                        -- uniform whose range depends on the same stage's
                        response coordinate (which must be drawn first)
        "response_bernoulli": params p  -- the response coordinate itself
        "response_logistic": params intercept, terms=[[coef, factor], ...]
                        -- response probability expit(intercept + sum of
                        coef * coordinate), over already-drawn coordinates
    """

    kind: str
    params: dict = field(default_factory=dict)

    @property
    def is_response(self) -> bool:
        return self.kind in ("response_bernoulli", "response_logistic")


@dataclass(frozen=True)
class EnrollmentProcess:
    """Staggered-entry law for enrollment days.

    kind "uniform": uniform on [lo, hi].
    kind "periods": pick period j with probability probs[j], then uniform
    within [bounds[j], bounds[j+1]].
    """

    kind: str = "uniform"
    lo: float = 0.0
    hi: float = 1.0
    bounds: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "uniform":
            if not self.hi >= self.lo:
                raise ValueError("uniform enrollment needs hi >= lo")
        elif self.kind == "periods":
            if len(self.bounds) != len(self.probs) + 1:
                raise ValueError("periods enrollment needs len(bounds) == len(probs)+1")
            if any(b2 <= b1 for b1, b2 in zip(self.bounds, self.bounds[1:])):
                raise ValueError("period bounds must be strictly increasing")
            if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-12:
                raise ValueError("period probabilities must be nonnegative and sum to 1")
        else:
            raise ValueError(f"unknown enrollment kind {self.kind!r}")

    @property
    def last_day(self) -> float:
        return self.hi if self.kind == "uniform" else self.bounds[-1]

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size=n)
        periods = rng.choice(len(self.probs), size=n, p=np.asarray(self.probs))
        lo = np.asarray(self.bounds[:-1])[periods]
        hi = np.asarray(self.bounds[1:])[periods]
        return rng.uniform(lo, hi)

    def cdf(self, day: float) -> float:
        """Probability that a patient enrolls on or before ``day``."""
        if self.kind == "uniform":
            if self.hi == self.lo:
                return 1.0 if day >= self.hi else 0.0
            return float(np.clip((day - self.lo) / (self.hi - self.lo), 0.0, 1.0))
        total = 0.0
        for p, lo, hi in zip(self.probs, self.bounds, self.bounds[1:]):
            total += p * float(np.clip((day - lo) / (hi - lo), 0.0, 1.0))
        return float(total)


@dataclass(frozen=True)
class GenerativeModel:
    """Covariate, response, and outcome laws for simulating one SMART.

    Attributes:
        baseline: stage-1 covariate coordinate specs, in draw order.
        interstage: coordinate specs for stages 2..K, in draw order; each
            stage >= 2 must contain exactly one response spec, located at
            the design's response coordinate.
        outcome: linear mean of the final outcome over feature terms.
        outcome_sd: residual standard deviation of the outcome.
    """

    baseline: tuple[VarSpec, ...]
    interstage: tuple[tuple[VarSpec, ...], ...]
    outcome: LinearTerms
    outcome_sd: float
    name: str = ""

    def stage_specs(self, stage: int) -> tuple[VarSpec, ...]:
        return self.baseline if stage == 1 else self.interstage[stage - 2]

    def validate_against(self, design: SmartDesign) -> None:
        if len(self.interstage) != design.num_stages - 1:
            raise DesignError(
                "generative model must define one interstage block per stage >= 2"
            )
        for stage in range(1, design.num_stages + 1):
            specs = self.stage_specs(stage)
            if len(specs) != design.block_sizes[stage - 1]:
                raise DesignError(
                    f"stage-{stage} block has {len(specs)} coordinates but the "
                    f"design declares {design.block_sizes[stage - 1]}"
                )
            resp_positions = [i for i, s in enumerate(specs) if s.is_response]
            if stage == 1:
                if resp_positions:
                    raise DesignError("stage-1 block cannot contain a response")
            else:
                want = design.response_coords[stage]
                if resp_positions != [want]:
                    raise DesignError(
                        f"stage-{stage} block must place its single response spec "
                        f"at coordinate {want}"
                    )
        if self.outcome_sd < 0:
            raise DesignError("outcome_sd must be nonnegative")


@dataclass(frozen=True)
class Trajectory:
    """One patient's complete simulated path."""

    enroll_day: float
    covariates: tuple[tuple[float, ...], ...]
    actions: tuple[int, ...]
    action_positions: tuple[int, ...]
    outcome: float
    stage_days: tuple[float, ...]


class Cohort:
    """Column-oriented container of complete trajectories."""

    def __init__(
        self,
        enroll: np.ndarray,
        blocks: list[np.ndarray],
        acodes: list[np.ndarray],
        apos: list[np.ndarray],
        outcome: np.ndarray,
        stage_days: np.ndarray,
    ) -> None:
        self.enroll = enroll
        self.blocks = blocks
        self.acodes = acodes
        self.apos = apos
        self.outcome = outcome
        self.stage_days = stage_days
        self.n = enroll.shape[0]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            enroll_day=float(self.enroll[i]),
            covariates=tuple(tuple(b[i]) for b in self.blocks),
            actions=tuple(int(a[i]) for a in self.acodes),
            action_positions=tuple(int(a[i]) for a in self.apos),
            outcome=float(self.outcome[i]),
            stage_days=tuple(self.stage_days[i]),
        )

    def feature_data(self) -> FeatureData:
        return FeatureData(self.blocks, self.acodes, self.apos)


def draw_enrollment(
    process: EnrollmentProcess, n: int, rng: np.random.Generator | int
) -> np.ndarray:
    """Draw ``n`` enrollment days."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(rng))
    return process.draw(n, rng)


def _draw_block(
    model: GenerativeModel,
    design: SmartDesign,
    stage: int,
    drawn_blocks: list[np.ndarray],
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw one stage's covariate block for ``n`` patients (columns in order)."""
    specs = model.stage_specs(stage)
    block = np.empty((n, len(specs)))
    for j, spec in enumerate(specs):
        p = spec.params
        if spec.kind == "normal":
            col = rng.normal(p["mean"], p["sd"], size=n)
        elif spec.kind == "bernoulli":
            col = (rng.random(n) < p["p"]).astype(float)
        elif spec.kind == "uniform":
            col = rng.uniform(p["lo"], p["hi"], size=n)
        elif spec.kind == "linear_normal":
            ps, pi = p["parent"]
            parent = block[:, pi] if ps == stage else drawn_blocks[ps - 1][:, pi]
            col = p.get("intercept", 0.0) + p["slope"] * parent
            col = col + rng.normal(0.0, p["sd"], size=n)
        elif spec.kind == "uniform_by_response":
            resp = block[:, design.response_coords[stage]]
            lo = np.where(resp > 0.5, p["if1"][0], p["if0"][0])
            hi = np.where(resp > 0.5, p["if1"][1], p["if0"][1])
            col = rng.uniform(lo, hi)
        elif spec.kind == "response_bernoulli":
            col = (rng.random(n) < p["p"]).astype(float)
        elif spec.kind == "response_logistic":
            index = np.full(n, float(p.get("intercept", 0.0)))
            for coef, ref in p["terms"]:
                rs, ri = ref
                source = block[:, ri] if rs == stage else drawn_blocks[rs - 1][:, ri]
                index += coef * source
            col = (rng.random(n) < 1.0 / (1.0 + np.exp(-index))).astype(float)
        else:
            raise ValueError(f"unknown variable kind {spec.kind!r}")
        block[:, j] = col
    return block


def _assign_stage(
    design: SmartDesign,
    stage: int,
    blocks: list[np.ndarray],
    acodes: list[np.ndarray],
    rng: np.random.Generator,
    forced_regime: Regime | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Randomize (or force) the stage-k treatment for every patient."""
    n = blocks[0].shape[0]
    codes = np.empty(n, dtype=np.int64)
    pos = np.empty(n, dtype=np.int64)
    if stage == 1:
        cells = [np.arange(n)]
        keys = [(1, (), None)]
    else:
        resp = blocks[stage - 1][:, design.response_coords[stage]]
        prior = np.stack([acodes[j] for j in range(stage - 1)], axis=1)
        combos: dict[tuple, list[int]] = {}
        for i in range(n):
            key = (stage, tuple(int(a) for a in prior[i]), int(round(resp[i])))
            combos.setdefault(key, []).append(i)
        keys = sorted(combos.keys())
        cells = [np.asarray(combos[k]) for k in keys]
    for key, idx in zip(keys, cells):
        try:
            options = design.feasible[key]
        except KeyError:
            raise DesignError(f"no feasible set declared for cell {key!r}") from None
        if forced_regime is not None:
            if stage == 1:
                choice = forced_regime.stage1
            else:
                choice = forced_regime.rules[(stage, key[2])]
            if choice not in options:
                raise DesignError(
                    f"regime selects treatment {choice}, infeasible for cell {key!r}"
                )
            pos[idx] = options.index(choice)
            codes[idx] = choice
        else:
            if design.propensities is None:
                probs = np.full(len(options), 1.0 / len(options))
            else:
                probs = np.asarray(design.propensities[key])
            draws = rng.choice(len(options), size=idx.size, p=probs)
            pos[idx] = draws
            codes[idx] = np.asarray(options)[draws]
    return codes, pos


def simulate_cohort(
    model: GenerativeModel,
    design: SmartDesign,
    enroll: np.ndarray,
    rng: np.random.Generator | int,
    forced_regime: Regime | None = None,
) -> Cohort:
    """Simulate complete trajectories for every enrollment day in ``enroll``.

    All patients share one random stream; draws are made variable-by-variable
    across the cohort, so results are reproducible for a fixed stream but do
    not correspond to per-patient substreams (use ``simulate_trajectory`` for
    that).  ``forced_regime`` replaces randomization by the regime's rule --
    used for definitions of true regime values.
    """
    model.validate_against(design)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(rng))
    enroll = np.asarray(enroll, dtype=float)
    n = enroll.shape[0]
    blocks: list[np.ndarray] = []
    acodes: list[np.ndarray] = []
    apos: list[np.ndarray] = []
    for stage in range(1, design.num_stages + 1):
        blocks.append(_draw_block(model, design, stage, blocks, n, rng))
        codes, pos = _assign_stage(design, stage, blocks, acodes, rng, forced_regime)
        acodes.append(codes)
        apos.append(pos)
    data = FeatureData(blocks, acodes, apos)
    mean = data.linear_combination(model.outcome, design)
    outcome = mean if model.outcome_sd == 0 else mean + rng.normal(0.0, model.outcome_sd, n)
    gaps = np.cumsum(np.asarray(design.stage_gap_days, dtype=float))
    stage_days = enroll[:, None] + gaps[None, :]
    return Cohort(enroll, blocks, acodes, apos, outcome, stage_days)


def simulate_trajectory(
    model: GenerativeModel,
    design: SmartDesign,
    enroll_day: float,
    rng: np.random.Generator | int,
    forced_regime: Regime | None = None,
) -> Trajectory:
    """Simulate a single patient from their own random stream."""
    cohort = simulate_cohort(
        model, design, np.array([enroll_day]), rng, forced_regime=forced_regime
    )
    return cohort.trajectory(0)


def true_value(
    model: GenerativeModel,
    design: SmartDesign,
    regime: Regime,
    method: str = "analytic",
    mc_reps: int = 200_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Mean outcome if everyone followed ``regime``; returns (value, se).

    The Monte Carlo method simulates covariates and responses with the
    regime's treatments forced, then averages the outcome *mean* (outcome
    noise integrates to zero and is dropped from the average, which only
    shrinks the reported Monte Carlo standard error).  The analytic method
    evaluates the expectation in closed form (quadrature for logistic
    response laws) and reports a standard error of 0.
    """
    if method == "analytic":
        from . import _analytic

        return _analytic.expected_value(model, design, regime), 0.0
    if method != "mc":
        raise ValueError("method must be 'analytic' or 'mc'")
    rng = np.random.Generator(np.random.Philox(seed))
    enroll = np.zeros(mc_reps)
    cohort = simulate_cohort(model, design, enroll, rng, forced_regime=regime)
    means = cohort.feature_data().linear_combination(model.outcome, design)
    value = float(np.mean(means))
    se = float(np.std(means, ddof=1) / np.sqrt(mc_reps))
    return value, se


def calibrate_effects(
    model: GenerativeModel,
    design: SmartDesign,
    targets: Sequence[float],
    free: Sequence[str],
    regimes: Sequence[Regime] | None = None,
) -> GenerativeModel:
    """Solve for named outcome coefficients so regime values hit targets.

    Regime values are linear in the outcome coefficients, so the free
    coefficients solve a linear system whose matrix holds the expected
    feature terms under each regime.  Raises if the targets are unattainable
    or if they do not pin down every free coefficient.
    """
    from . import _analytic
    from .design import enumerate_embedded_regimes

    if regimes is None:
        regimes = enumerate_embedded_regimes(design)
    targets = np.asarray(targets, dtype=float)
    if targets.shape[0] != len(regimes):
        raise ValueError("need one target value per regime")
    free = list(free)
    names = [t.name for t in model.outcome.terms]
    missing = [f for f in free if f not in names]
    if missing:
        raise ValueError(f"free coefficients not present in outcome model: {missing}")
    base_model = GenerativeModel(
        baseline=model.baseline,
        interstage=model.interstage,
        outcome=model.outcome.with_coefficients({f: 0.0 for f in free}),
        outcome_sd=model.outcome_sd,
        name=model.name,
    )
    base = np.array(
        [_analytic.expected_value(base_model, design, r) for r in regimes]
    )
    coef_matrix = np.zeros((len(regimes), len(free)))
    for j, fname in enumerate(free):
        term = model.outcome.terms[names.index(fname)]
        for i, regime in enumerate(regimes):
            coef_matrix[i, j] = _analytic.expected_term(
                base_model, design, regime, term.with_coef(1.0)
            )
    solution, _, rank, _ = np.linalg.lstsq(coef_matrix, targets - base, rcond=None)
    if rank < len(free):
        raise ValueError(
            "targets do not identify every free coefficient "
            f"(rank {rank} < {len(free)})"
        )
    residual = coef_matrix @ solution - (targets - base)
    if np.max(np.abs(residual)) > 1e-8:
        raise ValueError(
            "targets unattainable with free coefficients "
            f"(residual {np.max(np.abs(residual)):.3g})"
        )
    updates = dict(zip(free, solution))
    return GenerativeModel(
        baseline=model.baseline,
        interstage=model.interstage,
        outcome=model.outcome.with_coefficients(updates),
        outcome_sd=model.outcome_sd,
        name=model.name,
    )

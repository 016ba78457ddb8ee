"""Trial design objects for sequential multiple assignment randomized trials.

A design describes the decision structure of a SMART: how many treatment
stages there are, which treatment options are feasible given a patient's
history, the randomization probabilities over those options, and the
calendar spacing of the stages.  Treatment regimes are plain data (rule
tables), so they can be enumerated, serialized, and compared.

Treatments are coded as small integers; human-readable names live in
``SmartDesign.treatment_names``.  Histories carry per-stage covariate
blocks; the response status used by stage-k decision rules is a designated
binary coordinate of the stage-k covariate block.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

__all__ = [
    "SmartDesign",
    "Regime",
    "History",
    "DesignError",
    "consistency_indicator",
    "regime_action",
    "enumerate_embedded_regimes",
]

# Key into the feasibility/propensity tables: (stage, prior treatments,
# response status).  Stage-1 keys use an empty prior tuple and response None.
FeasibleKey = tuple[int, tuple[int, ...], "int | None"]


class DesignError(ValueError):
    """Raised when a design, regime, or history is internally inconsistent."""


@dataclass(frozen=True)
class History:
    """Patient data available when a stage-k treatment decision is made.

    Attributes:
        covariates: blocks ``(X_1, ..., X_k)``; block ``j`` holds the
            covariates observed before the stage-j treatment assignment.
        actions: treatments ``(A_1, ..., A_{k-1})`` already assigned.
    """

    covariates: tuple[tuple[float, ...], ...]
    actions: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.covariates) != len(self.actions) + 1:
            raise DesignError(
                "history must hold one more covariate block than actions "
                f"(got {len(self.covariates)} blocks, {len(self.actions)} actions)"
            )

    @property
    def stage(self) -> int:
        """Decision stage this history corresponds to (1-based)."""
        return len(self.covariates)


@dataclass(frozen=True)
class SmartDesign:
    """Structure of a SMART: stages, feasible sets, propensities, timing.

    Attributes:
        num_stages: number of treatment decisions K.
        treatment_names: name table; the treatment code is the index.
        stage_treatments: treatment codes that can appear at each stage.
        feasible: ordered feasible options per (stage, prior treatments,
            response status) cell.  Order matters: it fixes the within-cell
            action coding used by outcome models and regime enumeration.
        response_coords: for stages >= 2, the index of the binary response
            coordinate inside that stage's covariate block.
        block_sizes: length of each stage's covariate block.
        stage_gap_days: days from each stage's assignment to the next
            milestone; the last entry is the gap to outcome ascertainment.
        propensities: randomization probabilities aligned with ``feasible``;
            ``None`` means equal randomization within every cell.
        name: optional label used in reports.
    """

    num_stages: int
    treatment_names: tuple[str, ...]
    stage_treatments: tuple[tuple[int, ...], ...]
    feasible: Mapping[FeasibleKey, tuple[int, ...]]
    response_coords: Mapping[int, int]
    block_sizes: tuple[int, ...]
    stage_gap_days: tuple[float, ...]
    propensities: Mapping[FeasibleKey, tuple[float, ...]] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        k = self.num_stages
        if k < 1:
            raise DesignError("num_stages must be at least 1")
        if len(self.stage_treatments) != k:
            raise DesignError("stage_treatments must list one entry per stage")
        if len(self.block_sizes) != k:
            raise DesignError("block_sizes must list one entry per stage")
        if len(self.stage_gap_days) != k:
            raise DesignError("stage_gap_days must list one entry per stage")
        if any(g <= 0 for g in self.stage_gap_days):
            raise DesignError("stage_gap_days entries must be positive")
        ncodes = len(self.treatment_names)
        for (stage, prior, _resp), options in self.feasible.items():
            if not 1 <= stage <= k:
                raise DesignError(f"feasible key references stage {stage}")
            if len(prior) != stage - 1:
                raise DesignError(
                    f"feasible key for stage {stage} must carry {stage - 1} prior treatments"
                )
            if not options:
                raise DesignError(
                    f"empty feasible set for stage {stage}, prior {prior!r}"
                )
            if any(not 0 <= a < ncodes for a in options):
                raise DesignError("feasible option refers to an unknown treatment code")
        for stage in range(2, k + 1):
            if stage not in self.response_coords:
                raise DesignError(f"missing response coordinate for stage {stage}")
            idx = self.response_coords[stage]
            if not 0 <= idx < self.block_sizes[stage - 1]:
                raise DesignError(
                    f"response coordinate {idx} out of range for stage {stage}"
                )
        if self.propensities is not None:
            for key, options in self.feasible.items():
                probs = self.propensities.get(key)
                if probs is None:
                    raise DesignError(f"missing propensities for cell {key!r}")
                if len(probs) != len(options):
                    raise DesignError(f"propensity row for {key!r} has wrong length")
                if any(p <= 0.0 for p in probs):
                    raise DesignError(
                        f"propensity row for {key!r} must be positive on every "
                        "feasible option"
                    )
                if abs(sum(probs) - 1.0) > 1e-12:
                    raise DesignError(f"propensity row for {key!r} does not sum to 1")

    # -- feasibility ------------------------------------------------------

    def cell_key(self, history: History) -> FeasibleKey:
        """Table key for the decision cell the history belongs to."""
        stage = history.stage
        resp = None if stage == 1 else self.response_of(stage, history.covariates[-1])
        return (stage, tuple(history.actions), resp)

    def response_of(self, stage: int, block: Sequence[float]) -> int:
        """Read the binary response status out of a stage-k covariate block."""
        value = block[self.response_coords[stage]]
        status = int(round(value))
        if status not in (0, 1):
            raise DesignError(
                f"response coordinate for stage {stage} must be 0/1, got {value!r}"
            )
        return status

    def options(self, history: History) -> tuple[int, ...]:
        """Ordered feasible treatment options for this history."""
        key = self.cell_key(history)
        try:
            return self.feasible[key]
        except KeyError:
            raise DesignError(f"no feasible set declared for cell {key!r}") from None

    def propensity_row(self, history: History) -> tuple[float, ...]:
        """Randomization probabilities aligned with ``options(history)``."""
        options = self.options(history)
        if self.propensities is None:
            return tuple(1.0 / len(options) for _ in options)
        return self.propensities[self.cell_key(history)]

    def propensity(self, history: History, action: int) -> float:
        """Probability that ``action`` is assigned given the history."""
        options = self.options(history)
        if action not in options:
            raise DesignError(
                f"treatment {action} is not feasible for cell {self.cell_key(history)!r}"
            )
        return self.propensity_row(history)[options.index(action)]

    def action_position(self, history: History, action: int) -> int:
        """Position of ``action`` in the ordered feasible set (model coding)."""
        options = self.options(history)
        if action not in options:
            raise DesignError(
                f"treatment {action} is not feasible for cell {self.cell_key(history)!r}"
            )
        return options.index(action)

    # -- timing -----------------------------------------------------------

    def stage_end_days(self, enroll_day: float) -> tuple[float, ...]:
        """Calendar day each stage concludes, given the enrollment day.

        Stage k concludes when the next milestone arrives: for k < K the
        stage-(k+1) assignment, for k = K the outcome ascertainment.
        """
        days = []
        day = enroll_day
        for gap in self.stage_gap_days:
            day += gap
            days.append(day)
        return tuple(days)

    @property
    def total_followup_days(self) -> float:
        """Days from enrollment to outcome ascertainment."""
        return float(sum(self.stage_gap_days))


@dataclass(frozen=True)
class Regime:
    """A treatment regime as a rule table.

    ``stage1`` is the fixed first treatment.  For later stages the action
    is looked up by (stage, response status).  This covers the embedded
    regimes of a SMART, where the only within-stage tailoring variable is
    the response status.
    """

    stage1: int
    rules: Mapping[tuple[int, int], int] = field(default_factory=dict)
    label: str = ""

    def action(self, design: SmartDesign, history: History) -> int:
        """Treatment the regime assigns for this history (must be feasible)."""
        stage = history.stage
        if stage == 1:
            choice = self.stage1
        else:
            resp = design.response_of(stage, history.covariates[-1])
            try:
                choice = self.rules[(stage, resp)]
            except KeyError:
                raise DesignError(
                    f"regime {self.label or self.stage1} has no rule for stage "
                    f"{stage}, response {resp}"
                ) from None
        options = design.options(history)
        if choice not in options:
            raise DesignError(
                f"regime rule selects treatment {choice}, which is infeasible for "
                f"cell {design.cell_key(history)!r}"
            )
        return choice

    def action_with_fallback(self, design: SmartDesign, history: History) -> int:
        """Like ``action`` but degrades gracefully off the regime's own path.

        Augmentation models evaluate regime-consistent continuations on
        records whose earlier treatments already deviate from the regime.
        There the rule's preferred option may be infeasible; we then fall
        back to the first option of the actual feasible set.  Along
        regime-consistent histories this never differs from ``action``.
        """
        stage = history.stage
        if stage == 1:
            choice = self.stage1
        else:
            resp = design.response_of(stage, history.covariates[-1])
            choice = self.rules.get((stage, resp), -1)
        options = design.options(history)
        if choice in options:
            return choice
        return options[0]


def consistency_indicator(trajectory, regime: Regime, k: int, design: SmartDesign) -> int:
    """1 if the first ``k`` assigned treatments match the regime, else 0.

    ``trajectory`` is anything with ``covariates`` (list of per-stage blocks)
    and ``actions`` (list of assigned treatment codes).  ``k = 0`` returns 1
    by convention.
    """
    if k == 0:
        return 1
    actions = tuple(trajectory.actions)
    if k > len(actions):
        raise DesignError(
            f"insufficient history: consistency through stage {k} requested but "
            f"only {len(actions)} treatments assigned"
        )
    blocks = tuple(tuple(b) for b in trajectory.covariates)
    for j in range(1, k + 1):
        history = History(covariates=blocks[:j], actions=actions[: j - 1])
        if actions[j - 1] != regime.action(design, history):
            return 0
    return 1


def regime_action(regime: Regime, design: SmartDesign, history: History) -> int:
    """Treatment assigned by the regime for this history."""
    return regime.action(design, history)


def _stage2_cells(design: SmartDesign, stage1: int) -> list[tuple[int, tuple[int, ...]]]:
    """Reachable (response, options) cells at stage 2 after ``stage1``."""
    cells = []
    for (stage, prior, resp), options in design.feasible.items():
        if stage == 2 and prior == (stage1,):
            cells.append((resp, options))
    cells.sort(key=lambda c: c[0])
    return cells


def enumerate_embedded_regimes(design: SmartDesign) -> tuple[Regime, ...]:
    """All regimes embedded in the design, in deterministic order.

    Stage-1 options vary slowest; within a stage-1 arm, the rule for the
    lowest response status varies next, and higher response statuses vary
    fastest.  For the canonical two-stage design with responder and
    non-responder cells this yields the usual listing
    (a, non-responder rule, responder rule).
    """
    if design.num_stages == 1:
        options = design.feasible[(1, (), None)]
        return tuple(
            Regime(stage1=a, label=design.treatment_names[a]) for a in options
        )
    if design.num_stages != 2:
        raise DesignError(
            "embedded-regime enumeration keyed by response status is only "
            "implemented for one- and two-stage designs"
        )
    regimes = []
    for a in design.feasible[(1, (), None)]:
        cells = _stage2_cells(design, a)
        if not cells:
            raise DesignError(
                f"no stage-2 cells reachable after treatment {a}; cannot enumerate"
            )
        responses = [resp for resp, _ in cells]
        for combo in itertools.product(*[options for _, options in cells]):
            rules = {(2, resp): act for resp, act in zip(responses, combo)}
            label = design.treatment_names[a]
            # Describe the rule in the non-responder-first order used in
            # design documents: "a; if non-response b; if response c".
            for resp, act in sorted(rules.items()):
                label += f"/{design.treatment_names[act]}"
            regimes.append(Regime(stage1=a, rules=rules, label=label))
    return tuple(regimes)

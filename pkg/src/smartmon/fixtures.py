"""Ready-made designs, generative models, and working-model features.

Three self-contained setups are provided:

* ``pain_*``: a two-stage trial of a pain self-management program.  Stage 1
  randomizes between a full and a brief version; non-responders to the full
  version are re-randomized to an intensified version or maintenance,
  non-responders to the brief version to the full version or maintenance,
  and responders to maintenance or no further contact.  Eight embedded
  regimes.  Outcome scenarios: "null" (all regime values equal),
  "stage1" (every regime starting with the full version is better), and
  "graded" (one best regime with intermediate neighbours).

* ``registry_*``: a synthetic two-stage design in which responders have a
  single mandated follow-up option, so stage-2 randomization happens only
  for non-responders.  Its outcome model carries one named coefficient per
  feature so calibration of a single interaction can be exercised.

* ``bp_*``: a two-stage blood-pressure management trial used for the
  worked case study: five baseline covariates, a response-dependent
  interstage measurement, unequal stage gaps, and a known reference value
  for the comparison arm.

All randomizations are 50/50 (the designs pass ``propensities=None``), so
the fixtures also exercise the equal-randomization default.
"""

from __future__ import annotations

from functools import lru_cache

from .design import SmartDesign
from .features import LinearTerms
from .simulate import EnrollmentProcess, GenerativeModel, VarSpec, calibrate_effects

__all__ = [
    "pain_design",
    "pain_model",
    "pain_targets",
    "pain_q_terms",
    "registry_design",
    "registry_model",
    "registry_q_terms",
    "bp_design",
    "bp_model",
    "bp_q_terms",
    "uniform_enrollment",
    "staged_enrollment",
]


# ---------------------------------------------------------------------------
# pain self-management program trial
# ---------------------------------------------------------------------------

PAIN_TREATMENTS = ("full", "brief", "intensified", "maintenance", "none")


def pain_design(stage_gap_days: tuple[float, float] = (100.0, 100.0)) -> SmartDesign:
    return SmartDesign(
        num_stages=2,
        treatment_names=PAIN_TREATMENTS,
        stage_treatments=((0, 1), (0, 2, 3, 4)),
        feasible={
            (1, (), None): (0, 1),
            (2, (0,), 1): (3, 4),
            (2, (0,), 0): (2, 3),
            (2, (1,), 1): (3, 4),
            (2, (1,), 0): (0, 3),
        },
        response_coords={2: 1},
        block_sizes=(2, 2),
        stage_gap_days=stage_gap_days,
        name="pain-program",
    )


# Nuisance effect sizes for the chronic-pain program fixture.  These set how
# much outcome variation the covariates explain, which drives the efficiency
# split between the weighting-only and augmented estimators and the
# between-regime correlation of the value estimates.
_PAIN_X11_COEF = 0.545
_PAIN_X12_COEF = 3.0
_PAIN_X21_COEF = 0.35


def _pain_template() -> GenerativeModel:
    baseline = (
        VarSpec("normal", {"mean": 47.5, "sd": 8.0}),
        VarSpec("bernoulli", {"p": 0.5}),
    )
    interstage = (
        (
            VarSpec(
                "linear_normal",
                {"parent": (1, 0), "slope": 1.25, "intercept": 0.0, "sd": 3.0},
            ),
            VarSpec(
                "response_logistic",
                {
                    "intercept": 0.0,
                    "terms": [[0.01, (1, 0)], [0.02, (1, 1)], [-0.008, (2, 0)]],
                },
            ),
        ),
    )
    terms: list[dict] = []
    for a in (0, 1):
        arm = f"I(A1={a})"
        terms.extend(
            [
                {"factors": [arm], "coef": 0.0, "name": f"base{a}"},
                {"factors": [arm, "X1[0]"], "coef": _PAIN_X11_COEF},
                {"factors": [arm, "X1[1]"], "coef": _PAIN_X12_COEF},
                {"factors": [arm, "R2", "X2[0]"], "coef": _PAIN_X21_COEF},
                {"factors": [arm, "1-R2", "X2[0]"], "coef": _PAIN_X21_COEF},
                {"factors": [arm, "R2", "A2"], "coef": 0.0, "name": f"resp{a}"},
                {"factors": [arm, "1-R2", "A2"], "coef": 0.0, "name": f"nonresp{a}"},
            ]
        )
    return GenerativeModel(
        baseline=baseline,
        interstage=interstage,
        outcome=LinearTerms.parse(terms),
        outcome_sd=11.15,
        name="pain-template",
    )


def pain_targets(scenario: str) -> tuple[float, ...]:
    """Embedded-regime values for each outcome scenario (enumeration order)."""
    if scenario == "null":
        return (47.5,) * 8
    if scenario == "stage1":
        return (49.5, 49.5, 49.5, 49.5, 47.5, 47.5, 47.5, 47.5)
    if scenario == "graded":
        return (50.5, 49.0, 49.0, 47.5, 47.5, 47.5, 47.5, 47.5)
    raise ValueError(f"unknown scenario {scenario!r}")


@lru_cache(maxsize=None)
def pain_model(scenario: str = "null") -> GenerativeModel:
    """Generative model whose regime values hit the scenario's targets."""
    template = _pain_template()
    free = [f"{nm}{a}" for a in (0, 1) for nm in ("base", "resp", "nonresp")]
    model = calibrate_effects(
        template, pain_design(), pain_targets(scenario), free=free
    )
    return GenerativeModel(
        baseline=model.baseline,
        interstage=model.interstage,
        outcome=model.outcome,
        outcome_sd=model.outcome_sd,
        name=f"pain-{scenario}",
    )


def pain_q_terms(misspecified: bool = False) -> tuple[LinearTerms, LinearTerms]:
    """Stage working models for the pain trial (correct span by default).

    The misspecified variant drops the baseline severity score from both
    stages, leaving real signal in the residuals.
    """
    q2: list[list[str]] = []
    q1: list[list[str]] = []
    for a in (0, 1):
        arm = f"I(A1={a})"
        arm_q2 = [
            [arm],
            [arm, "X1[0]"],
            [arm, "X1[1]"],
            [arm, "R2", "X2[0]"],
            [arm, "1-R2", "X2[0]"],
            [arm, "R2", "A2"],
            [arm, "1-R2", "A2"],
        ]
        arm_q1 = [[arm], [arm, "X1[0]"], [arm, "X1[1]"]]
        if misspecified:
            arm_q2 = [f for f in arm_q2 if "X1[0]" not in f]
            arm_q1 = [f for f in arm_q1 if "X1[0]" not in f]
        q2.extend(arm_q2)
        q1.extend(arm_q1)
    return LinearTerms.parse(q1), LinearTerms.parse(q2)


# ---------------------------------------------------------------------------
# registry design (responders have a single mandated option)
# ---------------------------------------------------------------------------

REGISTRY_TREATMENTS = ("t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7")


def registry_design(
    stage_gap_days: tuple[float, float] = (100.0, 100.0)
) -> SmartDesign:
    return SmartDesign(
        num_stages=2,
        treatment_names=REGISTRY_TREATMENTS,
        stage_treatments=((0, 1), (2, 3, 4, 5, 6, 7)),
        feasible={
            (1, (), None): (0, 1),
            (2, (0,), 1): (4,),
            (2, (0,), 0): (2, 3),
            (2, (1,), 1): (7,),
            (2, (1,), 0): (5, 6),
        },
        response_coords={2: 1},
        block_sizes=(2, 2),
        stage_gap_days=stage_gap_days,
        name="registry",
    )


_REGISTRY_COEFS = {
    "b0": 10.0,
    "b1": 0.5,
    "b2": 12.5,
    "b3": 0.0,
    "b4": 0.0,
    "b5": 0.0,
    "b6": 12.5,
    "b7": 12.5,
    "b8": 0.0,
    "b9": 0.0,
    "b10": 0.0,
    "b11": 0.0,
    "b12": 0.0,
}

_REGISTRY_FACTORS = {
    "b0": ["1"],
    "b1": ["X1[0]"],
    "b2": ["X1[1]"],
    "b3": ["A1"],
    "b4": ["A1", "X1[0]"],
    "b5": ["A1", "X1[1]"],
    "b6": ["R2", "X2[0]"],
    "b7": ["1-R2", "X2[0]"],
    "b8": ["1-R2", "A2"],
    "b9": ["1-R2", "A2", "A1"],
    "b10": ["1-R2", "A2", "X1[0]"],
    "b11": ["1-R2", "A2", "X1[1]"],
    "b12": ["1-R2", "A2", "X2[0]"],
}


def registry_model(scenario: str = "null") -> GenerativeModel:
    """Registry generative model.

    Scenarios: "null" (all four regime values 47.5); "interaction"
    (the stage-1/stage-2 interaction lifts the last regime to 50.5);
    "stage1" (a main effect favors the first arm: 50.0 vs 47.5).
    """
    coefs = dict(_REGISTRY_COEFS)
    if scenario == "interaction":
        coefs["b9"] = 5.0
    elif scenario == "stage1":
        coefs["b0"] = 12.5
        coefs["b3"] = -2.5
    elif scenario != "null":
        raise ValueError(f"unknown scenario {scenario!r}")
    terms = [
        {"factors": _REGISTRY_FACTORS[k], "coef": v, "name": k}
        for k, v in coefs.items()
    ]
    return GenerativeModel(
        baseline=(
            VarSpec("uniform", {"lo": 25.0, "hi": 75.0}),
            VarSpec("bernoulli", {"p": 0.5}),
        ),
        interstage=(
            (
                VarSpec("uniform", {"lo": 0.0, "hi": 1.0}),
                VarSpec("response_bernoulli", {"p": 0.4}),
            ),
        ),
        outcome=LinearTerms.parse(terms),
        outcome_sd=10.0,
        name=f"registry-{scenario}",
    )


def registry_q_terms(misspecified: bool = False) -> tuple[LinearTerms, LinearTerms]:
    """Stage working models spanning the registry outcome mean.

    The misspecified variant omits every feature involving the continuous
    baseline score X1[0].
    """
    q2 = [_REGISTRY_FACTORS[k] for k in _REGISTRY_FACTORS]
    q1 = [["1"], ["X1[0]"], ["X1[1]"], ["A1"], ["A1", "X1[0]"], ["A1", "X1[1]"]]
    if misspecified:
        q2 = [f for f in q2 if "X1[0]" not in f]
        q1 = [f for f in q1 if "X1[0]" not in f]
    return LinearTerms.parse(q1), LinearTerms.parse(q2)


# ---------------------------------------------------------------------------
# blood-pressure management case study
# ---------------------------------------------------------------------------

BP_TREATMENTS = ("standard", "intensive", "augmented", "maintenance", "none")


def bp_design(stage_gap_days: tuple[float, float] = (56.0, 126.0)) -> SmartDesign:
    """Two-stage design with the pain-trial topology but five baseline
    covariates, a three-coordinate interstage block (response first), and
    unequal stage gaps."""
    return SmartDesign(
        num_stages=2,
        treatment_names=BP_TREATMENTS,
        stage_treatments=((0, 1), (0, 2, 3, 4)),
        feasible={
            (1, (), None): (0, 1),
            (2, (0,), 1): (3, 4),
            (2, (0,), 0): (2, 3),
            (2, (1,), 1): (3, 4),
            (2, (1,), 0): (0, 3),
        },
        response_coords={2: 0},
        block_sizes=(5, 3),
        stage_gap_days=stage_gap_days,
        name="bp-management",
    )


def bp_model() -> GenerativeModel:
    baseline = (
        VarSpec("normal", {"mean": 152.0, "sd": 5.0}),
        VarSpec("normal", {"mean": 55.0, "sd": 10.0}),
        VarSpec("bernoulli", {"p": 0.6}),
        VarSpec("bernoulli", {"p": 0.4}),
        VarSpec("bernoulli", {"p": 0.6}),
    )
    interstage = (
        (
            VarSpec("response_bernoulli", {"p": 0.5}),
            VarSpec(
                "uniform_by_response",
                {"if1": (30.0, 40.0), "if0": (0.0, 20.0)},
            ),
            VarSpec("uniform", {"lo": 0.5, "hi": 1.0}),
        ),
    )
    betas = [1.0, 0.0, 0.2, 0.0, 10.0, -10.0, 1.0, 0.0, -10.0, -5.0, -2.0, 10.0, -2.0]
    factors = [
        ["1"],
        ["X1[0]"],
        ["X1[1]"],
        ["X1[2]"],
        ["X1[3]"],
        ["X1[4]"],
        ["X2[1]"],
        ["X2[2]"],
        ["A1"],
        ["A2"],
        ["A1", "A2"],
        ["R2"],
        ["A1", "R2"],
    ]
    terms = [
        {"factors": f, "coef": b, "name": f"b{j}"}
        for j, (f, b) in enumerate(zip(factors, betas))
    ]
    return GenerativeModel(
        baseline=baseline,
        interstage=interstage,
        outcome=LinearTerms.parse(terms),
        outcome_sd=30.0,
        name="bp-case",
    )


BP_CONTROL_VALUE = 22.5


def bp_q_terms() -> tuple[LinearTerms, LinearTerms]:
    q2 = [
        ["1"],
        ["X1[0]"],
        ["X1[1]"],
        ["X1[2]"],
        ["X1[3]"],
        ["X1[4]"],
        ["X2[1]"],
        ["X2[2]"],
        ["A1"],
        ["A2"],
        ["A1", "A2"],
        ["R2"],
        ["A1", "R2"],
    ]
    q1 = [
        ["1"],
        ["X1[0]"],
        ["X1[1]"],
        ["X1[2]"],
        ["X1[3]"],
        ["X1[4]"],
        ["A1"],
    ]
    return LinearTerms.parse(q1), LinearTerms.parse(q2)


# ---------------------------------------------------------------------------
# enrollment presets
# ---------------------------------------------------------------------------


def uniform_enrollment(last_day: float = 1000.0) -> EnrollmentProcess:
    return EnrollmentProcess(kind="uniform", lo=0.0, hi=last_day)


def staged_enrollment(
    p_completed: float,
    p_stage1_only: float,
    p_enrolled_only: float,
    *,
    analysis_day: float,
    stage_gap_days: tuple[float, float],
    last_day: float = 1000.0,
) -> EnrollmentProcess:
    """Enrollment law with prescribed interim composition.

    Percentages (0-100) fix the expected fractions of patients who, at the
    analysis day, have completed follow-up, concluded only stage 1, or
    enrolled without concluding stage 1; the remainder enroll afterwards.
    """
    g1, g2 = stage_gap_days
    cut_complete = analysis_day - g1 - g2
    cut_stage1 = analysis_day - g1
    if not 0 < cut_complete < cut_stage1 < analysis_day < last_day:
        raise ValueError("analysis day incompatible with stage gaps")
    probs = (
        p_completed / 100.0,
        p_stage1_only / 100.0,
        p_enrolled_only / 100.0,
        1.0 - (p_completed + p_stage1_only + p_enrolled_only) / 100.0,
    )
    if probs[-1] < -1e-12:
        raise ValueError("percentages exceed 100")
    return EnrollmentProcess(
        kind="periods",
        bounds=(0.0, cut_complete, cut_stage1, analysis_day, last_day),
        probs=probs,
    )

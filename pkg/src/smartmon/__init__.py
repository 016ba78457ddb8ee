"""Sequential monitoring of SMARTs with partially observed trajectories.

The package covers the full workflow: describing a sequential
multiple-assignment randomized trial, simulating staggered-entry cohorts,
estimating embedded-regime values from interim snapshots, building joint
monitoring statistics with efficacy boundaries, and planning sample size.
"""

from .design import (
    DesignError,
    History,
    Regime,
    SmartDesign,
    consistency_indicator,
    enumerate_embedded_regimes,
    regime_action,
)
from .estimation import (
    ControlSpec,
    ValueEstimate,
    aipwe,
    iaipwe,
    ipwe,
    point_values,
    stacked_estimate,
)
from .features import LinearTerms, Term
from .harness import (
    ExperimentConfig,
    MonteCarloReport,
    mse_ratio_table,
    run_experiment,
)
from .io import (
    PlanSpec,
    RunManifest,
    SchemaError,
    load_document,
    read_snapshot_csv,
    save_document,
    write_snapshot_csv,
)
from .planning import (
    AlternativeSpec,
    PowerResult,
    SampleSizeResult,
    pilot_alternative,
    power,
    sample_size_search,
)
from .sequential import (
    BoundarySpec,
    Decision,
    NullCovariance,
    build_null_covariance,
    chi_square_statistic,
    contrast_correlation,
    decide,
    mvn_rectangle,
    null_covariance_from_samples,
    solve_boundaries,
    z_statistics,
)
from .simulate import (
    EnrollmentProcess,
    GenerativeModel,
    VarSpec,
    calibrate_effects,
    simulate_cohort,
    simulate_trajectory,
    true_value,
)
from .snapshot import (
    EstimationError,
    ObservedRecord,
    ProgressRates,
    Snapshot,
    coarsening_level,
    estimate_nu,
    estimate_propensities,
    hazard_and_survivor,
    observe,
    observe_cohort,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "DesignError",
    "History",
    "Regime",
    "SmartDesign",
    "consistency_indicator",
    "enumerate_embedded_regimes",
    "regime_action",
    "ControlSpec",
    "ValueEstimate",
    "aipwe",
    "iaipwe",
    "ipwe",
    "point_values",
    "stacked_estimate",
    "LinearTerms",
    "Term",
    "EnrollmentProcess",
    "GenerativeModel",
    "VarSpec",
    "calibrate_effects",
    "simulate_cohort",
    "simulate_trajectory",
    "true_value",
    "EstimationError",
    "ObservedRecord",
    "ProgressRates",
    "Snapshot",
    "coarsening_level",
    "estimate_nu",
    "estimate_propensities",
    "hazard_and_survivor",
    "observe",
    "observe_cohort",
    "BoundarySpec",
    "Decision",
    "NullCovariance",
    "build_null_covariance",
    "chi_square_statistic",
    "contrast_correlation",
    "decide",
    "mvn_rectangle",
    "null_covariance_from_samples",
    "solve_boundaries",
    "z_statistics",
    "AlternativeSpec",
    "PowerResult",
    "SampleSizeResult",
    "pilot_alternative",
    "power",
    "sample_size_search",
    "ExperimentConfig",
    "MonteCarloReport",
    "run_experiment",
    "mse_ratio_table",
    "PlanSpec",
    "RunManifest",
    "SchemaError",
    "load_document",
    "save_document",
    "read_snapshot_csv",
    "write_snapshot_csv",
]

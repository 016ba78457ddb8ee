import numpy as np
import pytest

from smartmon import enumerate_embedded_regimes, simulate_cohort, observe_cohort
from smartmon.fixtures import (
    pain_design,
    pain_model,
    pain_q_terms,
    uniform_enrollment,
)


@pytest.fixture(scope="session")
def pain():
    """Two-stage eight-regime benchmark design with its null model."""
    design = pain_design()
    return {
        "design": design,
        "model": pain_model("null"),
        "regimes": enumerate_embedded_regimes(design),
        "q_terms": pain_q_terms(),
    }


@pytest.fixture(scope="session")
def pain_snapshot(pain):
    """One simulated interim snapshot: 250 enrolled of a 400-patient cohort."""
    rng = np.random.default_rng(11)
    enroll = uniform_enrollment().draw(400, rng)
    cohort = simulate_cohort(pain["model"], pain["design"], enroll, rng)
    return observe_cohort(cohort, pain["design"], 650.0, n_planned=400)


def snapshot_at(pain, day, n=400, seed=11, scenario=None):
    rng = np.random.default_rng(seed)
    model = pain["model"] if scenario is None else pain_model(scenario)
    enroll = uniform_enrollment().draw(n, rng)
    cohort = simulate_cohort(model, pain["design"], enroll, rng)
    return observe_cohort(cohort, pain["design"], day, n_planned=n)

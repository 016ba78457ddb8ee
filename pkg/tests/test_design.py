"""Design structure: feasible sets, regime enumeration, consistency."""

import numpy as np
import pytest

from smartmon import (
    DesignError,
    History,
    Regime,
    SmartDesign,
    consistency_indicator,
    enumerate_embedded_regimes,
    regime_action,
)
from smartmon.fixtures import bp_design, pain_design, registry_design


def test_pain_design_shape():
    d = pain_design()
    assert d.num_stages == 2
    assert len(d.feasible) == 5
    assert d.feasible[(1, (), None)] == (0, 1)
    assert d.feasible[(2, (1,), 0)] == (0, 3)


def test_enumeration_count_and_uniqueness():
    for design, expect in ((pain_design(), 8), (registry_design(), 4), (bp_design(), 8)):
        regimes = enumerate_embedded_regimes(design)
        assert len(regimes) == expect
        labels = [r.label for r in regimes]
        assert len(set(labels)) == expect


def test_enumeration_order():
    """Stage-1 choice varies slowest, the responder rule fastest."""
    regimes = enumerate_embedded_regimes(pain_design())
    assert [r.stage1 for r in regimes] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert [r.rules[(2, 0)] for r in regimes] == [2, 2, 3, 3, 0, 0, 3, 3]
    assert [r.rules[(2, 1)] for r in regimes] == [3, 4, 3, 4, 3, 4, 3, 4]
    assert regimes[0].label == "full/intensified/maintenance"
    assert regimes[-1].label == "brief/maintenance/none"


def test_regime_action_follows_response():
    design = pain_design()
    reg = enumerate_embedded_regimes(design)[0]  # full / intensified / maintenance
    h1 = History(covariates=[[0.3, 0.0]], actions=[])
    assert reg.action(design, h1) == 0
    h2_resp = History(covariates=[[0.3, 0.0], [0.1, 1.0]], actions=[0])
    h2_nonresp = History(covariates=[[0.3, 0.0], [0.1, 0.0]], actions=[0])
    assert reg.action(design, h2_resp) == 3
    assert reg.action(design, h2_nonresp) == 2
    assert regime_action(reg, design, h2_resp) == 3


def test_regime_action_infeasible_raises():
    design = pain_design()
    bad = Regime(stage1=0, rules={(2, 0): 4, (2, 1): 3}, label="bad")
    h = History(covariates=[[0.0, 0.0], [0.0, 0.0]], actions=[0])
    with pytest.raises(DesignError):
        bad.action(design, h)


def test_action_off_regime_path_uses_fallback():
    """Histories that already deviated have no rule; the fallback answers."""
    design = pain_design()
    reg = enumerate_embedded_regimes(design)[0]  # stage 1: treatment 0
    h = History(covariates=[[0.0, 0.0], [0.0, 0.0]], actions=[1])
    with pytest.raises(DesignError):
        reg.action(design, h)
    assert reg.action_with_fallback(design, h) in design.options(h)


def test_propensity_defaults_equal_randomization():
    design = pain_design()
    h1 = History(covariates=[[0.0, 0.0]], actions=[])
    assert design.propensity(h1, 0) == pytest.approx(0.5)
    assert design.propensity_row(h1) == pytest.approx((0.5, 0.5))
    h2 = History(covariates=[[0.0, 0.0], [0.0, 1.0]], actions=[0])
    assert design.options(h2) == (3, 4)
    assert design.action_position(h2, 4) == 1


def test_registry_responders_have_single_option():
    design = registry_design()
    assert design.feasible[(2, (0,), 1)] == (4,)
    assert design.feasible[(2, (1,), 1)] == (7,)
    h = History(covariates=[[0.0, 0.0], [0.0, 1.0]], actions=[0])
    assert design.propensity(h, 4) == pytest.approx(1.0)


def test_stage_end_days():
    design = pain_design(stage_gap_days=(120.0, 80.0))
    assert design.stage_end_days(10.0) == pytest.approx((130.0, 210.0))


def test_propensity_table_validation():
    base = dict(
        num_stages=2,
        treatment_names=("a", "b", "c"),
        stage_treatments=((0, 1), (2,)),
        feasible={(1, (), None): (0, 1), (2, (0,), 0): (2,), (2, (0,), 1): (2,),
                  (2, (1,), 0): (2,), (2, (1,), 1): (2,)},
        response_coords={2: 0},
        block_sizes=(1, 1),
        stage_gap_days=(10.0, 10.0),
    )
    with pytest.raises(DesignError):
        SmartDesign(propensities={(1, (), None): (0.7, 0.7)}, **base)
    with pytest.raises(DesignError):
        SmartDesign(propensities={(1, (), None): (1.0,)}, **base)
    with pytest.raises(DesignError):
        SmartDesign(propensities={(1, (), None): (1.2, -0.2)}, **base)


def test_consistency_indicator_walks_the_path():
    design = pain_design()
    regimes = enumerate_embedded_regimes(design)
    reg = regimes[0]

    class T:
        covariates = [np.array([0.2, 0.0]), np.array([0.4, 0.0])]
        actions = [0, 2]

    assert consistency_indicator(T, reg, 1, design) == 1
    assert consistency_indicator(T, reg, 2, design) == 1

    class T2(T):
        actions = [0, 3]

    assert consistency_indicator(T2, reg, 2, design) == 0
    # deviation at stage 1 also kills stage 2 consistency
    class T3(T):
        actions = [1, 2]

    assert consistency_indicator(T3, reg, 1, design) == 0


def test_every_enumerated_regime_is_feasible_everywhere():
    for design in (pain_design(), registry_design(), bp_design()):
        for reg in enumerate_embedded_regimes(design):
            for (stage, prior, resp), options in design.feasible.items():
                if stage == 1:
                    assert reg.stage1 in options
                elif prior[0] == reg.stage1:
                    assert reg.rules[(stage, resp)] in options

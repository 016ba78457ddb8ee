"""Factor grammar and design-matrix construction."""

import numpy as np
import pytest

from smartmon import LinearTerms, Term, simulate_cohort
from smartmon.features import FeatureData, parse_factor
from smartmon.fixtures import pain_design, pain_model


@pytest.mark.parametrize(
    "text,kind",
    [("1", "const"), ("X1[0]", "x"), ("X2[1]", "x"), ("R2", "r"),
     ("1-R2", "1-r"), ("A1", "apos"), ("I(A2=3)", "acode_eq")],
)
def test_parse_factor_roundtrip(text, kind):
    f = parse_factor(text)
    assert f.kind == kind
    assert f.text == text
    assert parse_factor(f.text) == f


def test_parse_factor_rejects_garbage():
    for bad in ("X1", "R", "A1[0]", "I(A2==3)", "x1[0] "):
        with pytest.raises(ValueError):
            parse_factor(bad)


def test_linear_terms_parse_and_spec_roundtrip():
    lt = LinearTerms.parse([
        ["1"],
        {"factors": ["X1[0]"], "coef": 2.5, "name": "slope"},
        {"factors": ["A1", "X1[0]"], "coef": -1.0},
    ])
    assert len(lt.terms) == 3
    assert lt.coefficients() == pytest.approx([1.0, 2.5, -1.0])
    assert lt.names()[1] == "slope"
    again = LinearTerms.parse(lt.to_spec())
    assert again == lt


def test_with_coefficients_replaces_by_name():
    lt = LinearTerms.parse([{"factors": ["1"], "coef": 1.0, "name": "b0"},
                            {"factors": ["X1[0]"], "coef": 0.0, "name": "b1"}])
    new = lt.with_coefficients({"b1": 4.0})
    assert new.coefficients() == pytest.approx([1.0, 4.0])
    assert lt.coefficients() == pytest.approx([1.0, 0.0])


def _cohort_features(n=40, seed=3):
    design = pain_design()
    rng = np.random.default_rng(seed)
    cohort = simulate_cohort(pain_model("null"), design, np.zeros(n), rng)
    ft = FeatureData(cohort.blocks, cohort.acodes, cohort.apos)
    return design, cohort, ft


def test_matrix_columns_match_hand_products():
    design, cohort, ft = _cohort_features()
    terms = LinearTerms.parse([["1"], ["X1[0]"], ["A1"], ["1-R2", "A2"],
                               ["I(A2=3)"], ["R2", "X2[0]"]])
    M = ft.matrix(terms, design)
    r2 = cohort.blocks[1][:, design.response_coords[2]]
    assert M.shape == (cohort.n, 6)
    assert M[:, 0] == pytest.approx(np.ones(cohort.n))
    assert M[:, 1] == pytest.approx(cohort.blocks[0][:, 0])
    assert M[:, 2] == pytest.approx(cohort.apos[0].astype(float))
    assert M[:, 3] == pytest.approx((1 - r2) * cohort.apos[1])
    assert M[:, 4] == pytest.approx((cohort.acodes[1] == 3).astype(float))
    assert M[:, 5] == pytest.approx(r2 * cohort.blocks[1][:, 0])


def test_linear_combination_is_matrix_times_coefs():
    design, _, ft = _cohort_features()
    terms = LinearTerms.parse([
        {"factors": ["1"], "coef": 3.0},
        {"factors": ["X1[1]"], "coef": -2.0},
        {"factors": ["A1", "X1[0]"], "coef": 0.5},
    ])
    lc = ft.linear_combination(terms, design)
    M = ft.matrix(terms, design)
    assert lc == pytest.approx(M @ terms.coefficients())

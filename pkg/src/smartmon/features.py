"""Linear feature terms over trial histories.

Outcome means, Q-function regressions, and logistic response indices are
all linear combinations of products of simple factors.  Factors are written
as short strings so models round-trip through JSON:

    "1"         constant
    "X1[0]"     coordinate 0 of the stage-1 covariate block
    "R2"        the designated response coordinate of the stage-2 block
    "1-R2"      one minus the response coordinate
    "A2"        the stage-2 action coded by its position (0, 1, ...) in the
                ordered feasible set of the patient's decision cell
    "I(A1=3)"   indicator that the stage-1 treatment code equals 3

A term is a product of factors times a coefficient.  Coefficients may be
named so that calibration can solve for a subset of them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .design import SmartDesign

__all__ = ["Factor", "Term", "LinearTerms", "parse_factor", "FeatureData"]

_X_RE = re.compile(r"^X(\d+)\[(\d+)\]$")
_R_RE = re.compile(r"^R(\d+)$")
_OMR_RE = re.compile(r"^1-R(\d+)$")
_A_RE = re.compile(r"^A(\d+)$")
_IA_RE = re.compile(r"^I\(A(\d+)=(\d+)\)$")


@dataclass(frozen=True)
class Factor:
    """One parsed multiplicative factor."""

    kind: str  # "const" | "x" | "r" | "1-r" | "apos" | "acode_eq"
    stage: int = 0
    index: int = 0

    @property
    def text(self) -> str:
        if self.kind == "const":
            return "1"
        if self.kind == "x":
            return f"X{self.stage}[{self.index}]"
        if self.kind == "r":
            return f"R{self.stage}"
        if self.kind == "1-r":
            return f"1-R{self.stage}"
        if self.kind == "apos":
            return f"A{self.stage}"
        return f"I(A{self.stage}={self.index})"


def parse_factor(text: str) -> Factor:
    """Parse one factor string; raises ValueError for unknown syntax."""
    text = text.strip()
    if text == "1":
        return Factor("const")
    m = _X_RE.match(text)
    if m:
        return Factor("x", int(m.group(1)), int(m.group(2)))
    m = _R_RE.match(text)
    if m:
        return Factor("r", int(m.group(1)))
    m = _OMR_RE.match(text)
    if m:
        return Factor("1-r", int(m.group(1)))
    m = _A_RE.match(text)
    if m:
        return Factor("apos", int(m.group(1)))
    m = _IA_RE.match(text)
    if m:
        return Factor("acode_eq", int(m.group(1)), int(m.group(2)))
    raise ValueError(f"unrecognized factor {text!r}")


@dataclass(frozen=True)
class Term:
    """Coefficient times a product of factors."""

    factors: tuple[Factor, ...]
    coef: float = 1.0
    name: str | None = None

    @classmethod
    def parse(cls, factors: Sequence[str], coef: float = 1.0, name: str | None = None) -> "Term":
        return cls(tuple(parse_factor(f) for f in factors), float(coef), name)

    def with_coef(self, value: float) -> "Term":
        return Term(self.factors, float(value), self.name)

    @property
    def factor_texts(self) -> tuple[str, ...]:
        return tuple(f.text for f in self.factors)


@dataclass(frozen=True)
class LinearTerms:
    """An ordered collection of terms: sum_j coef_j * prod(factors_j)."""

    terms: tuple[Term, ...]

    @classmethod
    def parse(cls, spec: Sequence[dict | Sequence[str]]) -> "LinearTerms":
        """Build from JSON-ish input.

        Each entry is either a list of factor strings (coefficient 1) or a
        dict ``{"factors": [...], "coef": value, "name": optional}``.
        """
        terms = []
        for entry in spec:
            if isinstance(entry, dict):
                terms.append(
                    Term.parse(
                        entry["factors"],
                        coef=entry.get("coef", 1.0),
                        name=entry.get("name"),
                    )
                )
            else:
                terms.append(Term.parse(entry))
        return cls(tuple(terms))

    def to_spec(self) -> list[dict]:
        out = []
        for t in self.terms:
            entry: dict = {"factors": list(t.factor_texts), "coef": t.coef}
            if t.name is not None:
                entry["name"] = t.name
            out.append(entry)
        return out

    def coefficients(self) -> np.ndarray:
        return np.array([t.coef for t in self.terms], dtype=float)

    def names(self) -> tuple[str | None, ...]:
        return tuple(t.name for t in self.terms)

    def with_coefficients(self, updates: dict[str, float]) -> "LinearTerms":
        """Return a copy with the named coefficients replaced."""
        unknown = set(updates) - {t.name for t in self.terms if t.name}
        if unknown:
            raise ValueError(f"no term named {sorted(unknown)!r}")
        return LinearTerms(
            tuple(
                t.with_coef(updates[t.name]) if t.name in updates else t
                for t in self.terms
            )
        )


class FeatureData:
    """Column-oriented view of per-patient stage data for factor evaluation.

    Attributes:
        blocks: per-stage covariate arrays, each of shape (n, p_k); entries
            may be NaN where unobserved (callers mask rows appropriately).
        acodes: per-stage treatment codes, shape (n,).
        apos: per-stage within-feasible-set positions, shape (n,).
    """

    def __init__(
        self,
        blocks: Sequence[np.ndarray],
        acodes: Sequence[np.ndarray],
        apos: Sequence[np.ndarray],
    ) -> None:
        self.blocks = [np.asarray(b, dtype=float) for b in blocks]
        self.acodes = [np.asarray(a) for a in acodes]
        self.apos = [np.asarray(a) for a in apos]
        self.n = self.blocks[0].shape[0] if self.blocks else 0

    def factor_column(self, factor: Factor, design: SmartDesign) -> np.ndarray:
        if factor.kind == "const":
            return np.ones(self.n)
        if factor.kind == "x":
            return self.blocks[factor.stage - 1][:, factor.index]
        if factor.kind == "r":
            idx = design.response_coords[factor.stage]
            return self.blocks[factor.stage - 1][:, idx]
        if factor.kind == "1-r":
            idx = design.response_coords[factor.stage]
            return 1.0 - self.blocks[factor.stage - 1][:, idx]
        if factor.kind == "apos":
            return self.apos[factor.stage - 1].astype(float)
        if factor.kind == "acode_eq":
            return (self.acodes[factor.stage - 1] == factor.index).astype(float)
        raise ValueError(f"unknown factor kind {factor.kind!r}")

    def term_column(self, term: Term, design: SmartDesign) -> np.ndarray:
        col = np.ones(self.n)
        for factor in term.factors:
            col = col * self.factor_column(factor, design)
        return col

    def matrix(self, terms: LinearTerms, design: SmartDesign) -> np.ndarray:
        """Feature matrix with one column per term (coefficients ignored)."""
        if not terms.terms:
            return np.zeros((self.n, 0))
        return np.column_stack([self.term_column(t, design) for t in terms.terms])

    def linear_combination(self, terms: LinearTerms, design: SmartDesign) -> np.ndarray:
        """Evaluate sum_j coef_j * term_j for every row."""
        total = np.zeros(self.n)
        for t in terms.terms:
            total += t.coef * self.term_column(t, design)
        return total

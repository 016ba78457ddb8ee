"""Closed-form expectations of feature terms under a fixed regime.

Supports the model classes used by the shipped generative laws: independent
baseline coordinates (normal / Bernoulli / uniform), interstage coordinates
that are independent, linear-normal in an earlier coordinate, or uniform
with a response-dependent range, and a response that is either Bernoulli
with fixed probability or logistic in earlier coordinates.  Logistic
expectations reduce to one-dimensional Gauss-Hermite quadrature after
conditioning on the Bernoulli coordinates.

Everything here is deterministic; Monte Carlo alternatives live in
``simulate.true_value`` and are used as independent cross-checks in tests.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .design import DesignError, Regime, SmartDesign
from .features import Factor, Term
from .simulate import GenerativeModel, VarSpec

__all__ = ["expected_term", "expected_value"]


@lru_cache(maxsize=1)
def _gh_nodes() -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.hermite.hermgauss(160)
    return nodes, weights / np.sqrt(np.pi)


def _normal_expectation(f, mean: float, sd: float) -> float:
    """E[f(Z)] for Z ~ N(mean, sd^2) by Gauss-Hermite quadrature."""
    if sd == 0.0:
        return float(f(np.array([mean]))[0])
    nodes, weights = _gh_nodes()
    return float(np.sum(weights * f(mean + np.sqrt(2.0) * sd * nodes)))


def _expit(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class _CoordInfo:
    """Mean / dependence summary of one covariate coordinate."""

    def __init__(self, kind: str, **kw):
        self.kind = kind  # "innov" | "bern" | "uniform" | "mixture"
        self.mean = kw.get("mean", 0.0)
        self.weights: dict = kw.get("weights", {})  # innovation id -> loading
        self.p = kw.get("p", 0.0)
        self.branch_means = kw.get("branch_means", (0.0, 0.0))  # (if0, if1)


class _ModelSummary:
    """Coordinate summaries plus the response law of a generative model."""

    def __init__(self, model: GenerativeModel, design: SmartDesign):
        if design.num_stages > 2:
            raise DesignError(
                "analytic expectations are implemented for one- and two-stage "
                "models; use the Monte Carlo mode"
            )
        self.design = design
        self.coords: dict[tuple[int, int], _CoordInfo] = {}
        self.response: VarSpec | None = None
        for stage in range(1, design.num_stages + 1):
            for idx, spec in enumerate(model.stage_specs(stage)):
                key = (stage, idx)
                if spec.is_response:
                    self.response = spec
                    continue
                p = spec.params
                if spec.kind == "normal":
                    self.coords[key] = _CoordInfo(
                        "innov", mean=p["mean"], weights={key: p["sd"]}
                    )
                elif spec.kind == "bernoulli":
                    self.coords[key] = _CoordInfo("bern", p=p["p"], mean=p["p"])
                elif spec.kind == "uniform":
                    self.coords[key] = _CoordInfo(
                        "uniform", mean=0.5 * (p["lo"] + p["hi"])
                    )
                elif spec.kind == "linear_normal":
                    parent = self.coords.get(tuple(p["parent"]))
                    if parent is None or parent.kind != "innov":
                        raise DesignError(
                            "linear_normal parent must be an earlier normal-type "
                            "coordinate for analytic expectations"
                        )
                    weights = {k: p["slope"] * w for k, w in parent.weights.items()}
                    weights[key] = p["sd"]
                    self.coords[key] = _CoordInfo(
                        "innov",
                        mean=p.get("intercept", 0.0) + p["slope"] * parent.mean,
                        weights=weights,
                    )
                elif spec.kind == "uniform_by_response":
                    self.coords[key] = _CoordInfo(
                        "mixture",
                        branch_means=(
                            0.5 * (p["if0"][0] + p["if0"][1]),
                            0.5 * (p["if1"][0] + p["if1"][1]),
                        ),
                    )
                else:
                    raise DesignError(f"unsupported coordinate kind {spec.kind!r}")

    # -- response weighting -------------------------------------------------

    def _logistic_pieces(self):
        """Bernoulli refs and the (mean, weights) decomposition of the index."""
        p = self.response.params
        bern_refs: list[tuple[int, int]] = []
        base_mean = float(p.get("intercept", 0.0))
        weights: dict = {}
        lin_bern: list[tuple[float, tuple[int, int]]] = []
        for coef, ref in p["terms"]:
            ref = tuple(ref)
            info = self.coords.get(ref)
            if info is None:
                raise DesignError(f"response index references unknown coordinate {ref}")
            if info.kind == "bern":
                lin_bern.append((float(coef), ref))
                if ref not in bern_refs:
                    bern_refs.append(ref)
            elif info.kind == "innov":
                base_mean += coef * info.mean
                for k, w in info.weights.items():
                    weights[k] = weights.get(k, 0.0) + coef * w
            else:
                raise DesignError(
                    "logistic response index supports normal-type and Bernoulli "
                    f"coordinates only (got {info.kind} at {ref})"
                )
        return bern_refs, lin_bern, base_mean, weights

    def branch_moment(self, x_coords: list[tuple[int, int]], r: int) -> float:
        """E[prod of coords * I(R = r)] under the model.

        With no response (one-stage models) pass r = -1 to get the plain
        product expectation.
        """
        infos = [(c, self.coords[c]) for c in x_coords]
        for c, info in infos:
            if info is None:
                raise DesignError(f"unknown coordinate {c}")
        if r == -1:
            return self._plain_product(infos)
        if self.response is None:
            raise DesignError("model has no response coordinate")
        if self.response.kind == "response_bernoulli":
            pr = self.response.params["p"]
            weight = pr if r == 1 else 1.0 - pr
            return weight * self._plain_product(infos, branch=r)
        return self._logistic_product(infos, r)

    def _plain_product(self, infos, branch: int | None = None) -> float:
        """Product expectation when coordinates are independent of the
        response weight (fixed-probability response), allowing one shared
        innovation pair."""
        innov = [(c, i) for c, i in infos if i.kind == "innov"]
        if len(innov) > 2:
            raise DesignError(
                "analytic product expectations support at most two "
                "normal-type coordinates per term"
            )
        total = 1.0
        for c, info in infos:
            if info.kind == "innov":
                continue
            if info.kind == "mixture":
                if branch is None:
                    raise DesignError(
                        "response-dependent coordinate requires a fixed-probability "
                        "response"
                    )
                total *= info.branch_means[branch]
            else:
                total *= info.mean
        if len(innov) == 1:
            total *= innov[0][1].mean
        elif len(innov) == 2:
            i1, i2 = innov[0][1], innov[1][1]
            cov = sum(w * i2.weights.get(k, 0.0) for k, w in i1.weights.items())
            total *= i1.mean * i2.mean + cov
        return total

    def _logistic_product(self, infos, r: int) -> float:
        """E[prod of coords * weight_r(expit(index))] via conditioning."""
        bern_refs, lin_bern, base_mean, u_weights = self._logistic_pieces()
        extra_bern = [c for c, i in infos if i.kind == "bern" and c not in bern_refs]
        all_bern = bern_refs + extra_bern
        innov = [(c, i) for c, i in infos if i.kind == "innov"]
        if len(innov) > 1:
            raise DesignError(
                "terms with a logistic response support at most one normal-type "
                "coordinate"
            )
        if any(i.kind == "mixture" for _, i in infos):
            raise DesignError(
                "response-dependent coordinates are incompatible with a logistic "
                "response in analytic mode"
            )
        const = 1.0
        for c, info in infos:
            if info.kind == "uniform":
                const *= info.mean
        s2 = sum(w * w for w in u_weights.values())
        s = np.sqrt(s2)
        total = 0.0
        for combo in range(1 << len(all_bern)):
            values = {c: (combo >> j) & 1 for j, c in enumerate(all_bern)}
            prob = 1.0
            for c in all_bern:
                pc = self.coords[c].p
                prob *= pc if values[c] == 1 else 1.0 - pc
            if prob == 0.0:
                continue
            mean_b = base_mean + sum(coef * values[ref] for coef, ref in lin_bern)
            bern_factor = 1.0
            for c, info in infos:
                if info.kind == "bern":
                    bern_factor *= values[c]
            if bern_factor == 0.0 and any(i.kind == "bern" for _, i in infos):
                continue

            def weight(u):
                e = _expit(u)
                return e if r == 1 else 1.0 - e

            e_weight = _normal_expectation(weight, mean_b, s)
            if innov:
                info = innov[0][1]
                gamma = sum(
                    w * u_weights.get(k, 0.0) for k, w in info.weights.items()
                )
                if s2 > 0 and gamma != 0.0:
                    e_uw = _normal_expectation(
                        lambda u: (u - mean_b) * weight(u), mean_b, s
                    )
                    term_val = info.mean * e_weight + (gamma / s2) * e_uw
                else:
                    term_val = info.mean * e_weight
            else:
                term_val = e_weight
            total += prob * const * bern_factor * term_val
        return total


def _action_factor_value(
    factor: Factor, design: SmartDesign, regime: Regime, response: int | None
) -> float:
    """Value of an action factor under the regime, within a response branch."""
    stage = factor.stage
    if stage == 1:
        code = regime.stage1
        options = design.feasible[(1, (), None)]
    else:
        if response is None:
            raise DesignError("stage-2 action factor requires a response branch")
        code = regime.rules.get((stage, response))
        if code is None:
            raise DesignError(
                f"regime has no rule for stage {stage}, response {response}"
            )
        key = (stage, (regime.stage1,), response)
        options = design.feasible.get(key)
        if options is None:
            raise DesignError(f"no feasible set declared for cell {key!r}")
        if code not in options:
            raise DesignError(
                f"regime rule selects treatment {code}, infeasible for {key!r}"
            )
    if factor.kind == "apos":
        return float(options.index(code))
    return 1.0 if code == factor.index else 0.0


def expected_term(
    model: GenerativeModel, design: SmartDesign, regime: Regime, term: Term
) -> float:
    """E[coef * prod(factors)] when treatments follow ``regime``."""
    summary = _ModelSummary(model, design)
    resp_coord = (
        None
        if design.num_stages < 2
        else (2, design.response_coords[2])
    )
    action_factors: list[Factor] = []
    x_coords: list[tuple[int, int]] = []
    r_power = 0  # times the response enters as a plain factor
    omr_power = 0  # times (1 - response) enters
    for factor in term.factors:
        if factor.kind == "const":
            continue
        if factor.kind in ("apos", "acode_eq"):
            action_factors.append(factor)
        elif factor.kind == "r" or (
            factor.kind == "x" and (factor.stage, factor.index) == resp_coord
        ):
            r_power += 1
        elif factor.kind == "1-r":
            omr_power += 1
        else:
            x_coords.append((factor.stage, factor.index))

    if design.num_stages == 1:
        value = term.coef
        for factor in action_factors:
            value *= _action_factor_value(factor, design, regime, None)
        if r_power or omr_power:
            raise DesignError("one-stage models have no response coordinate")
        return value * _ModelSummary(model, design).branch_moment(x_coords, -1)

    total = 0.0
    for r in (0, 1):
        if r_power and r == 0:
            continue
        if omr_power and r == 1:
            continue
        mult = term.coef
        for factor in action_factors:
            mult *= _action_factor_value(factor, design, regime, r)
            if mult == 0.0:
                break
        if mult == 0.0:
            continue
        total += mult * summary.branch_moment(x_coords, r)
    return total


def expected_value(model: GenerativeModel, design: SmartDesign, regime: Regime) -> float:
    """Expected outcome when treatments follow ``regime``."""
    return float(
        sum(expected_term(model, design, regime, t) for t in model.outcome.terms)
    )

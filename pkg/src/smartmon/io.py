"""Serialization: versioned JSON documents, snapshot CSV, run manifests.

Every JSON artifact is a *document*: a top-level object carrying
``schema_version`` and ``kind`` alongside the payload, so files identify
themselves and old readers can refuse newer layouts.  Validation failures
point at the offending location with a JSON-pointer-style path
(``/feasible/3/options``) plus the file name when one is known.

Interim datasets travel as CSV — one row per enrolled patient, one column
per covariate coordinate and treatment, blank cells for not-yet-observed
values — with a JSON sidecar recording the analysis day and planned
enrollment.  Blank patterns must match the design's deterministic
follow-up timing; a row that claims, say, a stage-2 treatment without its
stage-2 covariates is rejected with the row number.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .design import DesignError, Regime, SmartDesign
from .estimation import ControlSpec
from .features import LinearTerms
from .sequential import BoundarySpec, NullCovariance
from .simulate import EnrollmentProcess, GenerativeModel, VarSpec
from .snapshot import Snapshot

__all__ = [
    "SCHEMA_VERSION",
    "SchemaError",
    "save_document",
    "load_document",
    "design_to_dict",
    "design_from_dict",
    "model_to_dict",
    "model_from_dict",
    "enrollment_to_dict",
    "enrollment_from_dict",
    "regimes_to_dict",
    "regimes_from_dict",
    "boundary_to_dict",
    "boundary_from_dict",
    "null_covariance_to_dict",
    "null_covariance_from_dict",
    "q_terms_to_dict",
    "q_terms_from_dict",
    "alternative_to_dict",
    "alternative_from_dict",
    "PlanSpec",
    "plan_to_dict",
    "plan_from_dict",
    "write_snapshot_csv",
    "read_snapshot_csv",
    "snapshot_meta_path",
    "canonical_digest",
    "RunManifest",
]

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """A document failed validation; ``pointer`` locates the problem."""

    def __init__(self, pointer: str, message: str, filename: str | None = None):
        self.pointer = pointer
        self.filename = filename
        where = f"{filename}: " if filename else ""
        super().__init__(f"{where}{pointer}: {message}")


def _get(doc: Mapping, pointer: str, key: str, types, *, required=True, default=None):
    """Fetch ``doc[key]`` with type checking, raising SchemaError on failure."""
    here = f"{pointer}/{key}"
    if key not in doc:
        if required:
            raise SchemaError(here, "missing required field")
        return default
    value = doc[key]
    if types is not None and not isinstance(value, types):
        names = (
            "/".join(t.__name__ for t in types)
            if isinstance(types, tuple)
            else types.__name__
        )
        raise SchemaError(here, f"expected {names}, got {type(value).__name__}")
    return value


def _finite_number(value, pointer: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(pointer, f"expected a number, got {type(value).__name__}")
    out = float(value)
    if not math.isfinite(out):
        raise SchemaError(pointer, "number must be finite")
    return out


# -- documents ---------------------------------------------------------------


def save_document(path, kind: str, payload: Mapping[str, Any]) -> None:
    """Write a payload as a versioned JSON document."""
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind}
    doc.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False)
        fh.write("\n")


def load_document(path, kind: str | None = None) -> dict:
    """Read a versioned JSON document, checking version and (optionally) kind."""
    name = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"not valid JSON ({exc})", name) from None
    if not isinstance(doc, dict):
        raise SchemaError("", "document root must be a JSON object", name)
    try:
        version = _get(doc, "", "schema_version", int)
        found = _get(doc, "", "kind", str)
    except SchemaError as exc:
        raise SchemaError(exc.pointer, exc.args[0].split(": ", 1)[-1], name) from None
    if version > SCHEMA_VERSION:
        raise SchemaError(
            "/schema_version",
            f"document uses schema {version}, this reader supports <= {SCHEMA_VERSION}",
            name,
        )
    if kind is not None and found != kind:
        raise SchemaError("/kind", f"expected {kind!r}, found {found!r}", name)
    doc["__file__"] = name
    return doc


def _filename(doc: Mapping) -> str | None:
    return doc.get("__file__")


# -- designs -----------------------------------------------------------------


def design_to_dict(design: SmartDesign) -> dict:
    cells = []
    for (stage, prior, resp), options in design.feasible.items():
        cell = {
            "stage": stage,
            "prior": list(prior),
            "response": resp,
            "options": list(options),
        }
        if design.propensities is not None:
            cell["propensities"] = list(design.propensities[(stage, prior, resp)])
        cells.append(cell)
    cells.sort(key=lambda c: (c["stage"], c["prior"], -1 if c["response"] is None else c["response"]))
    return {
        "name": design.name,
        "num_stages": design.num_stages,
        "treatment_names": list(design.treatment_names),
        "stage_treatments": [list(t) for t in design.stage_treatments],
        "block_sizes": list(design.block_sizes),
        "stage_gap_days": list(design.stage_gap_days),
        "response_coords": {str(k): v for k, v in design.response_coords.items()},
        "feasible": cells,
    }


def design_from_dict(doc: Mapping) -> SmartDesign:
    name = _filename(doc)

    def bail(pointer, msg):
        raise SchemaError(pointer, msg, name)

    num_stages = _get(doc, "", "num_stages", int)
    tnames = _get(doc, "", "treatment_names", list)
    for i, t in enumerate(tnames):
        if not isinstance(t, str):
            bail(f"/treatment_names/{i}", "treatment names must be strings")
    stage_tx = _get(doc, "", "stage_treatments", list)
    block_sizes = _get(doc, "", "block_sizes", list)
    gaps = _get(doc, "", "stage_gap_days", list)
    rc_doc = _get(doc, "", "response_coords", dict, required=False, default={})
    response_coords = {}
    for key, value in rc_doc.items():
        if not key.isdigit():
            bail(f"/response_coords/{key}", "stage keys must be digit strings")
        if not isinstance(value, int):
            bail(f"/response_coords/{key}", "coordinate must be an integer")
        response_coords[int(key)] = value
    cells_doc = _get(doc, "", "feasible", list)
    feasible = {}
    propensities = {}
    saw_props = False
    for i, cell in enumerate(cells_doc):
        here = f"/feasible/{i}"
        if not isinstance(cell, dict):
            bail(here, "each feasible cell must be an object")
        stage = _get(cell, here, "stage", int)
        prior = _get(cell, here, "prior", list)
        resp = cell.get("response")
        if resp is not None and resp not in (0, 1):
            bail(f"{here}/response", "response must be null, 0, or 1")
        options = _get(cell, here, "options", list)
        if not all(isinstance(a, int) for a in options):
            bail(f"{here}/options", "options must be treatment-code integers")
        key = (stage, tuple(prior), resp)
        if key in feasible:
            bail(here, f"duplicate feasible cell for {key!r}")
        feasible[key] = tuple(options)
        if "propensities" in cell:
            saw_props = True
            probs = _get(cell, here, "propensities", list)
            row = tuple(
                _finite_number(p, f"{here}/propensities/{j}")
                for j, p in enumerate(probs)
            )
            if len(row) == len(options) and abs(sum(row) - 1.0) > 1e-9:
                bail(
                    f"{here}/propensities",
                    f"probabilities sum to {sum(row):g}, expected 1",
                )
            propensities[key] = row
    if saw_props and len(propensities) != len(feasible):
        missing = next(k for k in feasible if k not in propensities)
        bail("/feasible", f"propensities given for some cells but not {missing!r}")
    try:
        return SmartDesign(
            num_stages=num_stages,
            treatment_names=tuple(tnames),
            stage_treatments=tuple(tuple(t) for t in stage_tx),
            feasible=feasible,
            response_coords=response_coords,
            block_sizes=tuple(block_sizes),
            stage_gap_days=tuple(float(g) for g in gaps),
            propensities=propensities if saw_props else None,
            name=_get(doc, "", "name", str, required=False, default=""),
        )
    except DesignError as exc:
        bail("", f"design is internally inconsistent: {exc}")


# -- generative models ---------------------------------------------------------


def _terms_to_list(terms: LinearTerms) -> list[dict]:
    out = []
    for term in terms.terms:
        entry: dict[str, Any] = {
            "factors": list(term.factor_texts),
            "coef": term.coef,
        }
        if term.name is not None:
            entry["name"] = term.name
        out.append(entry)
    return out


def _terms_from_list(spec, pointer: str, filename) -> LinearTerms:
    if not isinstance(spec, list):
        raise SchemaError(pointer, "expected a list of terms", filename)
    try:
        return LinearTerms.parse(spec)
    except (ValueError, TypeError, KeyError) as exc:
        raise SchemaError(pointer, f"bad term list: {exc}", filename) from None


def _varspec_to_dict(spec: VarSpec) -> dict:
    return {"kind": spec.kind, "params": dict(spec.params)}


def _varspec_from_dict(doc, pointer: str, filename) -> VarSpec:
    if not isinstance(doc, dict):
        raise SchemaError(pointer, "each coordinate spec must be an object", filename)
    kind = doc.get("kind")
    if not isinstance(kind, str):
        raise SchemaError(f"{pointer}/kind", "missing or non-string kind", filename)
    params = doc.get("params", {})
    if not isinstance(params, dict):
        raise SchemaError(f"{pointer}/params", "params must be an object", filename)
    # JSON turns tuples into lists; normalize the ones VarSpec treats as pairs.
    norm: dict[str, Any] = {}
    for k, v in params.items():
        if isinstance(v, list) and k in ("parent", "if0", "if1"):
            norm[k] = tuple(v)
        elif k == "terms" and isinstance(v, list):
            norm[k] = [
                [entry[0], tuple(entry[1])] if isinstance(entry, list) else entry
                for entry in v
            ]
        else:
            norm[k] = v
    return VarSpec(kind=kind, params=norm)


def model_to_dict(model: GenerativeModel) -> dict:
    return {
        "name": model.name,
        "outcome_sd": model.outcome_sd,
        "baseline": [_varspec_to_dict(s) for s in model.baseline],
        "interstage": [
            [_varspec_to_dict(s) for s in block] for block in model.interstage
        ],
        "outcome": _terms_to_list(model.outcome),
    }


def model_from_dict(doc: Mapping) -> GenerativeModel:
    name = _filename(doc)
    sd = _finite_number(_get(doc, "", "outcome_sd", (int, float)), "/outcome_sd")
    if sd <= 0:
        raise SchemaError("/outcome_sd", "outcome_sd must be positive", name)
    baseline = _get(doc, "", "baseline", list)
    interstage = _get(doc, "", "interstage", list)
    return GenerativeModel(
        baseline=tuple(
            _varspec_from_dict(s, f"/baseline/{i}", name)
            for i, s in enumerate(baseline)
        ),
        interstage=tuple(
            tuple(
                _varspec_from_dict(s, f"/interstage/{i}/{j}", name)
                for j, s in enumerate(block)
            )
            for i, block in enumerate(interstage)
        ),
        outcome=_terms_from_list(_get(doc, "", "outcome", list), "/outcome", name),
        outcome_sd=sd,
        name=_get(doc, "", "name", str, required=False, default=""),
    )


def enrollment_to_dict(proc: EnrollmentProcess) -> dict:
    out: dict[str, Any] = {"kind": proc.kind}
    if proc.kind == "uniform":
        out["lo"], out["hi"] = proc.lo, proc.hi
    else:
        out["bounds"] = list(proc.bounds)
        out["probs"] = list(proc.probs)
    return out


def enrollment_from_dict(doc, pointer: str = "/enrollment", filename=None) -> EnrollmentProcess:
    if not isinstance(doc, dict):
        raise SchemaError(pointer, "enrollment must be an object", filename)
    kind = doc.get("kind", "uniform")
    if kind == "uniform":
        return EnrollmentProcess(
            kind="uniform",
            lo=_finite_number(doc.get("lo", 0.0), f"{pointer}/lo"),
            hi=_finite_number(doc.get("hi", 1.0), f"{pointer}/hi"),
        )
    if kind == "periods":
        bounds = doc.get("bounds")
        probs = doc.get("probs")
        if not isinstance(bounds, list) or not isinstance(probs, list):
            raise SchemaError(pointer, "periods enrollment needs bounds and probs", filename)
        try:
            return EnrollmentProcess(
                kind="periods",
                bounds=tuple(float(b) for b in bounds),
                probs=tuple(float(p) for p in probs),
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(pointer, f"bad periods enrollment: {exc}", filename) from None
    raise SchemaError(f"{pointer}/kind", f"unknown enrollment kind {kind!r}", filename)


# -- regimes -------------------------------------------------------------------


def regimes_to_dict(regimes: Sequence[Regime]) -> list[dict]:
    out = []
    for regime in regimes:
        out.append(
            {
                "stage1": regime.stage1,
                "rules": [
                    {"stage": st, "response": resp, "action": act}
                    for (st, resp), act in sorted(regime.rules.items())
                ],
                "label": regime.label,
            }
        )
    return out


def regimes_from_dict(doc, pointer: str = "/regimes", filename=None) -> tuple[Regime, ...]:
    if not isinstance(doc, list):
        raise SchemaError(pointer, "regimes must be a list", filename)
    regimes = []
    for i, entry in enumerate(doc):
        here = f"{pointer}/{i}"
        if not isinstance(entry, dict) or not isinstance(entry.get("stage1"), int):
            raise SchemaError(here, "each regime needs an integer stage1", filename)
        rules = {}
        for j, rule in enumerate(entry.get("rules", [])):
            rp = f"{here}/rules/{j}"
            if not isinstance(rule, dict):
                raise SchemaError(rp, "each rule must be an object", filename)
            try:
                rules[(int(rule["stage"]), int(rule["response"]))] = int(rule["action"])
            except (KeyError, TypeError, ValueError):
                raise SchemaError(
                    rp, "rule needs integer stage, response, action", filename
                ) from None
        regimes.append(
            Regime(
                stage1=entry["stage1"],
                rules=rules,
                label=str(entry.get("label", "")),
            )
        )
    return tuple(regimes)


# -- boundaries and null covariances ------------------------------------------


def null_covariance_to_dict(cov: NullCovariance) -> dict:
    return {
        "matrix": np.asarray(cov.matrix).tolist(),
        "num_analyses": cov.num_analyses,
        "num_regimes": cov.num_regimes,
        "info_proportions": list(cov.info_proportions),
        "source": cov.source,
        "per_regime_info": None
        if cov.per_regime_info is None
        else np.asarray(cov.per_regime_info).tolist(),
        "psd_adjustment": cov.psd_adjustment,
    }


def null_covariance_from_dict(doc, pointer: str = "/null_covariance", filename=None) -> NullCovariance:
    if not isinstance(doc, dict):
        raise SchemaError(pointer, "null covariance must be an object", filename)
    try:
        matrix = np.asarray(doc["matrix"], dtype=float)
        per_regime = doc.get("per_regime_info")
        return NullCovariance(
            matrix=matrix,
            num_analyses=int(doc["num_analyses"]),
            num_regimes=int(doc["num_regimes"]),
            info_proportions=tuple(float(p) for p in doc["info_proportions"]),
            source=str(doc.get("source", "analytic")),
            per_regime_info=None if per_regime is None else np.asarray(per_regime, dtype=float),
            psd_adjustment=float(doc.get("psd_adjustment", 0.0)),
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(pointer, f"bad null covariance: {exc}", filename) from None


def boundary_to_dict(boundary: BoundarySpec) -> dict:
    meta = {
        k: v
        for k, v in boundary.meta.items()
        if isinstance(v, (int, float, str, bool, type(None)))
    }
    return {
        "family": boundary.family,
        "statistic": boundary.statistic,
        "alpha": boundary.alpha,
        "values": [float(c) for c in boundary.values],
        "scale": boundary.scale,
        "num_analyses": boundary.num_analyses,
        "num_regimes": boundary.num_regimes,
        "attained": boundary.attained,
        "attained_err": boundary.attained_err,
        "meta": meta,
    }


def boundary_from_dict(doc, pointer: str = "", filename=None) -> BoundarySpec:
    if not isinstance(doc, dict):
        raise SchemaError(pointer or "/", "boundary must be an object", filename)
    try:
        return BoundarySpec(
            family=str(doc["family"]),
            statistic=str(doc["statistic"]),
            alpha=float(doc["alpha"]),
            values=tuple(float(c) for c in doc["values"]),
            scale=tuple(float(x) for x in doc["scale"]),
            num_analyses=int(doc["num_analyses"]),
            num_regimes=int(doc["num_regimes"]),
            attained=None if doc.get("attained") is None else float(doc["attained"]),
            attained_err=None
            if doc.get("attained_err") is None
            else float(doc["attained_err"]),
            meta=dict(doc.get("meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(pointer or "/", f"bad boundary: {exc}", filename) from None


# -- working-model terms and alternatives ---------------------------------------


def q_terms_to_dict(q_terms: Sequence[LinearTerms]) -> list[list[dict]]:
    """One term list per stage, stage 1 first."""
    return [_terms_to_list(t) for t in q_terms]


def q_terms_from_dict(doc, pointer: str = "/q_terms", filename=None) -> tuple[LinearTerms, ...]:
    if not isinstance(doc, list) or not doc:
        raise SchemaError(pointer, "expected one term list per stage", filename)
    return tuple(
        _terms_from_list(spec, f"{pointer}/{k}", filename)
        for k, spec in enumerate(doc)
    )


def alternative_to_dict(alt) -> dict:
    return {
        "regime_values": list(alt.regime_values),
        "control_value": alt.control_value,
        "delta": alt.delta,
        "unit_sds": np.asarray(alt.unit_sds).tolist(),
        "null_covariance": null_covariance_to_dict(alt.null_cov),
    }


def alternative_from_dict(doc, pointer: str = "", filename=None):
    from .planning import AlternativeSpec

    if not isinstance(doc, dict):
        raise SchemaError(pointer or "/", "alternative must be an object", filename)
    null_cov = null_covariance_from_dict(
        doc.get("null_covariance"), f"{pointer}/null_covariance", filename
    )
    try:
        return AlternativeSpec(
            regime_values=tuple(float(v) for v in doc["regime_values"]),
            control_value=float(doc["control_value"]),
            delta=float(doc.get("delta", 0.0)),
            unit_sds=np.asarray(doc["unit_sds"], dtype=float),
            null_cov=null_cov,
        )
    except SchemaError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(pointer or "/", f"bad alternative: {exc}", filename) from None


# -- trial plans -----------------------------------------------------------------


@dataclass(frozen=True)
class PlanSpec:
    """Monitoring plan: schedule, boundary family, estimator, and sizing."""

    alpha: float
    family: str
    statistic: str
    estimator: str
    N: int
    analysis_days: tuple[float, ...]
    control: ControlSpec
    enrollment: EnrollmentProcess
    delta: float = 0.0
    nu_method: str = "average"
    ipwe_normalized: bool = True
    info_proportions: tuple[float, ...] | None = None
    name: str = ""


def _control_to_dict(control: ControlSpec) -> dict:
    if control.kind == "fixed":
        return {"kind": "fixed", "value": control.value}
    return {"kind": "arm", "arm_code": control.arm_code}


def _control_from_dict(doc, pointer: str, filename) -> ControlSpec:
    if not isinstance(doc, dict):
        raise SchemaError(pointer, "control must be an object", filename)
    kind = doc.get("kind")
    if kind == "fixed":
        return ControlSpec.fixed(
            _finite_number(
                _get(doc, pointer, "value", (int, float)), f"{pointer}/value"
            )
        )
    if kind == "arm":
        return ControlSpec.arm(_get(doc, pointer, "arm_code", int))
    raise SchemaError(f"{pointer}/kind", f"control kind must be 'fixed' or 'arm', got {kind!r}", filename)


def plan_to_dict(plan: PlanSpec) -> dict:
    out: dict[str, Any] = {
        "name": plan.name,
        "alpha": plan.alpha,
        "family": plan.family,
        "statistic": plan.statistic,
        "estimator": plan.estimator,
        "N": plan.N,
        "analysis_days": list(plan.analysis_days),
        "delta": plan.delta,
        "control": _control_to_dict(plan.control),
        "enrollment": enrollment_to_dict(plan.enrollment),
        "nu_method": plan.nu_method,
        "ipwe_normalized": plan.ipwe_normalized,
    }
    if plan.info_proportions is not None:
        out["info_proportions"] = list(plan.info_proportions)
    return out


def plan_from_dict(doc: Mapping) -> PlanSpec:
    name = _filename(doc)
    alpha = _finite_number(_get(doc, "", "alpha", (int, float)), "/alpha")
    if not 0.0 < alpha < 0.5:
        raise SchemaError("/alpha", f"alpha must lie in (0, 0.5), got {alpha}", name)
    family = _get(doc, "", "family", str, required=False, default="pocock").lower()
    if family not in ("pocock", "obf"):
        raise SchemaError("/family", f"family must be 'pocock' or 'obf', got {family!r}", name)
    statistic = _get(doc, "", "statistic", str, required=False, default="z")
    if statistic not in ("z", "chi2"):
        raise SchemaError("/statistic", f"statistic must be 'z' or 'chi2', got {statistic!r}", name)
    estimator = _get(doc, "", "estimator", str, required=False, default="iaipwe")
    if estimator not in ("ipwe", "aipwe", "iaipwe"):
        raise SchemaError(
            "/estimator",
            f"estimator must be one of ipwe, aipwe, iaipwe, got {estimator!r}",
            name,
        )
    n_planned = _get(doc, "", "N", int)
    if isinstance(n_planned, bool) or n_planned < 1:
        raise SchemaError("/N", f"N must be a positive integer, got {n_planned!r}", name)
    days_doc = _get(doc, "", "analysis_days", list)
    days = tuple(
        _finite_number(d, f"/analysis_days/{i}") for i, d in enumerate(days_doc)
    )
    if len(days) < 1 or list(days) != sorted(set(days)):
        raise SchemaError("/analysis_days", "analysis days must be strictly increasing", name)
    control = _control_from_dict(doc.get("control"), "/control", name)
    enrollment = enrollment_from_dict(doc.get("enrollment"), "/enrollment", name)
    props = None
    if doc.get("info_proportions") is not None:
        raw = _get(doc, "", "info_proportions", list)
        props = tuple(
            _finite_number(p, f"/info_proportions/{i}") for i, p in enumerate(raw)
        )
        if len(props) != len(days):
            raise SchemaError(
                "/info_proportions", "need one information proportion per analysis", name
            )
        for i, p in enumerate(props):
            if not 0.0 < p <= 1.0:
                raise SchemaError(
                    f"/info_proportions/{i}", f"proportions must lie in (0, 1], got {p}", name
                )
    try:
        return PlanSpec(
            alpha=alpha,
            family=family,
            statistic=statistic,
            estimator=estimator,
            N=n_planned,
            analysis_days=days,
            control=control,
            enrollment=enrollment,
            delta=_finite_number(doc.get("delta", 0.0), "/delta"),
            nu_method=_get(doc, "", "nu_method", str, required=False, default="average"),
            ipwe_normalized=bool(doc.get("ipwe_normalized", True)),
            info_proportions=props,
            name=_get(doc, "", "name", str, required=False, default=""),
        )
    except ValueError as exc:
        raise SchemaError("", str(exc), name) from None


# -- snapshot CSV ---------------------------------------------------------------


def snapshot_meta_path(csv_path) -> str:
    """Sidecar filename: dataset.csv -> dataset.meta.json."""
    path = str(csv_path)
    base = path[:-4] if path.endswith(".csv") else path
    return base + ".meta.json"


def _snapshot_columns(design: SmartDesign) -> list[str]:
    cols = ["id", "enroll_day"]
    for k in range(1, design.num_stages + 1):
        cols.extend(f"X{k}_{j}" for j in range(design.block_sizes[k - 1]))
        cols.append(f"A{k}")
    cols.append("Y")
    return cols


def write_snapshot_csv(
    snap: Snapshot,
    design: SmartDesign,
    path,
    *,
    ids: Sequence[str] | None = None,
) -> None:
    """Write an interim dataset with its JSON sidecar (analysis day, planning)."""
    cols = _snapshot_columns(design)
    if ids is None:
        ids = [str(i + 1) for i in range(snap.n)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(snap.n):
            row: list[str] = [ids[i], f"{snap.enroll[i]:g}"]
            k_i = int(snap.kappa[i])
            for k in range(1, design.num_stages + 1):
                seen = k <= k_i
                for j in range(design.block_sizes[k - 1]):
                    row.append(f"{snap.blocks[k - 1][i, j]:g}" if seen else "")
                row.append(str(int(snap.acodes[k - 1][i])) if seen else "")
            row.append(f"{snap.outcome[i]:g}" if snap.delta[i] == 1 else "")
            writer.writerow(row)
    save_document(
        snapshot_meta_path(path),
        "snapshot-meta",
        {
            "analysis_day": snap.t,
            "n_planned": snap.n_planned,
            "num_stages": design.num_stages,
            "design_name": design.name,
        },
    )


def read_snapshot_csv(
    path,
    design: SmartDesign,
    *,
    analysis_day: float | None = None,
    n_planned: int | None = None,
) -> Snapshot:
    """Read an interim dataset, validating blanks against the design timing.

    The analysis day comes from the sidecar unless given explicitly.  For
    each row the set of non-blank stages must equal the stages the design
    says are observable at the analysis day given the enrollment day, and
    the outcome must be present exactly when follow-up is complete.
    """
    name = str(path)
    if analysis_day is None or n_planned is None:
        meta = load_document(snapshot_meta_path(path), "snapshot-meta")
        if analysis_day is None:
            analysis_day = _finite_number(
                _get(meta, "", "analysis_day", (int, float)), "/analysis_day"
            )
        if n_planned is None:
            n_planned = _get(meta, "", "n_planned", int, required=False)
    cols = _snapshot_columns(design)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("", "empty CSV file", name) from None
        if header != cols:
            raise SchemaError(
                "/header",
                f"expected columns {cols}, found {header}",
                name,
            )
        rows = list(reader)

    n = len(rows)
    K = design.num_stages
    enroll = np.empty(n)
    kappa = np.empty(n, dtype=np.int64)
    delta = np.empty(n, dtype=np.int64)
    blocks = [np.full((n, design.block_sizes[k]), np.nan) for k in range(K)]
    acodes = [np.full(n, -1, dtype=np.int64) for _ in range(K)]
    apos = [np.full(n, -1, dtype=np.int64) for _ in range(K)]
    outcome = np.full(n, np.nan)

    from .design import History  # local import to avoid a cycle at module load

    for r, row in enumerate(rows):
        rowno = r + 2  # 1-based, plus the header line
        if len(row) != len(cols):
            raise SchemaError(
                f"/row/{rowno}", f"expected {len(cols)} cells, found {len(row)}", name
            )
        cells = dict(zip(cols, row))
        try:
            enroll[r] = float(cells["enroll_day"])
        except ValueError:
            raise SchemaError(
                f"/row/{rowno}/enroll_day",
                f"not a number: {cells['enroll_day']!r}",
                name,
            ) from None
        if enroll[r] > analysis_day:
            raise SchemaError(
                f"/row/{rowno}/enroll_day",
                f"enrolled on day {enroll[r]:g}, after the analysis day {analysis_day:g}",
                name,
            )
        ends = design.stage_end_days(enroll[r])
        k_expect = 1 + sum(1 for day in ends[:-1] if day <= analysis_day)
        d_expect = 1 if ends[-1] <= analysis_day else 0
        hist_blocks: list[tuple[float, ...]] = []
        hist_actions: list[int] = []
        for k in range(1, K + 1):
            xs = [cells[f"X{k}_{j}"] for j in range(design.block_sizes[k - 1])]
            a = cells[f"A{k}"]
            present = [x != "" for x in xs] + [a != ""]
            if k <= k_expect:
                if not all(present):
                    j = present.index(False)
                    col = f"X{k}_{j}" if j < len(xs) else f"A{k}"
                    raise SchemaError(
                        f"/row/{rowno}/{col}",
                        f"blank, but stage {k} is observed by day {analysis_day:g} "
                        f"for this enrollment day",
                        name,
                    )
                try:
                    vals = [float(x) for x in xs]
                    code = int(a)
                except ValueError:
                    raise SchemaError(
                        f"/row/{rowno}/A{k}", "stage fields must be numeric", name
                    ) from None
                blocks[k - 1][r] = vals
                hist_blocks.append(tuple(vals))
                history = History(tuple(hist_blocks), tuple(hist_actions))
                try:
                    position = design.action_position(history, code)
                except DesignError as exc:
                    raise SchemaError(f"/row/{rowno}/A{k}", str(exc), name) from None
                acodes[k - 1][r] = code
                apos[k - 1][r] = position
                hist_actions.append(code)
            elif any(present):
                j = present.index(True)
                col = f"X{k}_{j}" if j < len(xs) else f"A{k}"
                raise SchemaError(
                    f"/row/{rowno}/{col}",
                    f"has a value, but stage {k} is not yet observed at day "
                    f"{analysis_day:g} for this enrollment day",
                    name,
                )
        y = cells["Y"]
        if d_expect and y == "":
            raise SchemaError(
                f"/row/{rowno}/Y",
                f"blank, but follow-up completes on day {ends[-1]:g}",
                name,
            )
        if not d_expect and y != "":
            raise SchemaError(
                f"/row/{rowno}/Y",
                f"has a value, but follow-up only completes on day {ends[-1]:g}",
                name,
            )
        if y != "":
            try:
                outcome[r] = float(y)
            except ValueError:
                raise SchemaError(
                    f"/row/{rowno}/Y", f"not a number: {y!r}", name
                ) from None
        kappa[r] = k_expect
        delta[r] = d_expect

    return Snapshot(
        analysis_day,
        K,
        enroll,
        kappa,
        delta,
        blocks,
        acodes,
        apos,
        outcome,
        n_planned=n_planned,
    )


# -- manifests ------------------------------------------------------------------


def canonical_digest(payload) -> str:
    """SHA-256 of the canonical JSON form; stable under key reordering."""
    blob = json.dumps(
        payload, sort_keys=True, separators=(",", ":"), allow_nan=False
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """Provenance record for one CLI run or scripted analysis."""

    command: str
    seed: int | None
    digest: str
    version: str
    created: str
    wall_seconds: float

    @classmethod
    def record(
        cls, command: str, seed: int | None, payload, wall_seconds: float
    ) -> "RunManifest":
        from . import __version__

        return cls(
            command=command,
            seed=seed,
            digest=canonical_digest(payload),
            version=__version__,
            created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            wall_seconds=round(float(wall_seconds), 3),
        )

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "digest": self.digest,
            "version": self.version,
            "created": self.created,
            "wall_seconds": self.wall_seconds,
        }

    def save(self, path) -> None:
        save_document(path, "manifest", self.to_dict())

"""Command-line driver: validate, simulate, analyze, solve boundaries, plan.

Every subcommand exits 0 on success, 2 when an input fails validation
(including unknown flags and malformed documents, diagnosed with a JSON
pointer), and 3 when a computation fails numerically.  All randomness flows
from ``--seed`` (default 0, printed), so any run is reproducible from its
command line; artifact-writing commands drop a ``manifest.json`` beside
their outputs recording the command, seed, config digest, and version.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import fixtures
from . import io as iomod
from . import report as reportmod
from .design import DesignError, SmartDesign, enumerate_embedded_regimes
from .estimation import ControlSpec, stacked_estimate
from .harness import ExperimentConfig, mse_ratio_table, run_experiment
from .io import (
    RunManifest,
    SchemaError,
    load_document,
    read_snapshot_csv,
    save_document,
)
from .planning import (
    pilot_alternative,
    power,
    replicate_contrasts,
    sample_size_search,
)
from .sequential import (
    chi_square_statistic,
    contrast_correlation,
    decide,
    null_covariance_from_samples,
    solve_boundaries,
    z_statistics,
)
from .snapshot import EstimationError

DEFAULT_SEED = 0

__all__ = ["main", "DEFAULT_SEED"]


# ---------------------------------------------------------------------------
# shared plumbing


def _ensure_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _announce_seed(args) -> None:
    print(f"seed: {args.seed}")


def _write_manifest(out: Path, command: str, seed, payload, t0: float) -> None:
    manifest = RunManifest.record(command, seed, payload, time.perf_counter() - t0)
    manifest.save(out / "manifest.json")


def _load_design(path: str) -> SmartDesign:
    return iomod.design_from_dict(load_document(path, "design"))


def _load_model(path: str):
    return iomod.model_from_dict(load_document(path, "model"))


def _load_plan(path: str) -> iomod.PlanSpec:
    return iomod.plan_from_dict(load_document(path, "plan"))


def _load_qterms(path: str):
    doc = load_document(path, "qterms")
    return iomod.q_terms_from_dict(
        doc.get("stages"), "/stages", doc.get("__file__")
    )


def _load_regimes(path: str, design: SmartDesign):
    doc = load_document(path, "regimes")
    regimes = iomod.regimes_from_dict(
        doc.get("regimes"), "/regimes", doc.get("__file__")
    )
    _check_regimes_feasible(regimes, design, doc.get("__file__"))
    return regimes


def _check_regimes_feasible(regimes, design: SmartDesign, filename=None) -> None:
    """Every rule must pick from the feasible set of each reachable cell."""
    for i, regime in enumerate(regimes):
        for (stage, prior, resp), options in design.feasible.items():
            if stage == 1:
                if regime.stage1 not in options:
                    raise SchemaError(
                        f"/regimes/{i}",
                        f"regime {regime.label or i} assigns infeasible stage-1 "
                        f"treatment {regime.stage1} for cell {(stage, prior, resp)!r}",
                        filename,
                    )
                continue
            if prior and prior[0] != regime.stage1:
                continue  # cell unreachable under this regime
            action = regime.rules.get((stage, resp))
            if action is None:
                raise SchemaError(
                    f"/regimes/{i}",
                    f"regime {regime.label or i} has no rule for stage {stage}, "
                    f"response {resp}",
                    filename,
                )
            if action not in options:
                raise SchemaError(
                    f"/regimes/{i}",
                    f"regime {regime.label or i} assigns infeasible treatment "
                    f"{action} for cell {(stage, prior, resp)!r}",
                    filename,
                )


def _parse_control(text: str) -> ControlSpec:
    """Parse 'fixed:47.5' or 'arm:0'."""
    kind, _, value = text.partition(":")
    try:
        if kind == "fixed":
            return ControlSpec.fixed(float(value))
        if kind == "arm":
            return ControlSpec.arm(int(value))
    except ValueError:
        pass
    raise SchemaError(
        "/control", f"expected 'fixed:<value>' or 'arm:<code>', got {text!r}"
    )


def _qterms_for(estimator: str, qterms_path, design=None):
    if estimator == "ipwe":
        return None
    if qterms_path is None:
        raise SchemaError(
            "/q_terms",
            f"estimator {estimator!r} needs stage working models (--q-terms)",
        )
    qt = _load_qterms(qterms_path)
    if design is not None and len(qt) != design.num_stages:
        raise SchemaError(
            "/stages",
            f"expected {design.num_stages} stage term lists, got {len(qt)}",
            str(qterms_path),
        )
    return qt


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _aligned(header, rows) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(cells[0], widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells[1:]:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _fmt(x, nd=3) -> str:
    return f"{x:.{nd}f}"


# ---------------------------------------------------------------------------
# validate


def _check_info_bracket(plan: iomod.PlanSpec, design: SmartDesign) -> list[str]:
    """Appendix-style sanity bracket for declared information proportions.

    The information fraction at an interim must lie between the expected
    fraction of patients with complete follow-up and the expected fraction
    enrolled.  Checked only when the final analysis covers full follow-up
    for every enrollee, where both brackets are exact.
    """
    if plan.info_proportions is None:
        return []
    gap = sum(design.stage_gap_days)
    final = plan.analysis_days[-1]
    if plan.enrollment.cdf(final - gap) < 1.0:
        return ["info proportions declared but final analysis precedes full follow-up; bracket not checked"]
    notes = []
    for s, (day, p) in enumerate(zip(plan.analysis_days, plan.info_proportions)):
        lo = plan.enrollment.cdf(day - gap)
        hi = plan.enrollment.cdf(day)
        if not lo - 1e-9 <= p <= hi + 1e-9:
            raise SchemaError(
                f"/info_proportions/{s}",
                f"proportion {p:g} outside the completed/enrolled bracket "
                f"[{lo:.3f}, {hi:.3f}] at day {day:g}",
                plan.name or None,
            )
        notes.append(
            f"info proportion {p:g} at day {day:g} within [{lo:.3f}, {hi:.3f}]"
        )
    return notes


def cmd_validate(args) -> int:
    design = None
    if args.design:
        design = _load_design(args.design)
        print(f"ok design: {design.name or args.design} "
              f"({design.num_stages} stages, {len(design.feasible)} cells)")
    model = None
    if args.model:
        model = _load_model(args.model)
        if design is not None:
            try:
                from .simulate import simulate_cohort

                simulate_cohort(
                    model, design, np.zeros(2), np.random.default_rng(0)
                )
            except (ValueError, DesignError, EstimationError) as exc:
                raise SchemaError(
                    "", f"model incompatible with design: {exc}", args.model
                ) from None
        print(f"ok model: {model.name or args.model}")
    if args.regimes:
        if design is None:
            raise SchemaError("/regimes", "validating regimes requires --design")
        regimes = _load_regimes(args.regimes, design)
        print(f"ok regimes: {len(regimes)} rule tables, all feasible")
    if args.q_terms:
        qt = _load_qterms(args.q_terms)
        if design is not None and len(qt) != design.num_stages:
            raise SchemaError(
                "/stages",
                f"expected {design.num_stages} stage term lists, got {len(qt)}",
                args.q_terms,
            )
        print(f"ok working models: {len(qt)} stages")
    if args.plan:
        plan = _load_plan(args.plan)
        if design is not None:
            for note in _check_info_bracket(plan, design):
                print(f"   {note}")
        print(f"ok plan: {plan.estimator}, {plan.family}/{plan.statistic}, "
              f"N={plan.N}, analyses at {list(plan.analysis_days)}")
    for snap_path in args.snapshot or []:
        if design is None:
            raise SchemaError("/snapshot", "validating a snapshot requires --design")
        snap = read_snapshot_csv(snap_path, design)
        print(f"ok snapshot: {snap_path} (n={snap.n} at day {snap.t:g}, "
              f"{int(snap.delta.sum())} complete)")
    print("all inputs valid")
    return 0


# ---------------------------------------------------------------------------
# boundaries


def _simulated_null_cov(design, model, regimes, plan, qt, *, pilot_n, pilot_reps, seed):
    samples = replicate_contrasts(
        design,
        model,
        regimes,
        control=plan.control,
        q_terms=qt,
        enrollment=plan.enrollment,
        analysis_days=plan.analysis_days,
        n=pilot_n,
        reps=pilot_reps,
        estimator=plan.estimator,
        nu_method=plan.nu_method,
        ipwe_normalized=plan.ipwe_normalized,
        seed=seed,
    )
    return null_covariance_from_samples(samples)


def _estimates_for_snapshots(snap_paths, design, regimes, estimator, qt, control,
                             nu_method="average", ipwe_normalized=True):
    snaps = sorted(
        (read_snapshot_csv(p, design) for p in snap_paths), key=lambda s: s.t
    )
    ests = []
    for snap in snaps:
        if estimator == "aipwe":
            snap = snap.completers()
        ests.append(
            stacked_estimate(
                snap,
                design,
                regimes,
                estimator=estimator,
                q_terms=qt,
                control=control,
                nu_method=nu_method,
                ipwe_normalized=ipwe_normalized,
            )
        )
    return ests


def _decision_report(ests, boundaries, delta=0.0):
    """Decision narrative and JSON payload for each boundary family."""
    lines: list[str] = []
    payload: dict = {}
    for title, spec in boundaries.items():
        decisions = []
        for s, est in enumerate(ests, start=1):
            zs = z_statistics(est, delta=delta)
            if spec.statistic == "chi2":
                stat, _ = chi_square_statistic(zs, contrast_correlation(est))
                stats, labels = [stat], ("homogeneity",)
            else:
                stats, labels = zs, est.labels
            d = decide(stats, spec, s)
            lines.append(f"[{title}] " + reportmod.format_decision(d, spec, labels))
            decisions.append(
                {
                    "analysis": s,
                    "analysis_day": est.t,
                    "action": d.action,
                    "crossed": [labels[j] for j in d.crossed],
                    "boundary": d.boundary,
                }
            )
            if d.stopped:
                break
        payload[title] = {
            "family": spec.family,
            "statistic": spec.statistic,
            "values": [float(c) for c in spec.values],
            "attained": spec.attained,
            "decisions": decisions,
        }
    return lines, payload


def cmd_boundaries(args) -> int:
    _announce_seed(args)
    t0 = time.perf_counter()
    out = _ensure_out(args.out)
    design = _load_design(args.design)
    plan = _load_plan(args.plan)
    regimes = (
        _load_regimes(args.regimes, design)
        if args.regimes
        else enumerate_embedded_regimes(design)
    )
    qt = _qterms_for(plan.estimator, args.q_terms, design)
    if args.null_cov:
        doc = load_document(args.null_cov, "null-covariance")
        null_cov = iomod.null_covariance_from_dict(doc, "", doc.get("__file__"))
    else:
        if not args.model:
            raise SchemaError(
                "/model", "need --model to simulate the correlation (or --null-cov)"
            )
        model = _load_model(args.model)
        null_cov = _simulated_null_cov(
            design, model, regimes, plan, qt,
            pilot_n=args.pilot_n, pilot_reps=args.pilot_reps, seed=args.seed,
        )
        save_document(
            out / "null_covariance.json",
            "null-covariance",
            iomod.null_covariance_to_dict(null_cov),
        )
    if plan.info_proportions is not None:
        null_cov = replace(null_cov, info_proportions=plan.info_proportions)
    solved: dict[str, object] = {}
    for family in args.families:
        spec = solve_boundaries(
            null_cov,
            alpha=plan.alpha,
            family=family,
            statistic=plan.statistic,
            seed=args.seed,
            reps=args.chi_reps,
        )
        solved[{"pocock": "Pocock", "obf": "OBF"}[family]] = spec
        save_document(
            out / f"boundary_{family}.json", "boundary", iomod.boundary_to_dict(spec)
        )
        vals = ", ".join(f"{c:.2f}" for c in spec.values)
        print(f"{family}: ({vals})  attained alpha {spec.attained:.4f}")
    crit_rows = [
        (s, family.lower(), f"{spec.boundary_at(s):.6g}",
         f"{null_cov.info_proportions[s - 1]:.6g}")
        for family, spec in solved.items()
        for s in range(1, spec.num_analyses + 1)
    ]
    _write_csv(
        out / "boundaries.csv",
        ("analysis", "family", "critical_value", "info_proportion"),
        crit_rows,
    )
    reportmod.render_boundary_figure(out / "boundaries.png", solved)
    payload: dict = {
        "alpha": plan.alpha,
        "statistic": plan.statistic,
        "info_proportions": list(null_cov.info_proportions),
        "boundaries": {
            k: iomod.boundary_to_dict(v) for k, v in solved.items()
        },
    }
    if args.snapshot:
        ests = _estimates_for_snapshots(
            args.snapshot, design, regimes, plan.estimator, qt, plan.control,
            plan.nu_method, plan.ipwe_normalized,
        )
        first = next(iter(solved.values()))
        rows = reportmod.analysis_rows(ests, first, delta=plan.delta)
        reportmod.write_rows_csv(out / "report.csv", rows)
        table = reportmod.format_analysis_table(
            ests, solved, delta=plan.delta, value_scale=args.value_scale
        )
        lines, decision_payload = _decision_report(ests, solved, plan.delta)
        (out / "report.txt").write_text(table + "\n" + "\n".join(lines) + "\n")
        reportmod.render_analysis_figure(out / "report.png", rows)
        print(table, end="")
        for line in lines:
            print(line)
        payload["estimates"] = {
            "estimator": plan.estimator,
            "analysis_days": [est.t for est in ests],
            "labels": list(ests[0].labels),
            "values": [np.asarray(est.values).tolist() for est in ests],
            "ses": [np.sqrt(est.contrast_variances()).tolist() for est in ests],
            "zs": [z_statistics(est, delta=plan.delta).tolist() for est in ests],
        }
        payload["decisions"] = decision_payload
    save_document(out / "boundaries.json", "boundaries-report", payload)
    _write_manifest(out, "boundaries", args.seed, payload, t0)
    return 0


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    t0 = time.perf_counter()
    out = _ensure_out(args.out)
    design = _load_design(args.design)
    regimes = (
        _load_regimes(args.regimes, design)
        if args.regimes
        else enumerate_embedded_regimes(design)
    )
    control = _parse_control(args.control)
    qt = _qterms_for(args.estimator, args.q_terms, design)
    ests = _estimates_for_snapshots(
        args.snapshot, design, regimes, args.estimator, qt, control
    )
    boundaries: dict[str, object] = {}
    for path in args.boundary or []:
        doc = load_document(path, "boundary")
        spec = iomod.boundary_from_dict(doc, "", doc.get("__file__"))
        if spec.num_analyses != len(ests):
            raise SchemaError(
                "/num_analyses",
                f"boundary plans {spec.num_analyses} analyses but "
                f"{len(ests)} snapshots were given",
                str(path),
            )
        title = {"pocock": "Pocock", "obf": "OBF"}.get(spec.family, spec.family)
        boundaries[title] = spec
    first = next(iter(boundaries.values()), None)
    rows = reportmod.analysis_rows(ests, first, delta=args.delta)
    reportmod.write_rows_csv(out / "analysis.csv", rows)
    table = reportmod.format_analysis_table(
        ests, boundaries, delta=args.delta, value_scale=args.value_scale
    )
    lines, decision_payload = _decision_report(ests, boundaries, args.delta)
    text = table + ("\n" + "\n".join(lines) + "\n" if lines else "")
    (out / "analysis.txt").write_text(text)
    reportmod.render_analysis_figure(out / "analysis.png", rows)
    print(text, end="")
    payload = {
        "estimator": args.estimator,
        "delta": args.delta,
        "analysis_days": [est.t for est in ests],
        "enrolled": [est.n for est in ests],
        "labels": list(ests[0].labels),
        "values": [np.asarray(est.values).tolist() for est in ests],
        "ses": [np.sqrt(est.contrast_variances()).tolist() for est in ests],
        "zs": [z_statistics(est, delta=args.delta).tolist() for est in ests],
        "decisions": decision_payload,
    }
    save_document(out / "analysis.json", "analysis", payload)
    _write_manifest(out, "analyze", None, payload, t0)
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    _announce_seed(args)
    t0 = time.perf_counter()
    out = _ensure_out(args.out)
    design = _load_design(args.design)
    model = _load_model(args.model)
    plan = _load_plan(args.plan)
    regimes = (
        _load_regimes(args.regimes, design)
        if args.regimes
        else enumerate_embedded_regimes(design)
    )
    qt = _qterms_for(plan.estimator, args.q_terms, design)
    if args.boundary:
        doc = load_document(args.boundary, "boundary")
        spec = iomod.boundary_from_dict(doc, "", doc.get("__file__"))
    else:
        null_cov = _simulated_null_cov(
            design, model, regimes, plan, qt,
            pilot_n=args.pilot_n, pilot_reps=args.pilot_reps, seed=args.seed,
        )
        spec = solve_boundaries(
            null_cov,
            alpha=plan.alpha,
            family=plan.family,
            statistic=plan.statistic,
            seed=args.seed,
            reps=args.chi_reps,
        )
        save_document(
            out / f"boundary_{plan.family}.json",
            "boundary",
            iomod.boundary_to_dict(spec),
        )
    config = ExperimentConfig(
        design=design,
        model=model,
        regimes=regimes,
        control=plan.control,
        enrollment=plan.enrollment,
        analysis_days=plan.analysis_days,
        N=plan.N,
        estimator=plan.estimator,
        q_terms=qt,
        delta=plan.delta,
        nu_method=plan.nu_method,
        ipwe_normalized=plan.ipwe_normalized,
    )
    mc = run_experiment(config, spec, reps=args.reps, seed=args.seed)
    summary = mc.summary()
    rows = []
    for s, day in enumerate(mc.analysis_days):
        for j, label in enumerate(mc.labels):
            rows.append(
                {
                    "analysis_day": day,
                    "regime": label,
                    "value": float(mc.value_mean()[s, j]),
                    "se": float(mc.se_mean()[s, j]),
                    "z": float(mc.statistics[:, s, j].mean()),
                    "boundary": float(spec.boundary_at(s + 1)),
                }
            )
    reportmod.write_rows_csv(out / "report.csv", rows)
    save_document(out / "report.json", "simulation-report", summary)
    ess, ess_sd = mc.expected_sample_size()
    stop, stop_sd = mc.expected_stop_day()
    print(
        f"{plan.estimator} at N={plan.N}: early reject {mc.early_rate:.3f}, "
        f"total reject {mc.total_rate:.3f}, E(SS) {ess:.0f} ({ess_sd:.0f}), "
        f"E(Stop) {stop:.0f} ({stop_sd:.0f})"
    )
    _write_manifest(out, "simulate", args.seed, summary, t0)
    return 0


# ---------------------------------------------------------------------------
# power / samplesize


def _alternative_for(args, need_model=True):
    if args.alt:
        doc = load_document(args.alt, "alternative")
        return iomod.alternative_from_dict(doc, "", doc.get("__file__"))
    if not (args.design and args.model and args.plan):
        raise SchemaError(
            "/alt",
            "need either --alt or the pilot inputs --design/--model/--plan",
        )
    design = _load_design(args.design)
    model = _load_model(args.model)
    plan = _load_plan(args.plan)
    regimes = (
        _load_regimes(args.regimes, design)
        if args.regimes
        else enumerate_embedded_regimes(design)
    )
    qt = _qterms_for(plan.estimator, args.q_terms, design)
    alt = pilot_alternative(
        design,
        model,
        regimes,
        control=plan.control,
        q_terms=qt,
        delta=plan.delta,
        enrollment=plan.enrollment,
        analysis_days=plan.analysis_days,
        n_pilot=args.pilot_n,
        reps=args.pilot_reps,
        estimator=plan.estimator,
        nu_method=plan.nu_method,
        ipwe_normalized=plan.ipwe_normalized,
        seed=args.seed,
    )
    if args.save_alt:
        save_document(args.save_alt, "alternative", iomod.alternative_to_dict(alt))
    return alt


def _boundary_for(args, alt):
    if args.boundary:
        doc = load_document(args.boundary, "boundary")
        return iomod.boundary_from_dict(doc, "", doc.get("__file__"))
    plan = _load_plan(args.plan) if args.plan else None
    if plan is None:
        raise SchemaError("/boundary", "need either --boundary or --plan to solve one")
    return solve_boundaries(
        alt.null_cov,
        alpha=plan.alpha,
        family=plan.family,
        statistic=plan.statistic,
        seed=args.seed,
    )


def cmd_power(args) -> int:
    _announce_seed(args)
    t0 = time.perf_counter()
    alt = _alternative_for(args)
    spec = _boundary_for(args, alt)
    result = power(
        args.n, alt, spec, method=args.method, reps=args.reps, seed=args.seed
    )
    payload = {
        "N": result.N,
        "power": result.total,
        "method": result.method,
        "per_analysis": list(result.per_analysis),
        "err": result.err,
        "boundary": [float(c) for c in spec.values],
        "family": spec.family,
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        out = _ensure_out(args.out)
        save_document(out / "power.json", "power", payload)
        _write_manifest(out, "power", args.seed, payload, t0)
    return 0


def cmd_samplesize(args) -> int:
    _announce_seed(args)
    t0 = time.perf_counter()
    alt = _alternative_for(args)
    spec = _boundary_for(args, alt)
    result = sample_size_search(
        args.target,
        alt,
        spec,
        n0=args.n0,
        step=args.step,
        discount=args.discount,
        reps=args.reps,
        method=args.method,
        seed=args.seed,
    )
    payload = {
        "N": result.N,
        "power": result.power,
        "target": result.target,
        "evaluations": {str(k): v for k, v in sorted(result.evaluations.items())},
        "boundary": [float(c) for c in spec.values],
        "family": spec.family,
    }
    print(json.dumps(payload, indent=2))
    if args.out:
        out = _ensure_out(args.out)
        save_document(out / "samplesize.json", "samplesize", payload)
        _write_manifest(out, "samplesize", args.seed, payload, t0)
    return 0


# ---------------------------------------------------------------------------
# reproduce presets


def _pain_components(scenario: str, estimator: str):
    design = fixtures.pain_design()
    model = fixtures.pain_model(scenario)
    regimes = enumerate_embedded_regimes(design)
    control = ControlSpec.fixed(47.5)
    qt = None if estimator == "ipwe" else fixtures.pain_q_terms()
    return design, model, regimes, control, qt


def _pocock_for(design, model, regimes, control, qt, estimator, enrollment,
                days, args, statistic="z", family="pocock"):
    samples = replicate_contrasts(
        design, model, regimes,
        control=control, q_terms=qt, enrollment=enrollment,
        analysis_days=days, n=args.pilot_n, reps=args.pilot_reps,
        estimator=estimator, seed=args.seed,
    )
    null_cov = null_covariance_from_samples(samples)
    return solve_boundaries(
        null_cov, alpha=0.05, family=family, statistic=statistic,
        seed=args.seed, reps=args.chi_reps,
    ), null_cov


_PAIN_DAYS = (500.0, 1200.0)
_TABLE1_N = {"ipwe": 1212, "aipwe": 872, "iaipwe": 869}


def _preset_table1(args, out: Path) -> dict:
    enrollment = fixtures.uniform_enrollment()
    rows = []
    for estimator in ("ipwe", "aipwe", "iaipwe"):
        design, null_model, regimes, control, qt = _pain_components("null", estimator)
        n_planned = _TABLE1_N[estimator]
        boundary, _ = _pocock_for(
            design, null_model, regimes, control, qt, estimator,
            enrollment, _PAIN_DAYS, args,
        )
        for scenario in ("null", "stage1"):
            config = ExperimentConfig(
                design=design,
                model=fixtures.pain_model(scenario),
                regimes=regimes,
                control=control,
                enrollment=enrollment,
                analysis_days=_PAIN_DAYS,
                N=n_planned,
                estimator=estimator,
                q_terms=qt,
            )
            mc = run_experiment(config, boundary, reps=args.reps, seed=args.seed)
            ess, ess_sd = mc.expected_sample_size()
            stop, stop_sd = mc.expected_stop_day()
            rows.append(
                {
                    "scenario": scenario,
                    "estimator": estimator,
                    "N": n_planned,
                    "early_reject": mc.early_rate,
                    "total_reject": mc.total_rate,
                    "expected_sample_size": ess,
                    "expected_sample_size_sd": ess_sd,
                    "expected_stop_day": stop,
                    "expected_stop_day_sd": stop_sd,
                }
            )
    header = (
        "scenario", "estimator", "N", "early_reject", "total_reject",
        "expected_sample_size", "expected_stop_day",
    )
    table_rows = [
        (
            r["scenario"], r["estimator"], r["N"], _fmt(r["early_reject"]),
            _fmt(r["total_reject"]),
            f"{r['expected_sample_size']:.0f} ({r['expected_sample_size_sd']:.0f})",
            f"{r['expected_stop_day']:.0f} ({r['expected_stop_day_sd']:.0f})",
        )
        for r in rows
    ]
    text = _aligned(header, table_rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    _write_csv(out / "report.csv", header,
               [[r[h.replace(" ", "_")] if h in r else r[h] for h in header] for r in rows])
    return {"rows": rows, "reps": args.reps, "boundary_family": "pocock"}


def _preset_table2(args, out: Path) -> dict:
    design, model, regimes, control, qt = _pain_components("stage1", "iaipwe")
    config = ExperimentConfig(
        design=design,
        model=model,
        regimes=regimes,
        control=control,
        enrollment=fixtures.uniform_enrollment(),
        analysis_days=_PAIN_DAYS,
        N=_TABLE1_N["iaipwe"],
        estimator="iaipwe",
        q_terms=qt,
    )
    table = mse_ratio_table(config, reps=args.reps, seed=args.seed)
    header = ("analysis_day", "regime", "estimator", "mc_mean", "mc_sd", "mse_ratio")
    rows = []
    for s, day in enumerate(table["analysis_days"]):
        for j, label in enumerate(table["labels"]):
            for est, block in table["estimators"].items():
                rows.append(
                    (day, label, est, _fmt(block["mc_mean"][s][j], 2),
                     _fmt(block["mc_sd"][s][j], 2), _fmt(block["mse_ratio"][s][j], 2))
                )
    _write_csv(out / "report.csv", header, rows)
    text = _aligned(header, rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    return table


def _preset_table3(args, out: Path) -> dict:
    compositions = ((50, 10, 10), (30, 10, 30))
    design, _, regimes, control, qt = _pain_components("stage1", "iaipwe")
    n_planned = 839
    rows = []
    for comp in compositions:
        enrollment = fixtures.staged_enrollment(
            *comp, analysis_day=_PAIN_DAYS[0], stage_gap_days=design.stage_gap_days
        )
        boundary, _ = _pocock_for(
            design, fixtures.pain_model("null"), regimes, control, qt,
            "iaipwe", enrollment, _PAIN_DAYS, args,
        )
        config = ExperimentConfig(
            design=design,
            model=fixtures.pain_model("stage1"),
            regimes=regimes,
            control=control,
            enrollment=enrollment,
            analysis_days=_PAIN_DAYS,
            N=n_planned,
            estimator="iaipwe",
            q_terms=qt,
        )
        mc = run_experiment(config, boundary, reps=args.reps, seed=args.seed)
        ess, ess_sd = mc.expected_sample_size()
        rows.append(
            {
                "composition": list(comp),
                "N": n_planned,
                "early_reject": mc.early_rate,
                "total_reject": mc.total_rate,
                "expected_sample_size": ess,
                "expected_sample_size_sd": ess_sd,
            }
        )
    header = ("pct_complete", "pct_stage1_only", "pct_enrolled_only", "N",
              "early_reject", "total_reject", "expected_sample_size")
    table_rows = [
        (r["composition"][0], r["composition"][1], r["composition"][2], r["N"],
         _fmt(r["early_reject"]), _fmt(r["total_reject"]),
         f"{r['expected_sample_size']:.0f} ({r['expected_sample_size_sd']:.0f})")
        for r in rows
    ]
    text = _aligned(header, table_rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    _write_csv(out / "report.csv", header, table_rows)
    return {"rows": rows, "reps": args.reps, "estimator": "iaipwe"}


def _registry_components(scenario: str):
    design = fixtures.registry_design()
    model = fixtures.registry_model(scenario)
    regimes = enumerate_embedded_regimes(design)
    control = ControlSpec.fixed(47.5)
    qt = fixtures.registry_q_terms()
    return design, model, regimes, control, qt


def _preset_chi2(args, out: Path) -> dict:
    design, model, regimes, control, qt = _registry_components("null")
    enrollment = fixtures.uniform_enrollment()
    days = (500.0, 1200.0)
    n_planned = 500
    boundary, null_cov = _pocock_for(
        design, model, regimes, control, qt, "iaipwe", enrollment, days, args,
        statistic="chi2",
    )
    config = ExperimentConfig(
        design=design,
        model=model,
        regimes=regimes,
        control=control,
        enrollment=enrollment,
        analysis_days=days,
        N=n_planned,
        estimator="iaipwe",
        q_terms=qt,
    )
    mc = run_experiment(config, boundary, reps=args.reps, seed=args.seed)
    payload = {
        "statistic": "chi2",
        "N": n_planned,
        "boundary": [float(c) for c in boundary.values],
        "attained_alpha_at_solve": boundary.attained,
        "type_i_rate": mc.total_rate,
        "early_rate": mc.early_rate,
        "reps": args.reps,
    }
    text = _aligned(
        ("quantity", "value"),
        [("chi2 boundary", ", ".join(f"{c:.2f}" for c in boundary.values)),
         ("type I (total reject)", _fmt(mc.total_rate)),
         ("early reject", _fmt(mc.early_rate))],
    )
    (out / "report.txt").write_text(text)
    print(text, end="")
    _write_csv(out / "report.csv", ("quantity", "value"),
               [("type_i_rate", mc.total_rate), ("early_rate", mc.early_rate)])
    return payload


def _preset_misspec(args, out: Path) -> dict:
    design, model, regimes, control, _ = _pain_components("stage1", "iaipwe")
    truth = list(fixtures.pain_targets("stage1"))
    n_planned = 2000
    results = {}
    for tag, q_mis in (("correct", False), ("misspecified", True)):
        contrasts = replicate_contrasts(
            design, model, regimes,
            control=control,
            q_terms=fixtures.pain_q_terms(misspecified=q_mis),
            enrollment=fixtures.uniform_enrollment(),
            analysis_days=(_PAIN_DAYS[0],),
            n=n_planned,
            reps=args.reps,
            estimator="iaipwe",
            seed=args.seed,
        )
        values = contrasts[:, 0, :] + control.value
        results[tag] = {
            "mc_mean": values.mean(axis=0).tolist(),
            "mc_se": (values.std(axis=0, ddof=1) / np.sqrt(len(values))).tolist(),
        }
    header = ("regime", "truth", "correct_mean", "misspecified_mean", "mc_se")
    rows = [
        (regimes[j].label, _fmt(truth[j], 2),
         _fmt(results["correct"]["mc_mean"][j], 2),
         _fmt(results["misspecified"]["mc_mean"][j], 2),
         _fmt(results["misspecified"]["mc_se"][j], 3))
        for j in range(len(regimes))
    ]
    text = _aligned(header, rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    _write_csv(out / "report.csv", header, rows)
    return {
        "N": n_planned,
        "analysis_day": _PAIN_DAYS[0],
        "truth": truth,
        "labels": [r.label for r in regimes],
        "results": results,
        "reps": args.reps,
    }


def _preset_increments(args, out: Path) -> dict:
    design, model, regimes, control, qt = _registry_components("null")
    days = (500.0, 1200.0)
    n_planned = 600
    contrasts = replicate_contrasts(
        design, model, regimes,
        control=control, q_terms=qt,
        enrollment=fixtures.uniform_enrollment(),
        analysis_days=days,
        n=n_planned,
        reps=args.reps,
        estimator="iaipwe",
        seed=args.seed,
    )
    early, late = contrasts[:, 0, :], contrasts[:, 1, :]
    diff = early - late
    prod = (diff - diff.mean(axis=0)) * (late - late.mean(axis=0))
    cov = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(len(prod))
    header = ("regime", "cov_increment_final", "mc_se", "cov_over_se")
    rows = [
        (regimes[j].label, f"{cov[j]:.5f}", f"{se[j]:.5f}", _fmt(cov[j] / se[j], 2))
        for j in range(len(regimes))
    ]
    text = _aligned(header, rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    _write_csv(out / "report.csv", header, rows)
    return {
        "N": n_planned,
        "analysis_days": list(days),
        "labels": [r.label for r in regimes],
        "covariances": cov.tolist(),
        "mc_ses": se.tolist(),
        "reps": args.reps,
    }


def _preset_s3(args, out: Path) -> dict:
    design, model, regimes, control, qt = _pain_components("null", "iaipwe")
    days = (400.0, 800.0, 1200.0)
    n_planned = 600
    enrollment = fixtures.uniform_enrollment()
    samples = replicate_contrasts(
        design, model, regimes,
        control=control, q_terms=qt, enrollment=enrollment,
        analysis_days=days, n=args.pilot_n, reps=args.pilot_reps,
        estimator="iaipwe", seed=args.seed,
    )
    null_cov = null_covariance_from_samples(samples)
    payload: dict = {"analysis_days": list(days), "N": n_planned, "families": {}}
    rows = []
    for family in ("pocock", "obf"):
        spec = solve_boundaries(
            null_cov, alpha=0.05, family=family, seed=args.seed
        )
        config = ExperimentConfig(
            design=design,
            model=model,
            regimes=regimes,
            control=control,
            enrollment=enrollment,
            analysis_days=days,
            N=n_planned,
            estimator="iaipwe",
            q_terms=qt,
        )
        mc = run_experiment(config, spec, reps=args.reps, seed=args.seed)
        payload["families"][family] = {
            "boundary": [float(c) for c in spec.values],
            "attained_alpha_at_solve": spec.attained,
            "type_i_rate": mc.total_rate,
            "early_rate": mc.early_rate,
        }
        rows.append(
            (family, ", ".join(f"{c:.2f}" for c in spec.values),
             _fmt(spec.attained, 4), _fmt(mc.total_rate), _fmt(mc.early_rate))
        )
    header = ("family", "boundary", "solved_alpha", "type_i_rate", "early_rate")
    text = _aligned(header, rows)
    (out / "report.txt").write_text(text)
    print(text, end="")
    _write_csv(out / "report.csv", header, rows)
    payload["reps"] = args.reps
    return payload


def _preset_pragmatic(args, out: Path) -> dict:
    design, model, regimes, control, _ = _pain_components("stage1", "ipwe")
    enrollment = fixtures.uniform_enrollment()
    alt_ip = pilot_alternative(
        design, model, regimes,
        control=control, q_terms=None,
        enrollment=enrollment, analysis_days=_PAIN_DAYS,
        n_pilot=args.pilot_n, reps=args.pilot_reps,
        estimator="ipwe", seed=args.seed,
    )
    bound_ip = solve_boundaries(
        alt_ip.null_cov, alpha=0.05, family="pocock", seed=args.seed
    )
    search = sample_size_search(
        0.8, alt_ip, bound_ip, method="integral", seed=args.seed
    )
    qt = fixtures.pain_q_terms()
    bound_ia, _ = _pocock_for(
        design, fixtures.pain_model("null"), regimes, control, qt, "iaipwe",
        enrollment, _PAIN_DAYS, args,
    )
    config = ExperimentConfig(
        design=design,
        model=model,
        regimes=regimes,
        control=control,
        enrollment=enrollment,
        analysis_days=_PAIN_DAYS,
        N=search.N,
        estimator="iaipwe",
        q_terms=qt,
    )
    mc = run_experiment(config, bound_ia, reps=args.reps, seed=args.seed)
    ess, ess_sd = mc.expected_sample_size()
    payload = {
        "planned_with": "ipwe",
        "planned_N": search.N,
        "planned_power": search.power,
        "monitored_with": "iaipwe",
        "early_reject": mc.early_rate,
        "total_reject": mc.total_rate,
        "expected_sample_size": ess,
        "expected_sample_size_sd": ess_sd,
        "reps": args.reps,
    }
    text = _aligned(
        ("quantity", "value"),
        [("planned N (ipwe)", search.N),
         ("power at plan", _fmt(search.power)),
         ("monitored estimator", "iaipwe"),
         ("early reject", _fmt(mc.early_rate)),
         ("total reject", _fmt(mc.total_rate)),
         ("expected sample size", f"{ess:.0f} ({ess_sd:.0f})")],
    )
    (out / "report.txt").write_text(text)
    print(text, end="")
    _write_csv(out / "report.csv", ("quantity", "value"),
               [(k, v) for k, v in payload.items()])
    return payload


def _preset_case_study(args, out: Path) -> dict:
    design = fixtures.bp_design()
    model = fixtures.bp_model()
    regimes = enumerate_embedded_regimes(design)
    control = ControlSpec.fixed(fixtures.BP_CONTROL_VALUE)
    estimator = args.estimator
    qt = None if estimator == "ipwe" else fixtures.bp_q_terms()
    days = (500.0, 1182.0)
    n_planned = 284
    samples = replicate_contrasts(
        design, model, regimes,
        control=control, q_terms=qt,
        enrollment=fixtures.uniform_enrollment(1000.0),
        analysis_days=days, n=n_planned, reps=args.pilot_reps,
        estimator=estimator, seed=args.seed,
    )
    null_cov = null_covariance_from_samples(samples)
    solved = {
        "Pocock": solve_boundaries(null_cov, alpha=0.05, family="pocock", seed=args.seed),
        "OBF": solve_boundaries(null_cov, alpha=0.05, family="obf", seed=args.seed),
    }
    for title, spec in solved.items():
        save_document(
            out / f"boundary_{spec.family}.json", "boundary",
            iomod.boundary_to_dict(spec),
        )
    with resources.as_file(resources.files("smartmon") / "data") as data_dir:
        ests = _estimates_for_snapshots(
            [data_dir / "case_interim.csv", data_dir / "case_final.csv"],
            design, regimes, estimator, qt, control,
        )
    rows = reportmod.analysis_rows(ests, solved["Pocock"])
    reportmod.write_rows_csv(out / "report.csv", rows)
    table = reportmod.format_analysis_table(
        ests, solved, value_scale=0.1, analysis_names=("interim", "final")
    )
    lines, decision_payload = _decision_report(ests, solved)
    text = table + "\n" + "\n".join(lines) + "\n"
    (out / "report.txt").write_text(text)
    reportmod.render_analysis_figure(out / "report.png", rows)
    reportmod.render_boundary_figure(out / "boundaries.png", solved)
    print(text, end="")
    return {
        "N": n_planned,
        "estimator": estimator,
        "analysis_days": list(days),
        "info_proportions": list(null_cov.info_proportions),
        "labels": list(ests[0].labels),
        "values": [np.asarray(est.values).tolist() for est in ests],
        "ses": [np.sqrt(est.contrast_variances()).tolist() for est in ests],
        "zs": [z_statistics(est).tolist() for est in ests],
        "boundaries": {k: [float(c) for c in v.values] for k, v in solved.items()},
        "decisions": decision_payload,
        "pilot_reps": args.pilot_reps,
    }


_PRESETS = {
    "table1": _preset_table1,
    "table2": _preset_table2,
    "table3": _preset_table3,
    "appendixG-chi2": _preset_chi2,
    "appendixG-misspec": _preset_misspec,
    "appendixG-increments": _preset_increments,
    "appendixG-s3": _preset_s3,
    "case-study": _preset_case_study,
    "pragmatic": _preset_pragmatic,
}


def cmd_reproduce(args) -> int:
    _announce_seed(args)
    t0 = time.perf_counter()
    out = _ensure_out(args.out)
    runner = _PRESETS[args.preset]
    payload = dict(seed=args.seed, preset=args.preset)
    payload.update(runner(args, out))
    save_document(out / "report.json", "reproduction", payload)
    _write_manifest(out, f"reproduce {args.preset}", args.seed, payload, t0)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_seed(p) -> None:
    p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help="RNG seed (default %(default)s; printed)")


def _add_pilot(p, reps_default=1000) -> None:
    p.add_argument("--pilot-n", type=int, default=250,
                   help="pilot trial size for simulated correlations")
    p.add_argument("--pilot-reps", type=int, default=reps_default,
                   help="pilot replications for simulated correlations")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smartmon",
        description="Interim monitoring of multi-stage randomized trials "
                    "with partially observed enrollees.",
    )
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("validate", help="check design/model/plan/snapshot documents")
    p.add_argument("--design", required=True)
    p.add_argument("--model")
    p.add_argument("--regimes")
    p.add_argument("--plan")
    p.add_argument("--q-terms")
    p.add_argument("--snapshot", action="append")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("boundaries", help="solve stopping boundaries for a plan")
    p.add_argument("--design", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--model")
    p.add_argument("--regimes")
    p.add_argument("--q-terms")
    p.add_argument("--null-cov", help="use a saved null covariance instead of a pilot")
    p.add_argument("--families", nargs="+", choices=("pocock", "obf"),
                   default=["pocock", "obf"])
    p.add_argument("--snapshot", action="append",
                   help="also estimate and print the full report table")
    p.add_argument("--value-scale", type=float, default=0.1,
                   help="display scale for values in the text table")
    p.add_argument("--chi-reps", type=int, default=200_000)
    p.add_argument("--out", required=True)
    _add_pilot(p)
    _add_seed(p)
    p.set_defaults(func=cmd_boundaries)

    p = sub.add_parser("analyze", help="estimate and test a snapshot dataset")
    p.add_argument("--design", required=True)
    p.add_argument("--snapshot", action="append", required=True,
                   help="snapshot CSV; repeat for multiple analyses")
    p.add_argument("--estimator", choices=("ipwe", "aipwe", "iaipwe"),
                   default="iaipwe")
    p.add_argument("--control", required=True,
                   help="'fixed:<value>' or 'arm:<stage-1 code>'")
    p.add_argument("--q-terms")
    p.add_argument("--regimes")
    p.add_argument("--boundary", action="append",
                   help="solved boundary JSON; repeat for several families")
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--value-scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="Monte Carlo operating characteristics")
    p.add_argument("--design", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--regimes")
    p.add_argument("--q-terms")
    p.add_argument("--boundary", help="solved boundary JSON (else a pilot solves one)")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--chi-reps", type=int, default=200_000)
    p.add_argument("--out", required=True)
    _add_pilot(p)
    _add_seed(p)
    p.set_defaults(func=cmd_simulate)

    for name, helptext in (
        ("power", "power at a fixed total sample size"),
        ("samplesize", "search for the total sample size attaining target power"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--alt", help="alternative JSON (else pilot from design/model/plan)")
        p.add_argument("--boundary", help="solved boundary JSON (else solved from plan)")
        p.add_argument("--design")
        p.add_argument("--model")
        p.add_argument("--plan")
        p.add_argument("--regimes")
        p.add_argument("--q-terms")
        p.add_argument("--save-alt", help="write the pilot alternative JSON here")
        p.add_argument("--method", choices=("integral", "simulated"),
                       default="simulated")
        p.add_argument("--reps", type=int, default=10_000,
                       help="draws for simulated power")
        p.add_argument("--out")
        _add_pilot(p)
        _add_seed(p)
        if name == "power":
            p.add_argument("--n", type=int, required=True)
            p.set_defaults(func=cmd_power)
        else:
            p.add_argument("--target", type=float, default=0.8)
            p.add_argument("--n0", type=int, default=50)
            p.add_argument("--step", type=float, default=10.0)
            p.add_argument("--discount", type=float, default=0.1)
            p.set_defaults(func=cmd_samplesize)

    p = sub.add_parser("reproduce", help="run a named desk-scale study preset")
    p.add_argument("preset", choices=sorted(_PRESETS))
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--estimator", choices=("ipwe", "aipwe", "iaipwe"),
                   default="iaipwe", help="estimator for the case-study preset")
    p.add_argument("--chi-reps", type=int, default=200_000)
    p.add_argument("--out", required=True)
    _add_pilot(p, reps_default=400)
    _add_seed(p)
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code in (0, None):
            return 0
        return 2
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DesignError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

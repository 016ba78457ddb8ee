"""Human-readable tables, delimited output, and figures for analyses.

The text table mirrors the case-study layout: one block per analysis with
regime, each boundary family's critical value, "value (SE)", and the test
statistic.  ``value_scale`` rescales the displayed value only (the classic
case-study table shows values at a tenth of their raw scale); JSON and CSV
always carry unscaled numbers.  Figures are rendered headlessly to files,
one per analysis artifact, next to the delimited output.
"""

from __future__ import annotations

import csv
from typing import Mapping, Sequence

import numpy as np

from .estimation import ValueEstimate
from .sequential import BoundarySpec, Decision, z_statistics

__all__ = [
    "analysis_rows",
    "format_analysis_table",
    "format_decision",
    "write_rows_csv",
    "render_analysis_figure",
    "render_boundary_figure",
    "REPORT_COLUMNS",
]

REPORT_COLUMNS = ("analysis_day", "regime", "value", "se", "z", "boundary")


def analysis_rows(
    estimates: Sequence[ValueEstimate],
    boundary: BoundarySpec | None = None,
    *,
    delta: float = 0.0,
) -> list[dict]:
    """Plot-ready rows: one per (analysis, regime), unscaled values."""
    rows = []
    for s, est in enumerate(estimates, start=1):
        zs = z_statistics(est, delta=delta)
        ses = np.sqrt(est.contrast_variances())
        crit = None if boundary is None else float(boundary.boundary_at(s))
        for j, label in enumerate(est.labels):
            rows.append(
                {
                    "analysis_day": est.t,
                    "regime": label,
                    "value": float(est.values[j]),
                    "se": float(ses[j]),
                    "z": float(zs[j]),
                    "boundary": crit,
                }
            )
    return rows


def write_rows_csv(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in REPORT_COLUMNS})


_ANALYSIS_TAGS = "abcdefghijklmnopqrstuvwxyz"


def format_analysis_table(
    estimates: Sequence[ValueEstimate],
    boundaries: Mapping[str, BoundarySpec],
    *,
    delta: float = 0.0,
    value_scale: float = 1.0,
    analysis_names: Sequence[str] | None = None,
) -> str:
    """Aligned text table of boundaries, values (SEs), and statistics.

    ``boundaries`` maps a column title (e.g. "Pocock", "OBF") to the solved
    boundary; every family gets its own critical-value column.
    """
    titles = list(boundaries)
    lines: list[str] = []
    scale_note = (
        f" (values x{value_scale:g})" if value_scale != 1.0 else ""
    )
    for s, est in enumerate(estimates, start=1):
        zs = z_statistics(est, delta=delta)
        ses = np.sqrt(est.contrast_variances())
        if analysis_names is not None:
            name = analysis_names[s - 1]
        else:
            name = f"analysis {s}"
        tag = _ANALYSIS_TAGS[(s - 1) % len(_ANALYSIS_TAGS)]
        header = ["Regime"] + titles + ["Value (SE)", "Z"]
        body = []
        for j, label in enumerate(est.labels):
            value_se = f"{est.values[j] * value_scale:.2f} ({ses[j]:.2f})"
            row = [label]
            row += [f"{boundaries[t].boundary_at(s):.2f}" for t in titles]
            row += [value_se, f"{zs[j]:.2f}"]
            body.append(row)
        widths = [
            max(len(header[c]), *(len(r[c]) for r in body))
            for c in range(len(header))
        ]
        lines.append(f"({tag}) {name}, day {est.t:g}{scale_note}")
        lines.append(
            "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()
        )
        lines.append("  ".join("-" * w for w in widths))
        for row in body:
            lines.append(
                "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            )
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def format_decision(
    decision: Decision, boundary: BoundarySpec, labels: Sequence[str]
) -> str:
    """One-line narrative of a monitoring decision."""
    c = boundary.boundary_at(decision.analysis)
    family = boundary.family
    if decision.action == "stop-reject":
        names = [labels[j] for j in decision.crossed]
        return (
            f"Stop and reject at analysis {decision.analysis}: "
            f"{', '.join(names)} exceed{'s' if len(names) == 1 else ''} the "
            f"{family} boundary {c:.2f}."
        )
    if decision.action == "continue":
        return (
            f"Continue past analysis {decision.analysis}: no statistic "
            f"exceeds the {family} boundary {c:.2f}."
        )
    return (
        f"Final analysis {decision.analysis}: fail to reject; no statistic "
        f"exceeds the {family} boundary {c:.2f}."
    )


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_analysis_figure(path, rows: Sequence[Mapping]) -> None:
    """Statistics-versus-boundary figure for the rows of one analysis run."""
    plt = _pyplot()
    days = sorted({row["analysis_day"] for row in rows})
    labels = list(dict.fromkeys(row["regime"] for row in rows))
    fig, (ax_v, ax_z) = plt.subplots(
        2, 1, figsize=(max(6.0, 1.1 * len(labels)), 7.0), sharex=True
    )
    x = np.arange(len(labels))
    width = 0.8 / max(len(days), 1)
    for i, day in enumerate(days):
        sub = {row["regime"]: row for row in rows if row["analysis_day"] == day}
        vals = np.array([sub[l]["value"] for l in labels])
        ses = np.array([sub[l]["se"] for l in labels])
        zs = np.array([sub[l]["z"] for l in labels])
        off = (i - (len(days) - 1) / 2) * width
        ax_v.errorbar(
            x + off, vals, yerr=1.96 * ses, fmt="o", capsize=3,
            label=f"day {day:g}",
        )
        ax_z.plot(x + off, zs, "o", label=f"day {day:g}")
        crit = next(
            row["boundary"] for row in rows if row["analysis_day"] == day
        )
        if crit is not None:
            ax_z.axhline(
                crit, linestyle="--", linewidth=1.0,
                color=f"C{i}", alpha=0.8,
            )
    ax_v.set_ylabel("value (95% CI)")
    ax_v.legend(loc="best", fontsize="small")
    ax_z.set_ylabel("statistic vs boundary")
    ax_z.set_xticks(x)
    ax_z.set_xticklabels(labels, rotation=30, ha="right", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_boundary_figure(path, boundaries: Mapping[str, BoundarySpec]) -> None:
    """Critical values by analysis for each solved boundary family."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for title, spec in boundaries.items():
        s = np.arange(1, spec.num_analyses + 1)
        ax.plot(s, list(spec.values), "o-", label=title)
    ax.set_xlabel("analysis")
    ax.set_ylabel("critical value")
    ax.set_xticks(np.arange(1, max(b.num_analyses for b in boundaries.values()) + 1))
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

"""Text tables and static figures for evaluation and comparison outputs."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .metrics import LOWER_IS_BETTER, METRIC_FIELDS, METRIC_LABELS, MetricsRecord
from .stats import ComparisonReport, compare_metric


def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return f"{v:.3f}"


def write_metrics_table(records: Sequence[MetricsRecord], path: Path) -> None:
    """One row per subject plus an ``Average`` row."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["Subject", *(METRIC_LABELS[m] for m in METRIC_FIELDS)])
        for r in records:
            w.writerow([r.subject_id, *(_fmt(getattr(r, m)) for m in METRIC_FIELDS)])
        avg = [float(np.mean([getattr(r, m) for r in records])) for m in METRIC_FIELDS]
        w.writerow(["Average", *(_fmt(v) for v in avg)])


def read_metrics_table(path: Path) -> list[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"evaluation table not found: {path}")
    label_to_field = {v: k for k, v in METRIC_LABELS.items()}
    with path.open() as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0][0] != "Subject":
        raise FormatError(f"{path}: not a metrics table")
    try:
        fields = [label_to_field[h] for h in rows[0][1:]]
    except KeyError as exc:
        raise FormatError(f"{path}: unknown column {exc}") from None
    out = []
    for row in rows[1:]:
        if row[0] == "Average":
            continue
        vals = {f: float(v) for f, v in zip(fields, row[1:])}
        out.append(MetricsRecord(subject_id=row[0], **vals))
    return out


def compare_records(single: Sequence[MetricsRecord], multi: Sequence[MetricsRecord]) -> list[ComparisonReport]:
    """Per-metric paired comparison; subjects are matched by id."""
    by_id = {r.subject_id: r for r in multi}
    missing = [r.subject_id for r in single if r.subject_id not in by_id]
    if missing or len(single) != len(multi):
        raise FormatError(f"evaluation tables cover different subjects: {missing or 'count mismatch'}")
    paired = [(s, by_id[s.subject_id]) for s in single]
    reports = []
    for m in METRIC_FIELDS:
        a = [getattr(s, m) for s, _ in paired]
        b = [getattr(t, m) for _, t in paired]
        reports.append(compare_metric(m, a, b, higher_is_better=m not in LOWER_IS_BETTER))
    return reports


def write_comparison_table(reports: Sequence[ComparisonReport], path: Path) -> None:
    """Mean / CI lower / CI upper per model, p-value and relative increase."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(
            [
                "Metric",
                "Single Mean", "Single CI lower", "Single CI upper",
                "Multi Mean", "Multi CI lower", "Multi CI upper",
                "p-value", "Relative increase (%)",
                "Gain Mean (%)", "Gain CI lower (%)", "Gain CI upper (%)",
            ]
        )
        for r in reports:
            w.writerow(
                [
                    METRIC_LABELS[r.metric],
                    _fmt(r.mean_single), _fmt(r.ci_single[0]), _fmt(r.ci_single[1]),
                    _fmt(r.mean_multi), _fmt(r.ci_multi[0]), _fmt(r.ci_multi[1]),
                    "nan" if math.isnan(r.p_value) else f"{r.p_value:.4g}",
                    _fmt(r.relative_increase_pct),
                    _fmt(r.relative_gain_pct), _fmt(r.ci_low_pct), _fmt(r.ci_high_pct),
                ]
            )


def plot_boxplots(single, multi, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 4, figsize=(12, 6))
    for ax, m in zip(axes.ravel(), METRIC_FIELDS):
        a = [getattr(r, m) for r in single]
        b = [getattr(r, m) for r in multi]
        ax.boxplot([a, b])
        ax.set_xticks([1, 2], ["Single", "Multi"])
        ax.set_title(METRIC_LABELS[m])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_gains(reports: Sequence[ComparisonReport], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ys = np.arange(len(reports))
    mean = np.array([r.relative_gain_pct for r in reports])
    lo = np.array([r.ci_low_pct for r in reports])
    hi = np.array([r.ci_high_pct for r in reports])
    ax.errorbar(mean, ys, xerr=[mean - lo, hi - mean], fmt="o", capsize=3)
    ax.axvline(0.0, color="grey", lw=0.8)
    ax.set_yticks(ys, [METRIC_LABELS[r.metric] for r in reports])
    ax.set_xlabel("Relative gain of multitask (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

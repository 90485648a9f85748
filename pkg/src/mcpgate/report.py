"""Harness report rendering: a delimited summary plus figures.

`harness run --report-dir` writes report.csv alongside two PNGs so a run can
be reviewed without re-executing it: per-category detection rates and the mix
of audit events the run produced.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .harness import EvalReport

CSV_FIELDS = ("category", "scenarios", "expectations", "met", "detection_rate")


def write_csv(report: EvalReport, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in report.rows():
            writer.writerow(row)


def plot_detection_rates(report: EvalReport, path: Path) -> None:
    rows = report.rows()
    labels = [r["category"] for r in rows]
    rates = [r["detection_rate"] for r in rows]
    colors = ["#2a9d8f" if rate >= 1.0 else "#e76f51" for rate in rates]
    fig, ax = plt.subplots(figsize=(8, 4))
    bars = ax.bar(labels, rates, color=colors)
    ax.set_ylim(0, 1.12)
    ax.set_ylabel("expectations met")
    ax.set_title("Detection rate per threat category")
    ax.bar_label(bars, fmt="%.2f", padding=2, fontsize=8)
    ax.tick_params(axis="x", rotation=25, labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_audit_mix(report: EvalReport, path: Path) -> None:
    counts = dict(sorted(report.audit_kind_counts.items(), key=lambda kv: -kv[1]))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.barh(list(counts.keys()), list(counts.values()), color="#264653")
    ax.invert_yaxis()
    ax.set_xlabel("records")
    ax.set_title("Audit events emitted during the run")
    ax.tick_params(axis="y", labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Write report.csv, detection_rates.png, and audit_events.png."""
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / "report.csv"
    rates_path = directory / "detection_rates.png"
    mix_path = directory / "audit_events.png"
    write_csv(report, csv_path)
    plot_detection_rates(report, rates_path)
    plot_audit_mix(report, mix_path)
    return [csv_path, rates_path, mix_path]

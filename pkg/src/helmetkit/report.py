"""Plot-ready tables and text summaries for :class:`~helmetkit.metrics.EvalReport`."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .annotations import CLASS_IDS, CLASS_NAMES, format_number
from .metrics import CurveTable, EvalReport

SUMMARY_KEYS = ("map50", "map50_95", "precision", "recall", "f1")
SUMMARY_FILE = "summary.txt"


def _fmt(value: float) -> str:
    if np.isnan(value):
        return ""
    return format_number(round(float(value), 6))


def format_summary(report: EvalReport) -> str:
    lines = [f"{k}: {_fmt(v)}" for k, v in report.summary().items()]
    lines.append(f"report_confidence: {format_number(report.report_confidence)}")
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> Dict[str, float]:
    out = {}
    for line in text.splitlines():
        if not line.strip() or ":" not in line:
            continue
        key, value = line.split(":", 1)
        value = value.strip()
        out[key.strip()] = float(value) if value else float("nan")
    return out


def _write_curve(path: Path, table: CurveTable):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["confidence", "precision", "recall", "f1"])
        for row in zip(table.confidence, table.precision, table.recall, table.f1):
            writer.writerow([_fmt(v) for v in row])


def _write_matrix(path: Path, matrix: np.ndarray):
    labels = list(CLASS_NAMES) + ["background"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["gt\\pred"] + labels)
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [_fmt(v) for v in row])


def write_report(report: EvalReport, out_dir) -> List[Path]:
    """Write the summary, AP table, curves and confusion matrices; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / SUMMARY_FILE
    path.write_text(format_summary(report))
    written.append(path)

    path = out / "ap_per_class.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id", "class", "n_gt", "n_det"] + [f"ap{int(round(t * 100))}" for t in report.thresholds] + ["ap50_95"])
        for c in CLASS_IDS:
            values = report.ap[c]
            mean = float(np.mean(values)) if not np.isnan(values).any() else float("nan")
            writer.writerow(
                [c, CLASS_NAMES[c - 1], report.n_ground_truth.get(c, 0), report.n_detections.get(c, 0)]
                + [_fmt(v) for v in values]
                + [_fmt(mean)]
            )
    written.append(path)

    path = out / "curves_all.csv"
    _write_curve(path, report.curves.aggregate)
    written.append(path)
    for c, table in report.curves.per_class.items():
        path = out / f"curves_{CLASS_NAMES[c - 1]}.csv"
        _write_curve(path, table)
        written.append(path)

    path = out / "confusion_matrix.csv"
    _write_matrix(path, report.confusion)
    written.append(path)
    sums = report.confusion.sum(axis=1, keepdims=True)
    normalized = np.divide(report.confusion, sums, out=np.zeros(report.confusion.shape), where=sums > 0)
    path = out / "confusion_matrix_normalized.csv"
    _write_matrix(path, normalized)
    written.append(path)
    return written


def comparison_table(runs: Sequence[Tuple[str, Dict[str, float]]]) -> str:
    """One row per run with precision, recall and both mAP variants, aligned for a terminal."""
    header = ["approach", "precision", "recall", "map50", "map50_95"]
    rows = [header]
    for label, summary in runs:
        rows.append([label] + [_fmt(summary.get(k, float("nan"))) or "-" for k in header[1:]])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"

"""
export.py

CSV and JSON outputs with fixed headers. Floats are written with ``repr`` so
identical runs produce byte-identical files; missing values are empty cells.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from src.backend.config import LOSS_TRACE_HEADER, REPORT_FIELDS
from src.backend.errors import ArtifactError
from src.backend.evaluation import EvalReport, RerunSummary
from src.backend.training import LossTrace, TraceRecord

logger = logging.getLogger(__name__)

REPORT_HEADER = ("variant",) + REPORT_FIELDS
PREDICTIONS_HEADER = ("variant", "id", "y", "pred")
PREDICTION_DIFF_HEADER = (
    "a",
    "b",
    "c",
    "a_correct_not_b",
    "b_correct_not_a",
    "c_ne_a",
    "c_ne_b",
    "c_ne_a_and_c_ne_b",
)
SUMMARY_HEADER = ("mode", "metric", "mean", "std", "n")


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_cell(cell) for cell in row])
    except OSError as exc:
        raise ArtifactError(f"could not write {target}: {exc}") from exc
    logger.debug("Wrote %s", target)
    return target


def read_csv(path: str | Path, header: Sequence[str]) -> list[dict[str, str]]:
    source = Path(path)
    if not source.is_file():
        raise ArtifactError(f"file not found: {source}")
    try:
        with source.open("r", encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != tuple(header):
                raise ArtifactError(f"{source}: expected header {','.join(header)}, got {reader.fieldnames}")
            return list(reader)
    except OSError as exc:
        raise ArtifactError(f"could not read {source}: {exc}") from exc


def _optional_float(text: str) -> float | None:
    return float(text) if text != "" else None


# ---------------------------------------------------------------------------
# Loss trace
# ---------------------------------------------------------------------------

def write_loss_trace_csv(trace: LossTrace, path: str | Path) -> Path:
    return write_csv(path, LOSS_TRACE_HEADER, (record.as_row() for record in trace.records))


def read_loss_trace_csv(path: str | Path) -> LossTrace:
    trace = LossTrace()
    for row in read_csv(path, LOSS_TRACE_HEADER):
        trace.append(
            TraceRecord(
                step=int(row["step"]),
                l_fg=float(row["l_fg"]),
                l_fh=float(row["l_fh"]),
                l_gh=float(row["l_gh"]),
                total=float(row["total"]),
                tau=float(row["tau"]),
                lr=float(row["lr"]),
            )
        )
    return trace


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------

def report_row(report: EvalReport) -> list[Any]:
    return [report.variant] + [getattr(report, name) for name in REPORT_FIELDS]


def write_report_json(reports: Sequence[EvalReport], path: str | Path, metadata: dict[str, Any]) -> Path:
    target = Path(path)
    document = {
        "metadata": metadata,
        "reports": [{"variant": r.variant, **r.metrics()} for r in reports],
    }
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ArtifactError(f"could not write {target}: {exc}") from exc
    return target


def write_report_csv(reports: Sequence[EvalReport], path: str | Path) -> Path:
    return write_csv(path, REPORT_HEADER, (report_row(r) for r in reports))


def read_report_csv(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    for row in read_csv(path, REPORT_HEADER):
        rows.append({"variant": row["variant"], **{name: _optional_float(row[name]) for name in REPORT_FIELDS}})
    return rows


def write_predictions_csv(reports: Sequence[EvalReport], path: str | Path) -> Path:
    def rows():
        for report in reports:
            for idx, label, pred in zip(report.ids, report.labels, report.predictions):
                yield (report.variant, idx, label, pred)

    return write_csv(path, PREDICTIONS_HEADER, rows())


def read_predictions_csv(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """variant -> (ids, labels, predictions), in file order."""
    grouped: dict[str, list[tuple[int, int, int]]] = {}
    for row in read_csv(path, PREDICTIONS_HEADER):
        grouped.setdefault(row["variant"], []).append((int(row["id"]), int(row["y"]), int(row["pred"])))
    result = {}
    for variant, items in grouped.items():
        arr = np.array(items, dtype=np.int64).reshape(-1, 3)
        result[variant] = (arr[:, 0], arr[:, 1], arr[:, 2])
    return result


def write_summary_csv(summaries: dict[str, dict[str, RerunSummary]], path: str | Path) -> Path:
    def rows():
        for mode, summary in summaries.items():
            for metric in REPORT_FIELDS:
                if metric in summary:
                    s = summary[metric]
                    yield (mode, metric, s.mean, s.std, s.n)

    return write_csv(path, SUMMARY_HEADER, rows())

"""Comparison tables over the evaluation reports of several runs (typically one config under many seeds)."""

import csv
import io
import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from counterfactual_recsys._logging import logger
from counterfactual_recsys.error import ReportError
from counterfactual_recsys.evaluation import EvalReport

__all__ = ["ReportRow", "collect_reports", "aggregate", "to_csv", "to_text"]

# protocol fields allowed to differ between the runs of one table
_RUN_SPECIFIC = ("seed",)


@dataclass
class ReportRow:
    model: str
    mode: str
    weighting: str
    n_runs: int
    # metric -> (mean, std over runs; None with a single run)
    cells: dict[str, tuple[float, Optional[float]]]


def collect_reports(run_dirs: Sequence[Path]) -> list[EvalReport]:
    reports = []
    for run_dir in run_dirs:
        paths = sorted((run_dir / "reports").glob("*.json"))
        if not paths:
            msg = f"no evaluation reports found in '{run_dir}' (run the `evaluate` command first)"
            raise ReportError(msg)
        for path in paths:
            with path.open("r", encoding="utf-8") as f:
                report = EvalReport.from_json(json.load(f))
            if report is None:
                msg = f"invalid report file: '{path}'"
                raise ReportError(msg)
            reports.append(report)
    logger.debug("collected %d reports from %d runs", len(reports), len(run_dirs))
    return reports


def _comparable(protocol: dict[str, object]) -> dict[str, object]:
    return {k: v for k, v in protocol.items() if k not in _RUN_SPECIFIC and k != "weighting"}


def aggregate(reports: Sequence[EvalReport]) -> list[ReportRow]:
    """Group reports by (model, mode, weighting) and summarize each metric as mean (std) over runs.

    Reports whose protocols differ in anything but the seed cannot share a table.
    """
    if not reports:
        msg = "no reports to aggregate"
        raise ReportError(msg)
    reference = _comparable(reports[0].protocol)
    for report in reports[1:]:
        other = _comparable(report.protocol)
        if other != reference:
            diff = ", ".join(
                f"{key}: {reference.get(key)!r} != {other.get(key)!r}"
                for key in sorted(set(reference) | set(other))
                if reference.get(key) != other.get(key)
            )
            msg = f"reports use different evaluation protocols ({diff})"
            raise ReportError(msg)

    groups: dict[tuple[str, str, str], list[EvalReport]] = {}
    for report in reports:
        key = (
            str(report.label.get("model", "?")),
            str(report.label.get("mode", "?")),
            report.weighting.value,
        )
        groups.setdefault(key, []).append(report)

    rows = []
    for (model, mode, weighting), members in sorted(groups.items()):
        cells: dict[str, tuple[float, Optional[float]]] = {}
        for metric in members[0].raw:
            values = [m.primary(metric) for m in members]
            std = float(np.std(values, ddof=1)) if len(values) > 1 else None
            cells[metric] = (float(np.mean(values)), std)
        rows.append(ReportRow(model, mode, weighting, len(members), cells))
    return rows


def _metrics(rows: Sequence[ReportRow]) -> list[str]:
    names: list[str] = []
    for row in rows:
        names.extend(name for name in row.cells if name not in names)
    return names


def to_csv(rows: Sequence[ReportRow]) -> str:
    metrics = _metrics(rows)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    header = ["model", "mode", "weighting", "n_runs"]
    for metric in metrics:
        header.extend([f"{metric}_mean", f"{metric}_std"])
    writer.writerow(header)
    for row in rows:
        line: list[object] = [row.model, row.mode, row.weighting, row.n_runs]
        for metric in metrics:
            mean, std = row.cells.get(metric, (float("nan"), None))
            line.extend([repr(mean), "" if std is None else repr(std)])
        writer.writerow(line)
    return out.getvalue()


def to_text(rows: Sequence[ReportRow]) -> str:
    metrics = _metrics(rows)
    table = [["model", "mode", "weighting", "runs", *metrics]]
    for row in rows:
        cells = []
        for metric in metrics:
            mean, std = row.cells.get(metric, (float("nan"), None))
            cells.append(f"{mean:.4f}" if std is None else f"{mean:.4f} ({std:.4f})")
        table.append([row.model, row.mode, row.weighting, str(row.n_runs), *cells])
    widths = [max(len(line[c]) for line in table) for c in range(len(table[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in table)

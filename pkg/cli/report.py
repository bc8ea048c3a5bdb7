"""Merge MetricsReports from several runs into one comparison table."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from core.errors import EmptySetError
from core.evaluation import load_report, write_comparison
from core.metrics import MetricsReport

logger = logging.getLogger(__name__)


@dataclass
class MergedReport:
    rows: list[tuple[str, dict[str, float]]]
    table: str
    notes: list[str] = field(default_factory=list)

    @property
    def mismatched(self) -> bool:
        return bool(self.notes)


def _report_path(run: Path) -> Path:
    run = Path(run)
    if run.is_file():
        return run
    nested = run / "report"
    return nested if (nested / "metrics.json").exists() else run


def compatibility_notes(labels: Sequence[str], reports: Sequence[MetricsReport]) -> list[str]:
    notes = []
    datasets = {r.dataset_hash for r in reports}
    if len(datasets) > 1:
        notes.append("dataset mismatch: " + ", ".join(f"{lbl}={r.dataset_hash[:12]}" for lbl, r in zip(labels, reports)))
    configs = {r.config_hash for r in reports}
    if len(configs) > 1:
        notes.append("config hashes differ: " + ", ".join(f"{lbl}={r.config_hash[:12]}" for lbl, r in zip(labels, reports)))
    return notes


def merge_reports(runs: Sequence[Path], out_dir: Path, labels: Sequence[str] | None = None) -> MergedReport:
    """
    Load each run's metrics report and write ``comparison.{txt,csv,json,png}`` under ``out_dir``.

    Rows keep the order given. Runs on different datasets or configs are merged anyway and
    flagged in the output.
    """
    if not runs:
        raise EmptySetError("report needs at least one run directory")
    if labels is not None and len(labels) != len(runs):
        raise ValueError(f"Got {len(labels)} labels for {len(runs)} runs")
    labels = list(labels) if labels is not None else [Path(r).name for r in runs]
    reports = [load_report(_report_path(r)) for r in runs]

    notes = compatibility_notes(labels, reports)
    for note in notes:
        logger.warning(note)
    rows = [(label, dict(report.aggregate)) for label, report in zip(labels, reports)]
    table = write_comparison(rows, out_dir, "comparison", notes)
    logger.info(f"Merged {len(rows)} report(s) into {out_dir}")
    return MergedReport(rows=rows, table=table, notes=notes)

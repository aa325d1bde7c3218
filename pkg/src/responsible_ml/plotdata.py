"""Tidy CSV tables for learning-curve, sampling-rate and tradeoff plots."""

from __future__ import annotations

import csv
import io
from typing import Any

from .fairbatch import FairBatchSampler
from .frtrain import FRDiagnostics
from .slicetuner import PlanTrace

COLUMNS = {
    "learning-curve": ["slice", "n", "loss"],
    "lambda-path": ["epoch", "lambda1", "lambda2", "disparity"],
    "tradeoff": ["method", "accuracy", "dp"],
}


def _rows(trace: Any, kind: str) -> list[list]:
    if kind == "lambda-path":
        if isinstance(trace, FairBatchSampler):
            trace = trace.trajectory
        if not isinstance(trace, (list, tuple)) or any(len(r) != 4 for r in trace):
            raise TypeError("lambda-path needs a FairBatch sampler or (epoch, l1, l2, disparity) rows")
        return [list(r) for r in trace]
    if kind == "learning-curve":
        if isinstance(trace, PlanTrace):
            trace = trace.points
        if not isinstance(trace, (list, tuple)):
            raise TypeError("learning-curve needs a plan trace or per-slice point lists")
        rows = []
        for i, pts in enumerate(trace):
            for n, loss in pts:
                rows.append([i, n, loss])
        return rows
    if kind == "tradeoff":
        if isinstance(trace, FRDiagnostics):
            return [[f"epoch{r['epoch']}", r["accuracy"], r["dp"]] for r in trace.rows]
        if isinstance(trace, dict):
            return [[m, acc, dp] for m, (acc, dp) in trace.items()]
        if isinstance(trace, (list, tuple)) and all(len(r) == 3 for r in trace):
            return [list(r) for r in trace]
        raise TypeError("tradeoff needs FR-Train diagnostics, {method: (acc, dp)} or rows")
    raise ValueError(f"unknown plot kind {kind!r}")


def emit_plot_data(trace: Any, kind: str) -> str:
    """CSV text with a header row and one row per plotted point."""
    if kind not in COLUMNS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {sorted(COLUMNS)}")
    rows = _rows(trace, kind)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS[kind])
    w.writerows(rows)
    return buf.getvalue()

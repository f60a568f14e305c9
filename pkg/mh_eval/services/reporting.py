from __future__ import annotations

import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from mh_eval.errors import ReportError
from mh_eval.models import STRATEGIES, ClassLabel, ParseOutcome, RunRecord, TaskSpec
from mh_eval.output.table import format_csv, format_table
from mh_eval.services.metrics import (
    DeltaTable,
    EvalReport,
    ReportKey,
    build_report,
    confusion_matrix,
    delta_report,
    direction,
    report_means,
    select_best_across,
    variant_result,
)
from mh_eval.services.runner import PLAN_FILE, load_run_records, read_status
from mh_eval.tasks import get_task

log = logging.getLogger(__name__)

LAYOUTS = ("summary", "deltas", "best")
FORMATS = ("text", "csv")
ENHANCEMENTS = ("context", "mh", "both")


def _outcome(r: RunRecord, task: TaskSpec) -> Tuple[ParseOutcome, ClassLabel]:
    gold = task.label(r.gold)
    if r.status == "parsed" and r.pred is not None:
        return ParseOutcome(label=task.label(r.pred), status="parsed", matched_span=r.matched_span, rule_id=r.rule_id), gold
    # ambiguous, unparseable and over-budget cells all land in the reserved row
    return ParseOutcome(label=None, status="unparseable"), gold


def compute_reports(records: Sequence[RunRecord]) -> Dict[ReportKey, EvalReport]:
    """One EvalReport per (dataset, task, model, mode, strategy); order-independent."""
    grouped: Dict[ReportKey, Dict[Tuple[str, int], List[RunRecord]]] = {}
    for r in records:
        key = ReportKey(r.dataset, r.task, r.model, r.mode, r.strategy)
        grouped.setdefault(key, {}).setdefault((r.variant, r.repeat_index), []).append(r)

    reports: Dict[ReportKey, EvalReport] = {}
    for key in sorted(grouped, key=lambda k: k.as_tuple()):
        task = get_task(key.task)
        results = []
        for (variant, repeat), rows in grouped[key].items():
            pairs = [_outcome(r, task) for r in rows]
            matrix = confusion_matrix([p for p, _ in pairs], [g for _, g in pairs], task)
            results.append(variant_result(variant, repeat, matrix))
        reports[key] = build_report(key, results)
    return reports


def _load(run_dir: Path) -> Tuple[Dict[ReportKey, EvalReport], Dict[str, int], Dict[str, int], dict]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"run directory not found: {run_dir}")
    records = load_run_records(run_dir)
    if not records:
        raise ReportError(f"{run_dir}: no run records")

    planned: Dict[str, int] = {}
    plan_path = run_dir / PLAN_FILE
    if plan_path.exists():
        planned = json.loads(plan_path.read_text(encoding="utf-8")).get("cells", {})
    seen: Dict[str, int] = {}
    for r in records:
        k = "|".join((r.dataset, r.task, r.model, r.mode, r.strategy))
        seen[k] = seen.get(k, 0) + 1
    return compute_reports(records), planned, seen, read_status(run_dir)


def render_report(run_dir: Path, layout: str = "summary", fmt: str = "text") -> str:
    """Deterministic text (or CSV) for one layout, computed from the run records alone."""
    if layout not in LAYOUTS:
        raise ReportError(f"unknown layout {layout!r} (known: {', '.join(LAYOUTS)})")
    if fmt not in FORMATS:
        raise ReportError(f"unknown format {fmt!r} (known: {', '.join(FORMATS)})")

    reports, planned, seen, status = _load(run_dir)
    if layout == "summary":
        out = _summary(reports, planned, seen, fmt)
    elif layout == "deltas":
        out = _deltas(reports, fmt)
    else:
        out = _best(reports, fmt)

    if fmt == "text" and status.get("state") == "partial":
        out += f"* partial run: {status.get('completed', 0)}/{status.get('planned', 0)} cells recorded\n"
    return out


def _render(headers: Sequence[str], rows: Sequence[Sequence[str]], fmt: str) -> str:
    return format_csv(headers, rows) if fmt == "csv" else format_table(headers, rows)


def _summary(reports: Mapping[ReportKey, EvalReport], planned: Mapping[str, int], seen: Mapping[str, int], fmt: str) -> str:
    headers = ["dataset", "task", "model", "mode", "strategy", "bacc_mean", "bacc_std", "n", "cells"]
    rows = []
    for key, rep in reports.items():
        k = "|".join(key.as_tuple())
        done, want = seen.get(k, 0), planned.get(k)
        cells = f"{done}/{want}" if want is not None else str(done)
        if want is not None and done < want:
            cells += "*"
        rows.append([key.dataset, f"#{key.task}", key.model, key.mode, key.strategy, f"{rep.mean:.3f}", f"{rep.std:.3f}", str(rep.n_variants), cells])
    return _render(headers, rows, fmt)


def delta_tables(reports: Mapping[ReportKey, EvalReport]) -> List[DeltaTable]:
    """Enhancement strategies vs basic (zero-shot), then few-shot vs zero-shot per strategy."""
    def means(mode: str, strategy: str) -> Dict[Tuple[str, str], float]:
        return report_means([r for k, r in reports.items() if k.mode == mode and k.strategy == strategy])

    tables: List[DeltaTable] = []
    basic = means("zero_shot", "basic")
    for s in ENHANCEMENTS:
        enhanced = means("zero_shot", s)
        if basic and enhanced:
            tables.append(delta_report(basic, enhanced, title=f"zero_shot {s} vs basic"))
    for s in STRATEGIES:
        zs, fs = means("zero_shot", s), means("few_shot", s)
        if zs and fs:
            tables.append(delta_report(zs, fs, title=f"few_shot vs zero_shot ({s})"))
    return tables


def _deltas(reports: Mapping[ReportKey, EvalReport], fmt: str) -> str:
    tables = [t for t in delta_tables(reports) if t.cells]
    if not tables:
        return "No comparable cells.\n" if fmt == "text" else format_csv(["table", "model", "column", "delta"], [])

    if fmt == "csv":
        rows = [
            [t.title, r, c, f"{t.cells[(r, c)]:+.3f}"]
            for t in tables
            for r in t.rows
            for c in t.columns
            if (r, c) in t.cells
        ]
        return format_csv(["table", "model", "column", "delta"], rows)

    parts = []
    for t in tables:
        headers = ["model", *t.columns, "mean"]
        rows = []
        for r in t.rows:
            row = [r] + [_delta_cell(t.cells.get((r, c))) for c in t.columns] + [_delta_cell(t.row_means[r])]
            rows.append(row)
        rows.append(["mean"] + [_delta_cell(t.column_means[c]) for c in t.columns] + [""])
        parts.append(f"{t.title}\n{format_table(headers, rows)}")
    return "\n".join(parts)


def _delta_cell(value: Optional[float]) -> str:
    if value is None:
        return "-"
    return f"{value:+.3f} {direction(value)}"


def _best(reports: Mapping[ReportKey, EvalReport], fmt: str) -> str:
    """ZS_best per (dataset, task, model): picked on the test split, so optimistic."""
    groups: "OrderedDict[Tuple[str, str, str], List[EvalReport]]" = OrderedDict()
    for key, rep in reports.items():
        if key.mode == "zero_shot":
            groups.setdefault((key.dataset, key.task, key.model), []).append(rep)

    headers = ["dataset", "task", "model", "strategy", "variant", "bacc", "note"]
    rows = []
    for (dataset, task, model), reps in groups.items():
        reps = sorted(reps, key=lambda r: STRATEGIES.index(r.key.strategy))
        best = select_best_across(reps)
        label = best.variant if best.repeat_index == 0 else f"{best.variant}#{best.repeat_index}"
        rows.append([dataset, f"#{task}", model, best.strategy, label, f"{best.balanced_accuracy:.3f}", "test-selected"])
    return _render(headers, rows, fmt)

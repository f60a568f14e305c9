from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import balanced_accuracy_score
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

from mh_eval.errors import MetricsError
from mh_eval.models import ClassLabel, ParseOutcome, TaskSpec

log = logging.getLogger(__name__)

UNPARSEABLE = "<unparseable>"


@dataclass(frozen=True)
class ConfusionMatrix:
    """
    counts[p][g]: rows are predictions (the task classes, then one reserved
    UNPARSEABLE row), columns are gold classes.
    """

    classes: Tuple[str, ...]
    counts: Tuple[Tuple[int, ...], ...]

    @classmethod
    def empty(cls, classes: Sequence[str]) -> "ConfusionMatrix":
        k = len(classes)
        return cls(tuple(classes), tuple((0,) * k for _ in range(k + 1)))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.counts, dtype=np.int64).reshape(len(self.classes) + 1, len(self.classes))

    @property
    def total(self) -> int:
        return int(self.array.sum())

    @property
    def pred_axis(self) -> Tuple[str, ...]:
        return self.classes + (UNPARSEABLE,)

    def gold_counts(self) -> Dict[str, int]:
        sums = self.array.sum(axis=0)
        return {c: int(sums[k]) for k, c in enumerate(self.classes)}

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other.classes:
            raise MetricsError("cannot merge matrices over different class lists")
        return _from_array(self.classes, self.array + other.array)


def _from_array(classes: Tuple[str, ...], arr: np.ndarray) -> ConfusionMatrix:
    return ConfusionMatrix(classes, tuple(tuple(int(x) for x in row) for row in arr))


def confusion_matrix(
    preds: Sequence[ParseOutcome], golds: Sequence[ClassLabel], task: TaskSpec
) -> ConfusionMatrix:
    if len(preds) != len(golds):
        raise MetricsError(f"{len(preds)} predictions vs {len(golds)} gold labels")
    if not golds:
        raise MetricsError("nothing to score")

    k = len(task.classes)
    y_true = [g.ordinal for g in golds]
    y_pred = [p.label.ordinal if (p.status == "parsed" and p.label is not None) else k for p in preds]
    # ordinal k is the reserved unparseable label; sklearn puts gold on the rows
    cm = sk_confusion_matrix(y_true, y_pred, labels=list(range(k + 1)))
    return _from_array(task.class_names, cm[:k].T)


def label_vectors(matrix: ConfusionMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """(y_true, y_pred) ordinal vectors that reproduce `matrix`; unparseable is K."""
    arr = matrix.array
    preds, golds = np.nonzero(arr)
    counts = arr[preds, golds]
    return np.repeat(golds, counts), np.repeat(preds, counts)


def absent_classes(matrix: ConfusionMatrix) -> Tuple[str, ...]:
    return tuple(c for c, n in matrix.gold_counts().items() if n == 0)


def recall_fractions(matrix: ConfusionMatrix) -> Dict[str, Fraction]:
    """Per-class recall as exact fractions; gold classes with no items are left out."""
    arr = matrix.array
    gold = matrix.gold_counts()
    return {name: Fraction(int(arr[k, k]), gold[name]) for k, name in enumerate(matrix.classes) if gold[name]}


def balanced_accuracy_exact(matrix: ConfusionMatrix) -> Fraction:
    recalls = recall_fractions(matrix)
    if not recalls:
        raise MetricsError("no gold class has any items")
    return sum(recalls.values(), Fraction(0)) / len(recalls)


def balanced_accuracy(matrix: ConfusionMatrix) -> float:
    """Unweighted mean of per-class recall; unparseable predictions count as misses."""
    if matrix.total == 0:
        raise MetricsError("no gold class has any items")
    for name in absent_classes(matrix):
        log.warning("class %r has no gold items; excluded from balanced accuracy", name)
    y_true, y_pred = label_vectors(matrix)
    with warnings.catch_warnings():
        # classes seen only among predictions (absent golds, unparseable) are dropped by sklearn
        warnings.filterwarnings("ignore", message="y_pred contains classes not in y_true")
        return float(balanced_accuracy_score(y_true, y_pred))


def aggregate_variants(values: Sequence[float]) -> Tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    if len(values) < 1:
        raise MetricsError("need at least one variant to aggregate")
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=0))


@dataclass(frozen=True)
class ReportKey:
    dataset: str
    task: str
    model: str
    mode: str
    strategy: str

    def as_tuple(self) -> Tuple[str, str, str, str, str]:
        return (self.dataset, self.task, self.model, self.mode, self.strategy)


@dataclass(frozen=True)
class VariantResult:
    variant: str  # "<part1>.<part2>"
    repeat_index: int
    balanced_accuracy: float
    exact: Fraction
    matrix: ConfusionMatrix

    @property
    def sort_key(self) -> Tuple[int, ...]:
        return tuple(int(p) for p in self.variant.split(".")) + (self.repeat_index,)

    @property
    def label(self) -> str:
        return self.variant if self.repeat_index == 0 else f"{self.variant}#{self.repeat_index}"


@dataclass(frozen=True)
class EvalReport:
    key: ReportKey
    per_variant: Tuple[VariantResult, ...]
    mean: float
    std: float
    n_variants: int


def build_report(key: ReportKey, results: Sequence[VariantResult]) -> EvalReport:
    ordered = tuple(sorted(results, key=lambda r: r.sort_key))
    mean, std = aggregate_variants([r.balanced_accuracy for r in ordered])
    if len(ordered) == 1:
        std = 0.0
    return EvalReport(key=key, per_variant=ordered, mean=mean, std=std, n_variants=len(ordered))


def variant_result(variant: str, repeat_index: int, matrix: ConfusionMatrix) -> VariantResult:
    return VariantResult(variant, repeat_index, balanced_accuracy(matrix), balanced_accuracy_exact(matrix), matrix)


def majority_baseline(
    train_labels: Sequence[ClassLabel],
    test_golds: Sequence[ClassLabel],
    task: TaskSpec,
    key: Optional[ReportKey] = None,
) -> EvalReport:
    """Predicts the most frequent training class everywhere; ties go to the lowest ordinal."""
    if not train_labels:
        raise MetricsError("majority baseline needs training labels")
    counts = Counter(l.ordinal for l in train_labels)
    top = max(counts.values())
    modal = task.classes[min(o for o, n in counts.items() if n == top)]

    preds = [ParseOutcome(label=modal, status="parsed", matched_span=modal.name, rule_id="majority")] * len(test_golds)
    matrix = confusion_matrix(preds, test_golds, task)
    key = key or ReportKey(dataset="", task=task.task_id, model="majority", mode="baseline", strategy="-")
    return build_report(key, [variant_result("0.0", 0, matrix)])


@dataclass(frozen=True)
class BestVariant:
    variant: str
    repeat_index: int
    balanced_accuracy: float
    strategy: str = ""
    test_set_selected: bool = True  # chosen on test data: optimistic


def select_best_variant(report: EvalReport) -> BestVariant:
    """Argmax balanced accuracy; ties keep the lowest variant index."""
    if not report.per_variant:
        raise MetricsError("report has no variants")
    best = report.per_variant[0]
    for r in report.per_variant[1:]:
        if r.balanced_accuracy > best.balanced_accuracy:
            best = r
    return BestVariant(best.variant, best.repeat_index, best.balanced_accuracy, report.key.strategy)


def select_best_across(reports: Sequence[EvalReport]) -> BestVariant:
    """ZS_best over several strategies' reports, in the given strategy order."""
    picks = [select_best_variant(r) for r in reports]
    if not picks:
        raise MetricsError("no reports to select from")
    best = picks[0]
    for p in picks[1:]:
        if p.balanced_accuracy > best.balanced_accuracy:
            best = p
    return best


@dataclass(frozen=True)
class DeltaTable:
    title: str
    rows: Tuple[str, ...]  # models
    columns: Tuple[str, ...]  # "<dataset>#<task>"
    cells: Mapping[Tuple[str, str], float]  # (row, column) -> delta
    row_means: Mapping[str, float]
    column_means: Mapping[str, float]
    unmatched: Tuple[Tuple[str, str], ...]


def direction(delta: float, eps: float = 1e-12) -> str:
    if delta > eps:
        return "↑"
    if delta < -eps:
        return "↓"
    return "="


def delta_report(
    baseline: Mapping[Tuple[str, str], float],
    enhanced: Mapping[Tuple[str, str], float],
    title: str = "",
) -> DeltaTable:
    """
    Δ = enhanced − baseline per (row, column) cell, with row and column means.
    Keys present on only one side are listed in `unmatched`.
    """
    matched = sorted(set(baseline) & set(enhanced))
    unmatched = tuple(sorted(set(baseline) ^ set(enhanced)))
    for key in unmatched:
        log.warning("delta %s: no counterpart for %s", title or "report", key)

    cells = {key: enhanced[key] - baseline[key] for key in matched}
    rows = tuple(sorted({r for r, _ in matched}))
    cols = tuple(sorted({c for _, c in matched}))

    row_means = {r: float(np.mean([v for (rr, _), v in cells.items() if rr == r])) for r in rows}
    col_means = {c: float(np.mean([v for (_, cc), v in cells.items() if cc == c])) for c in cols}
    return DeltaTable(title, rows, cols, cells, row_means, col_means, unmatched)


def report_means(reports: Sequence[EvalReport], row: str = "model") -> Dict[Tuple[str, str], float]:
    """(row, "<dataset>#<task>") -> mean, the shape delta_report consumes."""
    out: Dict[Tuple[str, str], float] = {}
    for r in reports:
        out[(getattr(r.key, row), f"{r.key.dataset}#{r.key.task}")] = r.mean
    return out


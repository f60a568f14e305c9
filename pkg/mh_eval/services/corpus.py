from __future__ import annotations

import logging
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from mh_eval.errors import DatasetError, SplitError
from mh_eval.models import ClassLabel, DatasetSplit, Record, TaskSpec
from mh_eval.output.json_out import write_jsonl
from mh_eval.services.tokens import STATS_COUNTER, TokenCounter
from mh_eval.tasks import BINARY_ALIASES

log = logging.getLogger(__name__)

USER_POST_SEPARATOR = "\n\n"


@dataclass(frozen=True)
class DatasetSchema:
    text: str = "text"
    label: str = "label"
    user_id: str = "user_id"
    id: Optional[str] = None  # falls back to "<id_prefix>-<row>"
    label_map: Mapping[str, str] = field(default_factory=dict)
    format: Optional[str] = None  # csv | tsv | jsonl; inferred from the suffix when None
    delimiter: Optional[str] = None


@dataclass(frozen=True)
class RowError:
    row: int  # 1-based data row, header excluded
    message: str

    def __str__(self) -> str:
        return f"row {self.row}: {self.message}"


@dataclass(frozen=True)
class LoadResult:
    records: Tuple[Record, ...]
    errors: Tuple[RowError, ...]


@dataclass(frozen=True)
class DatasetStats:
    count: int
    class_counts: Dict[str, int]
    class_percentages: Dict[str, float]
    token_mean: float
    token_std: float


# -----------------------------
# Ingestion
# -----------------------------
def load_dataset(
    path: Path,
    schema: DatasetSchema,
    task: TaskSpec,
    source: Optional[str] = None,
    strict: bool = False,
    id_prefix: Optional[str] = None,
) -> LoadResult:
    """
    Reads a CSV/TSV/JSONL file into validated Records for `task`.

    Every data row either becomes a Record or a RowError; nothing is dropped
    silently. User-level tasks fold each user's posts into one Record.
    With strict=True any row error raises DatasetError instead. Without an id
    column, ids are "<id_prefix>-<row>"; id_prefix defaults to `source`.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    source = source or path.stem
    id_prefix = id_prefix or source

    frame = _read_frame(path, schema)
    if frame is None:
        return LoadResult(records=(), errors=())

    for col in (schema.text, schema.label, schema.user_id) + ((schema.id,) if schema.id else ()):
        if col not in frame.columns:
            raise DatasetError(f"{path}: missing column {col!r} (have: {', '.join(map(str, frame.columns))})")

    records: List[Record] = []
    errors: List[RowError] = []
    seen_ids: Dict[str, int] = {}

    for i, row in enumerate(frame.to_dict(orient="records"), start=1):
        rid = _cell(row.get(schema.id)) if schema.id else f"{id_prefix}-{i}"
        raw_label = _cell(row.get(schema.label))
        try:
            label = decode_label(raw_label, task, schema.label_map)
        except KeyError:
            errors.append(RowError(i, f"unknown label {raw_label!r} for task {task.task_id}"))
            continue

        if not rid:
            errors.append(RowError(i, "empty record id"))
            continue
        if rid in seen_ids:
            errors.append(RowError(i, f"duplicate record id {rid!r} (first seen on row {seen_ids[rid]})"))
            continue

        try:
            rec = Record(
                id=rid,
                text=_cell(row.get(schema.text)),
                label=label,
                user_id=_cell(row.get(schema.user_id)).strip(),
                source=source,
            )
        except ValueError as e:
            errors.append(RowError(i, str(e)))
            continue

        seen_ids[rid] = i
        records.append(rec)

    if task.granularity == "user":
        records, user_errors = aggregate_by_user(records, source, id_prefix)
        errors.extend(user_errors)

    for err in errors:
        log.warning("%s: %s", path.name, err)
    if strict and errors:
        raise DatasetError(f"{path}: {len(errors)} bad row(s); first: {errors[0]}")

    return LoadResult(records=tuple(records), errors=tuple(errors))


def decode_label(raw: str, task: TaskSpec, label_map: Mapping[str, str] | None = None) -> ClassLabel:
    """Lowercase/trim, apply the dataset's label_map, then the binary aliases."""
    key = (raw or "").strip().lower()
    mapping = {str(k).strip().lower(): str(v).strip().lower() for k, v in (label_map or {}).items()}
    key = mapping.get(key, key)
    if task.arity == "binary":
        key = BINARY_ALIASES.get(key, key)
    return task.label(key)


def aggregate_by_user(
    records: Sequence[Record], source: str, id_prefix: Optional[str] = None
) -> Tuple[List[Record], List[RowError]]:
    """One Record per user: posts joined by a blank line, in dataset order."""
    groups: "OrderedDict[str, List[Record]]" = OrderedDict()
    for r in records:
        groups.setdefault(r.user_id, []).append(r)

    out: List[Record] = []
    errors: List[RowError] = []
    for user_id, posts in groups.items():
        labels = {p.label for p in posts}
        if len(labels) > 1:
            names = sorted(l.name for l in labels)
            errors.append(RowError(0, f"user {user_id!r} has conflicting labels {names}"))
            continue
        out.append(
            Record(
                id=f"{id_prefix or source}-{user_id}",
                text=USER_POST_SEPARATOR.join(p.text for p in posts),
                label=posts[0].label,
                user_id=user_id,
                source=source,
            )
        )
    return out, errors


def _read_frame(path: Path, schema: DatasetSchema) -> Optional[pd.DataFrame]:
    if not path.read_text(encoding="utf-8").strip():
        return None

    fmt = (schema.format or _infer_format(path)).lower()
    if fmt == "jsonl":
        frame = pd.read_json(path, lines=True, dtype=False, convert_dates=False)
    elif fmt in ("csv", "tsv"):
        sep = schema.delimiter or ("\t" if fmt == "tsv" else ",")
        frame = pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False, encoding="utf-8")
    else:
        raise DatasetError(f"{path}: unsupported format {fmt!r}")
    return frame


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("jsonl", "ndjson"):
        return "jsonl"
    if suffix in ("tsv", "tab"):
        return "tsv"
    return "csv"


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and math.isnan(value):
        return ""
    return str(value)


# -----------------------------
# Splitting / downsampling
# -----------------------------
def split_user_exclusive(records: Sequence[Record], ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """
    Whole users go to train or to test, never both.

    Users are shuffled by `seed` and assigned to train until train holds at least
    round(ratio * N) records; the rest go to test. Record order inside each side
    follows the input.
    """
    if not 0 < ratio < 1:
        raise SplitError(f"ratio must be in (0, 1), got {ratio}")

    sizes: "OrderedDict[str, int]" = OrderedDict()
    for r in records:
        if not r.user_id:
            raise SplitError(f"record {r.id} has no user_id")
        sizes[r.user_id] = sizes.get(r.user_id, 0) + 1
    if len(sizes) < 2:
        raise SplitError(f"need at least 2 distinct users to split, got {len(sizes)}")

    users = list(sizes)
    order = np.random.default_rng(seed).permutation(len(users))
    target = round_half_up(ratio * len(records))

    train_users: set[str] = set()
    filled = 0
    for idx in order:
        if filled >= target and train_users:
            break
        user = users[idx]
        train_users.add(user)
        filled += sizes[user]

    if len(train_users) == len(users):
        # keep at least one user for test
        train_users.discard(users[order[-1]])

    train = tuple(r for r in records if r.user_id in train_users)
    test = tuple(r for r in records if r.user_id not in train_users)
    return DatasetSplit(train=train, test=test, seed=seed, ratio=ratio)


def downsample_train(train: Sequence[Record], fraction: float, seed: int = 0) -> List[Record]:
    """
    Class-stratified subset of round(fraction * N) records.

    Per-class quotas use largest-remainder rounding so they add up exactly and
    each stays within one record of its proportional share. Selected records keep
    their input order.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    total = len(train)
    if fraction == 1 or total == 0:
        return list(train)

    target = round_half_up(fraction * total)
    if target == 0:
        log.warning("downsample fraction %s of %d records rounds to 0; keeping 1 record", fraction, total)
        target = 1

    by_class: "OrderedDict[ClassLabel, List[int]]" = OrderedDict()
    for i, r in enumerate(train):
        by_class.setdefault(r.label, []).append(i)
    classes = sorted(by_class, key=lambda c: c.ordinal)

    quotas = _largest_remainder([len(by_class[c]) for c in classes], target, total)
    rng = np.random.default_rng(seed)
    picked: List[int] = []
    for c, q in zip(classes, quotas):
        members = by_class[c]
        if q:
            picked.extend(members[j] for j in rng.choice(len(members), size=q, replace=False))

    return [train[i] for i in sorted(picked)]


def _largest_remainder(counts: Sequence[int], target: int, total: int) -> List[int]:
    exact = [c * target / total for c in counts]
    quotas = [math.floor(x) for x in exact]
    short = target - sum(quotas)
    by_remainder = sorted(range(len(counts)), key=lambda k: (-(exact[k] - quotas[k]), k))
    for k in by_remainder[:short]:
        quotas[k] += 1
    return quotas


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


# -----------------------------
# Stats / manifests
# -----------------------------
def dataset_stats(records: Sequence[Record], task: TaskSpec, counter: TokenCounter = STATS_COUNTER) -> DatasetStats:
    """Counts, class percentages and token length mean/population σ."""
    if not records:
        raise DatasetError("cannot compute stats of an empty record list")

    counts = Counter(r.label.name for r in records)
    n = len(records)
    class_counts = {c.name: counts.get(c.name, 0) for c in task.classes}
    lengths = np.array([counter(r.text) for r in records], dtype=float)
    return DatasetStats(
        count=n,
        class_counts=class_counts,
        class_percentages={k: 100.0 * v / n for k, v in class_counts.items()},
        token_mean=float(lengths.mean()),
        token_std=float(lengths.std(ddof=0)),
    )


def write_split_manifest(split: DatasetSplit, path: Path) -> int:
    rows = [{"id": r.id, "split": "train", "seed": split.seed, "ratio": split.ratio} for r in split.train]
    rows += [{"id": r.id, "split": "test", "seed": split.seed, "ratio": split.ratio} for r in split.test]
    return write_jsonl(path, rows)

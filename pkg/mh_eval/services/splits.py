from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from mh_eval.config import DatasetConfig, ExperimentConfig
from mh_eval.errors import DatasetError
from mh_eval.models import DatasetSplit, Record
from mh_eval.output.json_out import write_jsonl
from mh_eval.services.corpus import DatasetStats, dataset_stats, load_dataset, split_user_exclusive
from mh_eval.services.metrics import EvalReport, majority_baseline

log = logging.getLogger(__name__)


def load_split(ds: DatasetConfig, strict: bool = False) -> DatasetSplit:
    """
    Supplied train/test files are taken as given; a single `path` is split
    user-exclusively. External datasets are test-only.
    """
    def read(path: Path, side: Optional[str] = None) -> List[Record]:
        # supplied train and test files number their rows independently
        prefix = f"{ds.name}-{side}" if side else ds.name
        result = load_dataset(path, ds.schema, ds.task, source=ds.name, strict=strict, id_prefix=prefix)
        if result.errors:
            log.warning("%s: %d row(s) rejected", ds.name, len(result.errors))
        return list(result.records)

    if ds.external:
        records: List[Record] = []
        for p, side in ((ds.path, None), (ds.train, "train"), (ds.test, "test")):
            if p is not None:
                records.extend(read(p, side))
        if not records:
            raise DatasetError(f"{ds.name}: no usable records")
        return DatasetSplit(train=(), test=tuple(records), seed=ds.split_seed, ratio=0.0)

    if ds.path is not None:
        records = read(ds.path)
        if not records:
            raise DatasetError(f"{ds.name}: no usable records")
        return split_user_exclusive(records, ratio=ds.split_ratio, seed=ds.split_seed)

    train, test = read(ds.train, "train"), read(ds.test, "test")
    if not test:
        raise DatasetError(f"{ds.name}: test split is empty")
    overlap = {r.user_id for r in train} & {r.user_id for r in test}
    if overlap:
        log.warning("%s: %d user(s) appear in both supplied splits", ds.name, len(overlap))
    return DatasetSplit(train=tuple(train), test=tuple(test), seed=ds.split_seed, ratio=ds.split_ratio)


def load_splits(config: ExperimentConfig, strict: bool = False) -> Dict[str, DatasetSplit]:
    return {ds.name: load_split(ds, strict=strict) for ds in config.datasets}


def write_splits(splits: Dict[str, DatasetSplit], path: Path) -> int:
    rows = []
    for name, split in splits.items():
        for side, records in (("train", split.train), ("test", split.test)):
            rows.extend({"dataset": name, "id": r.id, "split": side, "seed": split.seed, "ratio": split.ratio} for r in records)
    return write_jsonl(path, rows)


@dataclass(frozen=True)
class DatasetSummary:
    dataset: str
    task: str
    train: Optional[DatasetStats]
    test: DatasetStats
    baseline: Optional[EvalReport]  # None for test-only datasets


def summarize(config: ExperimentConfig, splits: Dict[str, DatasetSplit]) -> List[DatasetSummary]:
    out: List[DatasetSummary] = []
    for ds in config.datasets:
        split = splits[ds.name]
        train_stats = dataset_stats(split.train, ds.task) if split.train else None
        baseline = (
            majority_baseline([r.label for r in split.train], [r.label for r in split.test], ds.task)
            if split.train
            else None
        )
        out.append(
            DatasetSummary(
                dataset=ds.name,
                task=ds.task.task_id,
                train=train_stats,
                test=dataset_stats(split.test, ds.task),
                baseline=baseline,
            )
        )
    return out

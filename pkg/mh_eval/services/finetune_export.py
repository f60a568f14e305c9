from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import yaml

from mh_eval.config import ExperimentConfig
from mh_eval.errors import DigestMismatchError, ExportError
from mh_eval.models import DatasetSplit, Record, TaskSpec
from mh_eval.output.json_out import write_jsonl
from mh_eval.services.corpus import downsample_train
from mh_eval.services.prompt_engine import PromptEngine, render_answer

log = logging.getLogger(__name__)

TRAIN_FILE = "train.jsonl"
EVAL_FILE = "eval.jsonl"
MANIFEST_FILE = "manifest.yaml"


def epochs_for(fraction: float, base_epochs: int = 3) -> int:
    """Epochs scaled up for downsampled sets: ceil(base / fraction)."""
    if not 0 < fraction <= 1:
        raise ExportError(f"fraction must be in (0, 1], got {fraction}")
    return math.ceil(round(base_epochs / fraction, 9))


@dataclass(frozen=True)
class ExportEntry:
    dataset: str
    task: TaskSpec


@dataclass(frozen=True)
class ExportSpec:
    entries: Tuple[ExportEntry, ...]
    strategy: str = "both"
    part1_index: int = 1
    part2_index: int = 0
    fraction: float = 1.0
    seed: int = 0
    base_epochs: int = 3
    learning_rate: float = 2e-5
    warmup_ratio: float = 0.03

    def __post_init__(self) -> None:
        if not self.entries:
            raise ExportError("export needs at least one dataset")
        names = [e.dataset for e in self.entries]
        if len(set(names)) != len(names):
            raise ExportError(f"dataset listed twice in export: {names}")
        if not 0 < self.fraction <= 1:
            raise ExportError(f"fraction must be in (0, 1], got {self.fraction}")

    @property
    def epochs_hint(self) -> int:
        return epochs_for(self.fraction, self.base_epochs)

    @property
    def variant(self) -> str:
        return f"{self.part1_index}.{self.part2_index}"


@dataclass(frozen=True)
class ExportResult:
    train_path: Path
    eval_path: Path
    train_count: int
    eval_count: int
    per_dataset: Mapping[str, Tuple[int, int]]  # dataset -> (train lines, eval lines)
    digests: Mapping[str, str]  # file name -> sha256


@dataclass(frozen=True)
class TrainManifest:
    loss: str = "cross entropy"
    epochs: int = 3
    optimizer: str = "Adam"
    learning_rate: float = 2e-5
    schedule: str = "cosine"
    warmup_ratio: float = 0.03
    fraction: float = 1.0
    seed: int = 0
    strategy: str = "both"
    variant: str = "1.0"
    datasets: Tuple[str, ...] = ()
    files: Mapping[str, Mapping[str, object]] = field(default_factory=dict)  # name -> {sha256, lines}


def export_pairs(
    spec: ExportSpec,
    splits: Mapping[str, DatasetSplit],
    out_dir: Path,
    engine: Optional[PromptEngine] = None,
) -> ExportResult:
    """
    Writes train.jsonl ({instruction, output, task_id, source, record_id}) and
    eval.jsonl (same without output) under `out_dir`.

    Each dataset's train split is downsampled by `spec.fraction`; all datasets'
    pairs are then shuffled together with `spec.seed`. Every instruction is the
    zero-shot prompt of one fixed variant.
    """
    engine = engine or PromptEngine()
    entries = [e for e in spec.entries if e.dataset in splits]
    for e in spec.entries:
        if e.dataset not in splits:
            log.warning("export: no split loaded for %s; skipped", e.dataset)
    if not entries:
        raise ExportError("none of the requested datasets has a loaded split")

    _check_ids(entries, splits)

    train_rows: List[dict] = []
    eval_rows: List[dict] = []
    per_dataset: Dict[str, Tuple[int, int]] = {}
    for e in entries:
        split = splits[e.dataset]
        if not split.train:
            raise ExportError(f"{e.dataset}: no training split to export")
        picked = downsample_train(split.train, spec.fraction, seed=spec.seed)
        for r in picked:
            train_rows.append(_pair(engine, spec, e, r, output=render_answer(r.label)))
        for r in split.test:
            eval_rows.append(_pair(engine, spec, e, r))
        per_dataset[e.dataset] = (len(picked), len(split.test))
        log.info("export: %s -> %d train / %d eval", e.dataset, len(picked), len(split.test))

    test_ids = {row["record_id"] for row in eval_rows}
    leaked = sorted(test_ids & {row["record_id"] for row in train_rows})
    if leaked:
        raise ExportError(f"test record(s) in training pairs: {', '.join(leaked[:5])}")

    order = np.random.default_rng(spec.seed).permutation(len(train_rows))
    train_rows = [train_rows[i] for i in order]

    out_dir = Path(out_dir)
    train_path = out_dir / TRAIN_FILE
    eval_path = out_dir / EVAL_FILE
    n_train = write_jsonl(train_path, train_rows)
    n_eval = write_jsonl(eval_path, eval_rows)
    return ExportResult(
        train_path=train_path,
        eval_path=eval_path,
        train_count=n_train,
        eval_count=n_eval,
        per_dataset=per_dataset,
        digests={TRAIN_FILE: file_digest(train_path), EVAL_FILE: file_digest(eval_path)},
    )


def _pair(
    engine: PromptEngine, spec: ExportSpec, entry: ExportEntry, record: Record, output: Optional[str] = None
) -> dict:
    plan = engine.build_zero_shot(record, entry.task, spec.strategy, spec.part1_index, spec.part2_index)
    row = {"instruction": plan.rendered}
    if output is not None:
        row["output"] = output
    row.update(task_id=entry.task.task_id, source=entry.dataset, record_id=record.id)
    return row


def _check_ids(entries: List[ExportEntry], splits: Mapping[str, DatasetSplit]) -> None:
    owner: Dict[str, str] = {}
    for e in entries:
        split = splits[e.dataset]
        for r in split.train + split.test:
            prev = owner.get(r.id)
            if prev is not None and prev != e.dataset:
                raise ExportError(f"record id {r.id!r} appears in both {prev} and {e.dataset}")
            owner[r.id] = e.dataset


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _count_lines(path: Path) -> int:
    with Path(path).open("rb") as f:
        return sum(1 for line in f if line.strip())


def export_manifest(spec: ExportSpec, result: ExportResult, path: Optional[Path] = None) -> TrainManifest:
    """
    Writes the trainer manifest next to the pair files (or at `path`). The pair
    files are re-hashed first; a file that changed since export is an error.
    """
    files: Dict[str, Mapping[str, object]] = {}
    for p in (result.train_path, result.eval_path):
        if not p.exists():
            raise ExportError(f"pair file missing: {p}")
        digest = file_digest(p)
        expected = result.digests.get(p.name)
        if expected is not None and digest != expected:
            raise DigestMismatchError(f"{p.name} changed after export (sha256 {digest[:12]} != {expected[:12]})")
        files[p.name] = {"sha256": digest, "lines": _count_lines(p)}

    manifest = TrainManifest(
        epochs=spec.epochs_hint,
        learning_rate=spec.learning_rate,
        warmup_ratio=spec.warmup_ratio,
        fraction=spec.fraction,
        seed=spec.seed,
        strategy=spec.strategy,
        variant=spec.variant,
        datasets=tuple(result.per_dataset),
        files=files,
    )
    path = Path(path) if path else result.train_path.parent / MANIFEST_FILE
    data = asdict(manifest)
    data["datasets"] = list(manifest.datasets)
    data["files"] = {k: dict(v) for k, v in files.items()}
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
    return manifest


def verify_manifest(path: Path) -> TrainManifest:
    """Re-hashes the files a manifest lists; raises DigestMismatchError on any change."""
    path = Path(path)
    if not path.exists():
        raise ExportError(f"manifest not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    files = data.get("files") or {}
    for name, meta in files.items():
        p = path.parent / name
        if not p.exists():
            raise ExportError(f"pair file missing: {p}")
        digest = file_digest(p)
        if digest != meta.get("sha256"):
            raise DigestMismatchError(f"{name}: sha256 {digest[:12]} does not match manifest")
    data["datasets"] = tuple(data.get("datasets") or ())
    return TrainManifest(**data)


def spec_from_config(config: ExperimentConfig, fraction: Optional[float] = None) -> ExportSpec:
    """ExportSpec from the config's finetune section; external datasets never export."""
    ft = config.finetune
    wanted = ft.datasets or tuple(d.name for d in config.datasets if not d.external)
    entries = []
    for name in wanted:
        ds = config.dataset(name)
        if ds.external:
            log.warning("export: %s is evaluation-only; skipped", name)
            continue
        entries.append(ExportEntry(dataset=name, task=ds.task))
    return ExportSpec(
        entries=tuple(entries),
        strategy=ft.strategy,
        part1_index=ft.part1_index,
        part2_index=ft.part2_index,
        fraction=ft.fraction if fraction is None else fraction,
        seed=ft.seed,
        base_epochs=ft.base_epochs,
        learning_rate=ft.learning_rate,
        warmup_ratio=ft.warmup_ratio,
    )

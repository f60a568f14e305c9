from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from queue import Queue
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import yaml
from tqdm import tqdm

from mh_eval.backends import Backend, ResponseCache, make_backend
from mh_eval.backends.mock import MockRule
from mh_eval.config import ExperimentConfig
from mh_eval.errors import BackendError, BudgetExceededError, MhEvalError, PromptError
from mh_eval.models import DatasetSplit, Record, RunRecord, TaskSpec
from mh_eval.output.json_out import dumps_line, read_jsonl, write_jsonl
from mh_eval.services.metrics import ReportKey
from mh_eval.services.parsing import LabelParser
from mh_eval.services.prompt_engine import Exemplar, PromptEngine, PromptPlan
from mh_eval.services.splits import load_splits, write_splits
from mh_eval.tasks import default_shot_count

log = logging.getLogger(__name__)

RECORDS_FILE = "run_records.jsonl"
PLAN_FILE = "plan.json"
STATUS_FILE = "status.json"
CONFIG_FILE = "config.resolved.yaml"
SPLITS_FILE = "splits.jsonl"

STATUS_BUDGET_EXCEEDED = "budget_exceeded"


# -----------------------------
# Planning
# -----------------------------
@dataclass(frozen=True)
class Cell:
    """One scored inference: a test record under one (model, mode, strategy, variant, repeat)."""

    dataset: str
    task: TaskSpec
    record: Record
    model: str
    mode: str
    strategy: str
    part1_index: int
    part2_index: int
    repeat_index: int

    @property
    def variant(self) -> str:
        return f"{self.part1_index}.{self.part2_index}"

    @property
    def key(self) -> tuple:
        return (self.dataset, self.record.id, self.model, self.mode, self.strategy, self.variant, self.repeat_index)

    @property
    def group(self) -> ReportKey:
        return ReportKey(self.dataset, self.task.task_id, self.model, self.mode, self.strategy)


@dataclass(frozen=True)
class PlanRow:
    key: ReportKey
    variants: int
    repeats: int
    records: int

    @property
    def cells(self) -> int:
        return self.variants * self.repeats * self.records


def plan_cells(
    config: ExperimentConfig,
    splits: Mapping[str, DatasetSplit],
    engine: Optional[PromptEngine] = None,
) -> List[Cell]:
    """Every cell the config asks for, in a fixed order."""
    engine = engine or PromptEngine()
    cells: List[Cell] = []
    for ds in config.datasets:
        split = splits[ds.name]
        for model in config.models:
            for mode in config.modes:
                if mode == "few_shot" and (ds.external or not split.train):
                    log.info("%s: no training split; few-shot cells skipped", ds.name)
                    continue
                if mode == "few_shot":
                    shots = config.few_shot.shots.get(ds.task.task_id, default_shot_count(ds.task))
                    if len(split.train) < shots:
                        log.warning(
                            "%s: %d training record(s) for %d exemplar(s); few-shot cells skipped",
                            ds.name, len(split.train), shots,
                        )
                        continue
                repeats = config.few_shot.repeats if mode == "few_shot" else config.zero_shot_repeats
                for strategy in config.strategies:
                    for p1, p2 in engine.enumerate_variants(ds.task, strategy):
                        for rep in range(repeats):
                            cells.extend(
                                Cell(ds.name, ds.task, r, model.name, mode, strategy, p1, p2, rep)
                                for r in split.test
                            )
    return cells


def summarize_plan(cells: Sequence[Cell]) -> List[PlanRow]:
    groups: "OrderedDict[ReportKey, Tuple[Set[str], Set[int], Set[str]]]" = OrderedDict()
    for c in cells:
        variants, repeats, records = groups.setdefault(c.group, (set(), set(), set()))
        variants.add(c.variant)
        repeats.add(c.repeat_index)
        records.add(c.record.id)
    return [PlanRow(k, len(v), len(rp), len(rc)) for k, (v, rp, rc) in groups.items()]


def expected_counts(cells: Sequence[Cell]) -> Dict[str, int]:
    """"dataset|task|model|mode|strategy" -> planned cell count (plan.json payload)."""
    out: Dict[str, int] = {}
    for c in cells:
        k = "|".join(c.group.as_tuple())
        out[k] = out.get(k, 0) + 1
    return out


# -----------------------------
# Few-shot exemplars
# -----------------------------
def select_exemplars(train: Sequence[Record], shots: int, rng: np.random.Generator) -> List[Exemplar]:
    """
    Class-balanced draw without replacement: classes take turns in ordinal
    order, then the picked exemplars are shuffled.
    """
    if shots < 1:
        raise PromptError("few-shot needs at least one exemplar")
    if len(train) < shots:
        raise PromptError(f"training split has {len(train)} record(s), {shots} exemplar(s) requested")

    pools: Dict[int, List[Record]] = {}
    for r in train:
        pools.setdefault(r.label.ordinal, []).append(r)
    order = {o: [pool[i] for i in rng.permutation(len(pool))] for o, pool in sorted(pools.items())}

    picked: List[Record] = []
    while len(picked) < shots:
        for o in order:
            if order[o] and len(picked) < shots:
                picked.append(order[o].pop(0))
    return [(picked[i], picked[i].label) for i in rng.permutation(len(picked))]


# -----------------------------
# Execution
# -----------------------------
class _Lanes:
    """Consecutive backend failures per model; a lane closes at the limit."""

    def __init__(self, limit: int) -> None:
        self.limit = limit
        self._lock = threading.Lock()
        self._streak: Dict[str, int] = {}
        self.aborted: Set[str] = set()

    def is_open(self, model: str) -> bool:
        with self._lock:
            return model not in self.aborted

    def success(self, model: str) -> None:
        with self._lock:
            self._streak[model] = 0

    def failure(self, model: str) -> bool:
        """Returns True when this failure closes the lane."""
        with self._lock:
            n = self._streak.get(model, 0) + 1
            self._streak[model] = n
            if n >= self.limit and model not in self.aborted:
                self.aborted.add(model)
                return True
            return False


@dataclass
class ExecutionStats:
    written: int = 0
    failed: int = 0
    skipped: int = 0
    aborted_models: Tuple[str, ...] = ()


class CellExecutor:
    """
    Runs cells on a bounded thread pool. Workers push results onto a queue and
    one writer thread appends them to the records file, so the file has a
    single writer whatever the concurrency.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        backends: Mapping[str, Backend],
        splits: Mapping[str, DatasetSplit],
        engine: Optional[PromptEngine] = None,
        parser: Optional[LabelParser] = None,
    ) -> None:
        self.config = config
        self.backends = backends
        self.splits = splits
        self.engine = engine or PromptEngine()
        self.parser = parser or LabelParser(self.engine.catalog)
        self._models = {m.name: m for m in config.models}

    def execute(
        self,
        cells: Sequence[Cell],
        records_path: Path,
        progress: bool = True,
        stats: Optional[ExecutionStats] = None,
    ) -> ExecutionStats:
        stats = stats if stats is not None else ExecutionStats()
        lanes = _Lanes(self.config.max_consecutive_failures)
        q: Queue = Queue()

        def writer() -> None:
            with Path(records_path).open("a", encoding="utf-8", newline="\n") as f, tqdm(
                total=len(cells), unit="cell", disable=not progress, leave=False
            ) as bar:
                while True:
                    item = q.get()
                    if item is None:
                        return
                    status, payload = item
                    if status == "ok":
                        f.write(dumps_line(payload.to_dict()))
                        f.flush()
                        stats.written += 1
                    elif status == "err":
                        stats.failed += 1
                    else:
                        stats.skipped += 1
                    bar.update(1)

        def work(cell: Cell) -> None:
            if not lanes.is_open(cell.model):
                q.put(("skip", cell))
                return
            try:
                record = self.score(cell)
            except BackendError as e:
                log.warning("%s / %s: %s", cell.model, cell.record.id, e)
                if lanes.failure(cell.model):
                    log.error("%s: %d consecutive backend errors; lane aborted", cell.model, lanes.limit)
                q.put(("err", cell))
                return
            except MhEvalError as e:
                # not a provider failure; the lane stays open
                log.error("%s / %s: %s", cell.model, cell.record.id, e)
                q.put(("err", cell))
                return
            lanes.success(cell.model)
            q.put(("ok", record))

        thread = threading.Thread(target=writer, daemon=True)
        thread.start()
        try:
            with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
                futures = [pool.submit(work, c) for c in cells]
                for fut in futures:
                    fut.result()
        finally:
            q.put(None)
            thread.join()
            stats.aborted_models = tuple(sorted(lanes.aborted))
        return stats

    def score(self, cell: Cell) -> RunRecord:
        model = self._models[cell.model]
        plan = self.build_plan(cell)
        if plan is None:
            return self._record(cell, prompt_fingerprint="", raw="", pred=None, status=STATUS_BUDGET_EXCEEDED)

        max_tokens = model.cot_max_output_tokens if cell.mode == "cot" else model.max_output_tokens
        response = self.backends[cell.model].complete(plan.rendered, max_output_tokens=max_tokens, record_id=cell.record.id)
        outcome = self.parser.parse(response.text, cell.task)
        return self._record(
            cell,
            prompt_fingerprint=response.request_fingerprint,
            raw=response.text,
            pred=outcome.label.name if outcome.label else None,
            status=outcome.status,
            rule_id=outcome.rule_id,
            span=outcome.matched_span,
        )

    def build_plan(self, cell: Cell) -> Optional[PromptPlan]:
        args = (cell.record, cell.task, cell.strategy, cell.part1_index, cell.part2_index)
        if cell.mode == "zero_shot":
            return self.engine.build_zero_shot(*args)
        if cell.mode == "cot":
            return self.engine.build_cot(*args)

        fs = self.config.few_shot
        shots = fs.shots.get(cell.task.task_id, default_shot_count(cell.task))
        train = self.splits[cell.dataset].train
        last: Optional[BudgetExceededError] = None
        for attempt in range(fs.max_resamples + 1):
            # same exemplars for every query of a (dataset, repeat, attempt)
            rng = np.random.default_rng([fs.seed, cell.repeat_index, zlib.crc32(cell.dataset.encode("utf-8")), attempt])
            exemplars = select_exemplars(train, shots, rng)
            try:
                return self.engine.build_few_shot(
                    cell.record, exemplars, cell.task, cell.strategy, cell.part1_index, cell.part2_index,
                    token_budget=fs.token_budget, shots=shots,
                )
            except BudgetExceededError as e:
                last = e
        log.warning("%s: few-shot prompt over budget after %d draw(s): %s", cell.record.id, fs.max_resamples + 1, last)
        return None

    @staticmethod
    def _record(
        cell: Cell,
        prompt_fingerprint: str,
        raw: str,
        pred: Optional[str],
        status: str,
        rule_id: Optional[str] = None,
        span: str = "",
    ) -> RunRecord:
        return RunRecord(
            record_id=cell.record.id,
            dataset=cell.dataset,
            task=cell.task.task_id,
            model=cell.model,
            mode=cell.mode,
            strategy=cell.strategy,
            variant=cell.variant,
            repeat_index=cell.repeat_index,
            prompt_fingerprint=prompt_fingerprint,
            raw_response=raw,
            pred=pred,
            status=status,
            rule_id=rule_id,
            matched_span=span,
            gold=cell.record.label.name,
        )


# -----------------------------
# Run directory
# -----------------------------
@dataclass(frozen=True)
class RunResult:
    run_dir: Path
    planned: int
    completed: int
    resumed: int
    failed: int
    aborted_models: Tuple[str, ...] = field(default_factory=tuple)
    state: str = "complete"  # complete | partial

    @property
    def partial(self) -> bool:
        return self.state != "complete"


def run_dir_for(config: ExperimentConfig) -> Path:
    slug = re.sub(r"[^A-Za-z0-9_.-]+", "-", config.name).strip("-") or "run"
    return config.output_dir / f"{slug}-{config.digest()[:12]}"


def load_run_records(run_dir: Path) -> List[RunRecord]:
    rows = read_jsonl(Path(run_dir) / RECORDS_FILE, tolerate_torn_tail=True)
    return [RunRecord.from_dict(r) for r in rows]


def _row_key(r: RunRecord) -> tuple:
    return (r.dataset,) + r.key


def _restore(records_path: Path) -> Dict[tuple, RunRecord]:
    """Valid records already on disk, first occurrence per key; the file is rewritten clean."""
    done: "OrderedDict[tuple, RunRecord]" = OrderedDict()
    for r in load_run_records(records_path.parent):
        done.setdefault(_row_key(r), r)
    write_jsonl(records_path, (r.to_dict() for r in done.values()))
    return done


def write_status(run_dir: Path, state: str, planned: int, completed: int, failed: int = 0, aborted: Sequence[str] = ()) -> None:
    payload = {"state": state, "planned": planned, "completed": completed, "failed": failed, "aborted_models": list(aborted)}
    (Path(run_dir) / STATUS_FILE).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_status(run_dir: Path) -> dict:
    path = Path(run_dir) / STATUS_FILE
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _cache_root(config: ExperimentConfig, mock_rule: Optional[MockRule]) -> Path:
    root = config.resolved_cache_dir()
    if mock_rule is None:
        return root
    # mock answers never share entries with provider answers or other rules
    tag = hashlib.sha256(repr(mock_rule).encode("utf-8")).hexdigest()[:12]
    return root / f"mock-{tag}"


def run_experiment(
    config: ExperimentConfig,
    mock_rule: Optional[MockRule] = None,
    resume: bool = False,
    backends: Optional[Mapping[str, Backend]] = None,
    progress: bool = True,
) -> RunResult:
    """
    Runs every planned cell not already recorded and writes the run directory:
      config.resolved.yaml, plan.json, splits.jsonl, run_records.jsonl, status.json
    Without `resume` earlier records are discarded; responses still come from
    the shared cache.
    """
    splits = load_splits(config)
    engine = PromptEngine()
    cells = plan_cells(config, splits, engine)

    run_dir = run_dir_for(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False, allow_unicode=True), encoding="utf-8")
    (run_dir / PLAN_FILE).write_text(
        json.dumps({"total": len(cells), "cells": expected_counts(cells)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    write_splits(splits, run_dir / SPLITS_FILE)

    records_path = run_dir / RECORDS_FILE
    if not resume:
        records_path.unlink(missing_ok=True)
    done = _restore(records_path)
    pending = [c for c in cells if c.key not in done]
    log.info("run %s: %d planned, %d already recorded, %d to go", run_dir.name, len(cells), len(done), len(pending))

    owned = backends is None
    if backends is None:
        cache = ResponseCache(_cache_root(config, mock_rule))
        backends = {m.name: make_backend(m, mock_rule=mock_rule, cache=cache) for m in config.models}

    write_status(run_dir, "running", len(cells), len(done))
    stats = ExecutionStats()
    try:
        executor = CellExecutor(config, backends, splits, engine=engine)
        executor.execute(pending, records_path, progress=progress, stats=stats)
    finally:
        if owned:
            for b in backends.values():
                b.close()
        # an interrupted run still leaves a final state behind
        completed = len(done) + stats.written
        state = "complete" if completed == len(cells) else "partial"
        write_status(run_dir, state, len(cells), completed, stats.failed, stats.aborted_models)
        if state == "partial":
            log.warning("run %s is partial: %d of %d cells recorded", run_dir.name, completed, len(cells))

    return RunResult(
        run_dir=run_dir,
        planned=len(cells),
        completed=completed,
        resumed=len(done),
        failed=stats.failed,
        aborted_models=stats.aborted_models,
        state=state,
    )

from __future__ import annotations

import json

import pytest
import yaml

from mh_eval.config import load_config
from mh_eval.errors import DigestMismatchError, ExportError
from mh_eval.models import DatasetSplit
from mh_eval.services.corpus import round_half_up
from mh_eval.services.finetune_export import (
    EVAL_FILE,
    MANIFEST_FILE,
    TRAIN_FILE,
    ExportEntry,
    ExportSpec,
    epochs_for,
    export_manifest,
    export_pairs,
    spec_from_config,
    verify_manifest,
)
from mh_eval.services.prompt_engine import PromptEngine
from mh_eval.services.splits import load_splits
from mh_eval.tasks import get_task
from tests.conftest import binary_rows, make_record, write_csv

# train sizes of the four training sets
SIZES = {"dreaddit": ("1", 2838), "depseverity": ("3", 2842), "sdcnl": ("4", 1516), "cssrs-suicide": ("6", 400)}


def _split(name, task, n_train, n_test=6):
    names = task.class_names
    train = tuple(make_record(task, f"{name}-tr{i}", names[i % len(names)]) for i in range(n_train))
    test = tuple(make_record(task, f"{name}-te{i}", names[i % len(names)]) for i in range(n_test))
    return DatasetSplit(train=train, test=test, seed=0, ratio=0.8)


@pytest.fixture(scope="module")
def corpus():
    splits, entries = {}, []
    for name, (task_id, n) in SIZES.items():
        task = get_task(task_id)
        splits[name] = _split(name, task, n)
        entries.append(ExportEntry(name, task))
    return splits, tuple(entries)


def _lines(path):
    return path.read_text(encoding="utf-8").splitlines()


def test_full_export_line_counts(tmp_path, corpus):
    splits, entries = corpus
    result = export_pairs(ExportSpec(entries), splits, tmp_path)

    assert result.train_count == 7596 == len(_lines(tmp_path / TRAIN_FILE))
    assert result.eval_count == 24
    assert result.per_dataset["dreaddit"] == (2838, 6)
    assert ExportSpec(entries).epochs_hint == 3


@pytest.mark.parametrize("fraction, epochs", [(0.5, 6), (0.2, 15), (0.1, 30), (0.05, 60), (0.01, 300)])
def test_downsampled_export(tmp_path, corpus, fraction, epochs):
    splits, entries = corpus
    spec = ExportSpec(entries, fraction=fraction)
    result = export_pairs(spec, splits, tmp_path)

    assert spec.epochs_hint == epochs == epochs_for(fraction)
    assert result.train_count == sum(round_half_up(fraction * n) for _, n in SIZES.values())
    manifest = export_manifest(spec, result)
    assert manifest.epochs == epochs and manifest.fraction == fraction


def test_rows_and_no_leakage(tmp_path, corpus):
    splits, entries = corpus
    export_pairs(ExportSpec(entries, fraction=0.1), splits, tmp_path)
    train = [json.loads(line) for line in _lines(tmp_path / TRAIN_FILE)]
    evals = [json.loads(line) for line in _lines(tmp_path / EVAL_FILE)]

    assert list(train[0]) == ["instruction", "output", "task_id", "source", "record_id"]
    assert list(evals[0]) == ["instruction", "task_id", "source", "record_id"]
    assert not {r["record_id"] for r in train} & {r["record_id"] for r in evals}
    # shuffled across datasets
    assert len({r["source"] for r in train[:50]}) > 1


def test_instruction_is_zero_shot_prompt(tmp_path, corpus):
    splits, entries = corpus
    spec = ExportSpec(entries[:1], strategy="context", part1_index=0, part2_index=2)
    export_pairs(spec, splits, tmp_path)
    row = json.loads(_lines(tmp_path / TRAIN_FILE)[0])

    task = get_task("1")
    record = next(r for r in splits["dreaddit"].train if r.id == row["record_id"])
    assert row["instruction"] == PromptEngine().build_zero_shot(record, task, "context", 0, 2).rendered
    assert row["output"] == record.label.display


def test_rerun_is_byte_identical(tmp_path, corpus):
    splits, entries = corpus
    spec = ExportSpec(entries, fraction=0.2, seed=4)
    export_pairs(spec, splits, tmp_path / "a")
    export_pairs(spec, splits, tmp_path / "b")
    for name in (TRAIN_FILE, EVAL_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    export_pairs(ExportSpec(entries, fraction=0.2, seed=5), splits, tmp_path / "c")
    assert (tmp_path / "a" / TRAIN_FILE).read_bytes() != (tmp_path / "c" / TRAIN_FILE).read_bytes()


def test_manifest_and_verify(tmp_path, corpus):
    splits, entries = corpus
    spec = ExportSpec(entries[-1:], fraction=0.5)
    result = export_pairs(spec, splits, tmp_path)
    export_manifest(spec, result)

    data = yaml.safe_load((tmp_path / MANIFEST_FILE).read_text(encoding="utf-8"))
    assert data["loss"] == "cross entropy" and data["optimizer"] == "Adam" and data["schedule"] == "cosine"
    assert data["datasets"] == ["cssrs-suicide"]
    assert data["files"][TRAIN_FILE]["lines"] == 200

    verified = verify_manifest(tmp_path / MANIFEST_FILE)
    assert verified.epochs == 6 and verified.datasets == ("cssrs-suicide",)

    with (tmp_path / TRAIN_FILE).open("a", encoding="utf-8") as f:
        f.write('{"instruction": "x", "output": "Yes"}\n')
    with pytest.raises(DigestMismatchError):
        verify_manifest(tmp_path / MANIFEST_FILE)


def test_manifest_refuses_changed_files(tmp_path, corpus):
    splits, entries = corpus
    spec = ExportSpec(entries[-1:])
    result = export_pairs(spec, splits, tmp_path)
    (tmp_path / EVAL_FILE).write_text("", encoding="utf-8")
    with pytest.raises(DigestMismatchError):
        export_manifest(spec, result)


def test_export_errors(tmp_path, corpus, task1):
    splits, entries = corpus
    with pytest.raises(ExportError):
        ExportSpec(())
    with pytest.raises(ExportError):
        ExportSpec(entries, fraction=0)
    with pytest.raises(ExportError):
        ExportSpec(entries[:1] * 2)

    with pytest.raises(ExportError, match="loaded split"):
        export_pairs(ExportSpec((ExportEntry("nope", task1),)), splits, tmp_path)

    clash = {"a": _split("same", task1, 4), "b": _split("same", task1, 4)}
    with pytest.raises(ExportError, match="appears in both"):
        export_pairs(ExportSpec((ExportEntry("a", task1), ExportEntry("b", task1))), clash, tmp_path)

    shared = make_record(task1, "dup", "yes")
    leaky = {"a": DatasetSplit(train=(shared,), test=(shared,), seed=0, ratio=0.8)}
    with pytest.raises(ExportError, match="test record"):
        export_pairs(ExportSpec((ExportEntry("a", task1),)), leaky, tmp_path)


def test_spec_from_config_skips_external(tmp_path, write_config):
    write_csv(tmp_path / "all.csv", binary_rows(20))
    path = write_config(
        {
            "name": "ft",
            "datasets": [
                {"name": "dreaddit", "task": 1, "path": "all.csv"},
                {"name": "sad", "task": 1, "test": "all.csv"},
            ],
            "models": [{"name": "m"}],
            "finetune": {"fraction": 0.5, "seed": 2},
        }
    )
    cfg = load_config(path)
    spec = spec_from_config(cfg)
    assert [e.dataset for e in spec.entries] == ["dreaddit"]
    assert spec.fraction == 0.5 and spec.seed == 2
    assert spec_from_config(cfg, fraction=0.1).fraction == 0.1

    result = export_pairs(spec, load_splits(cfg), tmp_path / "ft")
    assert result.train_count == round_half_up(0.5 * len(load_splits(cfg)["dreaddit"].train))


def test_supplied_splits_without_id_column(tmp_path, binary_experiment):
    cfg = load_config(binary_experiment(n_test=10, ids=False))
    splits = load_splits(cfg)
    train_ids = {r.id for r in splits["synthetic"].train}
    test_ids = {r.id for r in splits["synthetic"].test}
    assert not train_ids & test_ids
    assert "synthetic-train-1" in train_ids and "synthetic-test-1" in test_ids

    result = export_pairs(spec_from_config(cfg), splits, tmp_path / "ft")
    assert result.per_dataset["synthetic"] == (20, 10)

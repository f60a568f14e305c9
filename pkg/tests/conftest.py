from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterable, List, Optional

import pandas as pd
import pytest
import yaml

from mh_eval.models import Record, TaskSpec
from mh_eval.tasks import get_task

FIXTURES = Path(__file__).parent / "fixtures"


def make_record(task: TaskSpec, rid: str, label: str, text: Optional[str] = None, user: Optional[str] = None) -> Record:
    return Record(id=rid, text=text or f"post {rid}", label=task.label(label), user_id=user or f"u-{rid}", source="fx")


def write_csv(path: Path, rows: Iterable[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows)).to_csv(path, index=False)
    return path


def binary_rows(n: int, prefix: str = "r") -> List[dict]:
    """n rows, alternating yes/no, one user per row, unique texts."""
    return [
        {
            "id": f"{prefix}{i:04d}",
            "text": f"Synthetic post number {i} from {prefix}.",
            "label": "yes" if i % 2 else "no",
            "user_id": f"{prefix}-user-{i}",
        }
        for i in range(n)
    ]


def without_ids(rows: Iterable[dict]) -> List[dict]:
    return [{k: v for k, v in r.items() if k != "id"} for r in rows]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def task1() -> TaskSpec:
    return get_task("1")


@pytest.fixture
def task3() -> TaskSpec:
    return get_task("3")


@pytest.fixture
def task6() -> TaskSpec:
    return get_task("6")


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[..., Path]:
    """Writes a config YAML into tmp_path and returns its path."""

    def _write(data: dict, name: str = "experiment.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def binary_experiment(tmp_path: Path, write_config) -> Callable[..., Path]:
    """
    Mock-ready binary experiment: `n_test` supplied test rows, a small train
    file, one model, zero-shot basic unless overridden. ids=False drops the
    id column from both files.
    """

    def _make(n_test: int = 200, n_train: int = 20, ids: bool = True, **overrides) -> Path:
        train, test = binary_rows(n_train, prefix="tr"), binary_rows(n_test, prefix="te")
        if not ids:
            train, test = without_ids(train), without_ids(test)
        write_csv(tmp_path / "data" / "train.csv", train)
        write_csv(tmp_path / "data" / "test.csv", test)
        data = {
            "name": "mock-binary",
            "output_dir": "runs",
            "concurrency": 4,
            "modes": ["zero_shot"],
            "strategies": ["basic"],
            "datasets": [
                {
                    "name": "synthetic",
                    "task": 1,
                    "train": "data/train.csv",
                    "test": "data/test.csv",
                    "schema": {"id": "id"} if ids else {},
                }
            ],
            "models": [{"name": "mock-model"}],
        }
        data.update(overrides)
        return write_config(data)

    return _make

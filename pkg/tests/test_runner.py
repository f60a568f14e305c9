from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter

import numpy as np
import pytest

from mh_eval.backends import Backend, MockBackend
from mh_eval.backends.mock import FixedRule, OracleRule
from mh_eval.config import load_config
from mh_eval.errors import BackendError, PromptError
from mh_eval.services.reporting import compute_reports, render_report
from mh_eval.services.runner import (
    PLAN_FILE,
    CellExecutor,
    RECORDS_FILE,
    STATUS_BUDGET_EXCEEDED,
    load_run_records,
    plan_cells,
    read_status,
    run_dir_for,
    run_experiment,
    select_exemplars,
    summarize_plan,
)
from mh_eval.services.splits import load_splits
from tests.conftest import binary_rows, make_record, write_csv


def oracle_85(n=200, prefix="te") -> OracleRule:
    """Right on 85% of each class of binary_rows(n)."""
    answers = {}
    seen = Counter()
    for i in range(n):
        gold = "Yes" if i % 2 else "No"
        wrong = "No" if i % 2 else "Yes"
        seen[gold] += 1
        answers[f"{prefix}{i:04d}"] = gold if seen[gold] <= n * 85 // 200 else wrong
    return OracleRule(answers=answers)


class FailingBackend(Backend):
    def __init__(self, config):
        super().__init__(config)
        self.calls = 0

    def _produce(self, prompt, max_tokens, fingerprint, record_id):
        self.calls += 1
        raise BackendError("HTTP 503 after 4 attempt(s)", fingerprint)


class ExplodingBackend(Backend):
    def _produce(self, prompt, max_tokens, fingerprint, record_id):
        raise RuntimeError("disk full")


def _records_lines(run_dir):
    return (run_dir / RECORDS_FILE).read_text(encoding="utf-8").splitlines()


def test_oracle_run_scores_point_85(binary_experiment):
    cfg = load_config(binary_experiment())
    result = run_experiment(cfg, mock_rule=oracle_85(), progress=False)

    assert result.planned == result.completed == 600
    assert not result.partial and result.failed == 0
    reports = compute_reports(load_run_records(result.run_dir))
    (report,) = reports.values()
    assert report.n_variants == 3
    assert report.mean == pytest.approx(0.85, abs=1e-12)
    assert all(v.balanced_accuracy == pytest.approx(0.85) for v in report.per_variant)
    assert read_status(result.run_dir)["state"] == "complete"

    summary = render_report(result.run_dir)
    assert "0.850" in summary and "600/600" in summary


def test_fixed_answer_scores_half(binary_experiment):
    cfg = load_config(binary_experiment(n_test=40))
    result = run_experiment(cfg, mock_rule=FixedRule("Yes"), progress=False)
    (report,) = compute_reports(load_run_records(result.run_dir)).values()
    assert report.mean == 0.5


def test_resume_after_kill_matches_full_run(binary_experiment):
    cfg = load_config(binary_experiment())
    rule = oracle_85()
    full = run_experiment(cfg, mock_rule=rule, progress=False)
    expected = render_report(full.run_dir)

    lines = _records_lines(full.run_dir)
    torn = lines[300][: len(lines[300]) // 2]
    (full.run_dir / RECORDS_FILE).write_text("\n".join(lines[:300]) + "\n" + torn, encoding="utf-8")

    backend = MockBackend(cfg.models[0], rule)
    resumed = run_experiment(cfg, resume=True, backends={"mock-model": backend}, progress=False)

    assert resumed.resumed == 300 and resumed.completed == 600
    assert backend.calls == 300
    assert len(_records_lines(full.run_dir)) == 600
    assert render_report(full.run_dir) == expected

    again = run_experiment(cfg, resume=True, backends={"mock-model": MockBackend(cfg.models[0], rule)}, progress=False)
    assert again.resumed == 600


def test_rerun_without_resume_hits_cache(binary_experiment):
    cfg = load_config(binary_experiment(n_test=20))
    run_experiment(cfg, mock_rule=FixedRule("No"), progress=False)
    result = run_experiment(cfg, mock_rule=FixedRule("No"), progress=False)
    assert result.resumed == 0 and result.completed == 60
    assert len(list(cfg.resolved_cache_dir().rglob("*.json"))) == 60


def test_mock_rules_do_not_share_cache(binary_experiment):
    cfg = load_config(binary_experiment(n_test=20))
    run_experiment(cfg, mock_rule=FixedRule("No"), progress=False)
    result = run_experiment(cfg, mock_rule=FixedRule("Yes"), progress=False)
    assert {r.pred for r in load_run_records(result.run_dir)} == {"yes"}


def test_concurrency_does_not_change_results(tmp_path, binary_experiment):
    path = binary_experiment(n_test=60, strategies=["basic", "context"], modes=["zero_shot", "few_shot"])
    rule = oracle_85(60)
    outputs = []
    for workers in (1, 16):
        cfg = dataclasses.replace(load_config(path, output_dir=tmp_path / f"c{workers}"), concurrency=workers)
        result = run_experiment(cfg, mock_rule=rule, progress=False)
        outputs.append((sorted(_records_lines(result.run_dir)), render_report(result.run_dir, "summary"), render_report(result.run_dir, "deltas")))
    assert outputs[0] == outputs[1]


def test_plan_counts(binary_experiment):
    cfg = load_config(binary_experiment(n_test=10, modes=["zero_shot", "few_shot", "cot"], strategies=["basic", "context"]))
    cells = plan_cells(cfg, load_splits(cfg))
    assert len(cells) == (9 + 27 + 9) * 10
    rows = {(p.key.mode, p.key.strategy): p for p in summarize_plan(cells)}
    assert rows[("few_shot", "context")].cells == 6 * 3 * 10
    assert rows[("cot", "basic")].variants == 3 and rows[("cot", "basic")].repeats == 1
    assert len({c.key for c in cells}) == len(cells)


def test_plan_file_and_cot_output_limit(binary_experiment):
    cfg = load_config(binary_experiment(n_test=4, modes=["cot"], strategies=["basic"]))
    result = run_experiment(cfg, mock_rule=FixedRule("The poster is stressed.\nAnswer: Yes"), progress=False)
    plan = json.loads((result.run_dir / PLAN_FILE).read_text(encoding="utf-8"))
    assert plan["total"] == 12
    assert plan["cells"] == {"synthetic|1|mock-model|cot|basic": 12}
    records = load_run_records(result.run_dir)
    assert {r.rule_id for r in records} == {"answer_anchor"}


def test_few_shot_over_budget_is_recorded(binary_experiment):
    cfg = load_config(binary_experiment(n_test=6, modes=["few_shot"], few_shot={"token_budget": 10, "repeats": 1}))
    result = run_experiment(cfg, mock_rule=FixedRule("Yes"), progress=False)
    records = load_run_records(result.run_dir)
    assert result.completed == 18
    assert {r.status for r in records} == {STATUS_BUDGET_EXCEEDED}
    assert all(r.raw_response == "" and r.pred is None for r in records)
    (report,) = compute_reports(records).values()
    assert report.mean == 0.0


def test_failing_lane_aborts_and_run_is_partial(binary_experiment):
    cfg = load_config(binary_experiment(n_test=20, concurrency=1, max_consecutive_failures=5))
    backend = FailingBackend(cfg.models[0])
    result = run_experiment(cfg, backends={"mock-model": backend}, progress=False)

    assert backend.calls == 5
    assert result.aborted_models == ("mock-model",)
    assert result.partial and result.completed == 0 and result.failed == 5
    assert read_status(result.run_dir)["state"] == "partial"


def test_partial_run_report_is_flagged(binary_experiment):
    cfg = load_config(binary_experiment(n_test=10))
    full = run_experiment(cfg, mock_rule=FixedRule("No"), progress=False)
    lines = _records_lines(full.run_dir)
    (full.run_dir / RECORDS_FILE).write_text("\n".join(lines[:12]) + "\n", encoding="utf-8")
    status_path = full.run_dir / "status.json"
    status = json.loads(status_path.read_text(encoding="utf-8"))
    status.update(state="partial", completed=12)
    status_path.write_text(json.dumps(status), encoding="utf-8")

    text = render_report(full.run_dir)
    assert "12/30*" in text
    assert text.endswith("* partial run: 12/30 cells recorded\n")


def test_select_exemplars_is_class_balanced(task3):
    train = [make_record(task3, f"r{i}", task3.class_names[i % 4]) for i in range(40)]
    picked = select_exemplars(train, 4, np.random.default_rng(0))
    assert sorted(label.name for _, label in picked) == sorted(task3.class_names)
    again = select_exemplars(train, 4, np.random.default_rng(0))
    assert picked == again

    six = select_exemplars(train, 6, np.random.default_rng(1))
    counts = Counter(label.name for _, label in six)
    assert max(counts.values()) - min(counts.values()) <= 1 and len(counts) == 4

    with pytest.raises(PromptError):
        select_exemplars(train[:3], 4, np.random.default_rng(0))


def test_select_exemplars_with_missing_class(task1):
    train = [make_record(task1, f"r{i}", "no") for i in range(5)]
    picked = select_exemplars(train, 2, np.random.default_rng(0))
    assert [label.name for _, label in picked] == ["no", "no"]


def test_few_shot_run_over_supplied_files_without_ids(binary_experiment):
    cfg = load_config(binary_experiment(n_test=10, ids=False, modes=["few_shot"], few_shot={"repeats": 1}))
    result = run_experiment(cfg, mock_rule=FixedRule("Yes"), progress=False)
    assert result.planned == result.completed == 30
    assert not result.partial and result.failed == 0


def test_oracle_is_exact_when_posts_repeat(tmp_path, binary_experiment):
    cfg = load_config(binary_experiment(n_test=10))
    rows = binary_rows(10, prefix="te")
    rows[1]["text"] = rows[0]["text"]  # same post, different labels
    write_csv(tmp_path / "data" / "test.csv", rows)

    oracle = OracleRule(answers={r["id"]: r["label"].capitalize() for r in rows})
    result = run_experiment(cfg, mock_rule=oracle, progress=False)
    (report,) = compute_reports(load_run_records(result.run_dir)).values()
    assert report.mean == 1.0


def test_few_shot_skipped_when_train_is_smaller_than_shots(tmp_path, write_config, caplog):
    task3 = ["minimal", "mild", "moderate"]
    write_csv(tmp_path / "train.csv", [{"id": f"tr{i}", "text": f"post {i}", "label": task3[i], "user_id": f"u{i}"} for i in range(3)])
    write_csv(tmp_path / "test.csv", [{"id": f"te{i}", "text": f"query {i}", "label": task3[i], "user_id": f"v{i}"} for i in range(3)])
    cfg = load_config(
        write_config(
            {
                "name": "tiny",
                "modes": ["zero_shot", "few_shot"],
                "strategies": ["basic"],
                "datasets": [{"name": "dep", "task": 3, "train": "train.csv", "test": "test.csv", "schema": {"id": "id"}}],
                "models": [{"name": "m"}],
            }
        )
    )
    with caplog.at_level(logging.WARNING):
        cells = plan_cells(cfg, load_splits(cfg))
    assert {c.mode for c in cells} == {"zero_shot"}
    assert "few-shot cells skipped" in caplog.text

    result = run_experiment(cfg, mock_rule=FixedRule("mild"), progress=False)
    assert result.completed == result.planned == len(cells)


def test_prompt_errors_fail_one_cell_and_run_finishes(binary_experiment, monkeypatch):
    cfg = load_config(binary_experiment(n_test=6, concurrency=1))
    real = CellExecutor.build_plan

    def build_plan(self, cell):
        if cell.record.id == "te0002":
            raise PromptError("exemplar 'te0002' is the query record")
        return real(self, cell)

    monkeypatch.setattr(CellExecutor, "build_plan", build_plan)
    result = run_experiment(cfg, mock_rule=FixedRule("No"), progress=False)
    assert result.failed == 3 and result.completed == 15
    assert not result.aborted_models
    assert read_status(result.run_dir)["state"] == "partial"


def test_unexpected_error_still_leaves_final_status(binary_experiment):
    cfg = load_config(binary_experiment(n_test=4))
    with pytest.raises(RuntimeError, match="disk full"):
        run_experiment(cfg, backends={"mock-model": ExplodingBackend(cfg.models[0])}, progress=False)
    status = read_status(run_dir_for(cfg))
    assert status["state"] == "partial" and status["completed"] == 0

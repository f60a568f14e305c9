from __future__ import annotations

import json
import random

import pytest

from mh_eval.services.parsing import RULE_ANSWER, RULE_EXACT, RULE_SCAN, LabelParser, normalize, parse_label
from mh_eval.tasks import TASKS, get_task
from tests.conftest import FIXTURES


def _corpus():
    lines = (FIXTURES / "parser_corpus.jsonl").read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def _passes(item) -> bool:
    out = parse_label(item["text"], get_task(item["task"]))
    got = out.label.name if out.label else None
    return out.status == item["status"] and got == item["expected"]


def test_corpus_size_and_kinds():
    items = _corpus()
    assert len(items) == 60
    assert {"negation", "ambiguity", "cot", "refusal", "empty"} <= {i["kind"] for i in items}


def test_corpus_accuracy_gate():
    items = _corpus()
    passed = sum(_passes(i) for i in items)
    assert passed / len(items) >= 0.95


@pytest.mark.parametrize("item", [i for i in _corpus() if i["kind"] in ("negation", "ambiguity")], ids=lambda i: i["id"])
def test_negation_and_ambiguity_items_all_pass(item):
    assert _passes(item)


def test_rule_ids(task1, task3):
    assert parse_label("Yes", task1).rule_id == RULE_EXACT
    assert parse_label("blah blah\nAnswer: No", task1).rule_id == RULE_ANSWER
    out = parse_label("I would say the level is moderate here", task3)
    assert out.rule_id == RULE_SCAN and out.label.name == "moderate" and out.matched_span == "moderate"


def test_last_answer_anchor_wins(task1):
    out = parse_label("Answer: no wait.\nAnswer: Yes", task1)
    assert out.label.name == "yes"


def test_same_class_connector_is_not_ambiguous(task1):
    out = parse_label("yes and yes", task1)
    assert out.status == "parsed" and out.label.name == "yes"


def test_empty_and_whitespace(task1):
    for text in ("", "   ", "\n\t", "..."):
        assert parse_label(text, task1).status == "unparseable"


def test_normalize():
    assert normalize("  **Yes!**  ") == "yes"
    assert normalize("Answer:\n\n  MILD ") == "answer: mild"
    assert normalize("Café") == "café"


def test_parser_never_raises_on_noise():
    rng = random.Random(99)
    alphabet = "abcdefghijklmnopqrstuvwxyz YESNO/!?.:-\né中"
    parser = LabelParser()
    for _ in range(500):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 80)))
        for task in TASKS.values():
            out = parser.parse(text, task)
            assert out.status in ("parsed", "unparseable", "ambiguous")
            assert (out.label is not None) == (out.status == "parsed")

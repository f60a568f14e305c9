from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Tuple, Union

import yaml

from mh_eval.backends.base import Backend, request_fingerprint
from mh_eval.backends.cache import ResponseCache
from mh_eval.errors import ConfigError, MockScriptExhaustedError
from mh_eval.models import ModelConfig, ModelResponse
from mh_eval.output.json_out import read_jsonl


@dataclass(frozen=True)
class FixedRule:
    text: str


@dataclass(frozen=True)
class KeywordRule:
    """First keyword (case-insensitive) found in the prompt decides the answer."""

    table: Tuple[Tuple[str, str], ...]
    default: str = ""


@dataclass(frozen=True)
class OracleRule:
    """Answers from an injected record_id -> answer map (the hidden labels)."""

    answers: Mapping[str, str] = field(default_factory=dict)
    default: str = ""


@dataclass(frozen=True)
class ScriptedRule:
    responses: Tuple[str, ...]


MockRule = Union[FixedRule, KeywordRule, OracleRule, ScriptedRule]


def mock_complete(
    prompt: str,
    rule: MockRule,
    call_index: int = 0,
    record_id: Optional[str] = None,
    model: str = "mock",
) -> ModelResponse:
    """Deterministic in (prompt, rule, call_index); never touches the network."""
    fp = request_fingerprint(prompt, model, 0.0, 0)
    started = time.monotonic()
    text = _answer(prompt, rule, call_index, record_id, fp)
    return ModelResponse(text=text, model=model, latency=time.monotonic() - started, cache_hit=False, request_fingerprint=fp)


def _answer(prompt: str, rule: MockRule, call_index: int, record_id: Optional[str], fingerprint: str) -> str:
    if isinstance(rule, FixedRule):
        return rule.text
    if isinstance(rule, KeywordRule):
        haystack = prompt.lower()
        for keyword, answer in rule.table:
            if keyword.lower() in haystack:
                return answer
        return rule.default
    if isinstance(rule, OracleRule):
        return rule.answers.get(record_id or "", rule.default)
    if isinstance(rule, ScriptedRule):
        if call_index >= len(rule.responses):
            raise MockScriptExhaustedError(
                f"scripted mock has {len(rule.responses)} response(s), call #{call_index + 1} asked for more",
                fingerprint,
            )
        return rule.responses[call_index]
    raise TypeError(f"unknown mock rule {type(rule).__name__}")


class MockBackend(Backend):
    def __init__(self, config: ModelConfig, rule: MockRule, cache: Optional[ResponseCache] = None) -> None:
        super().__init__(config, cache)
        self.rule = rule
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return self._calls

    def fingerprint(self, prompt: str, max_tokens: int, record_id: Optional[str] = None) -> str:
        fp = super().fingerprint(prompt, max_tokens, record_id)
        if not isinstance(self.rule, OracleRule):
            return fp
        # oracle answers follow the record, so identical texts must not share an entry
        return hashlib.sha256(f"{fp}:{record_id or ''}".encode("utf-8")).hexdigest()

    def _produce(self, prompt: str, max_tokens: int, fingerprint: str, record_id: Optional[str]) -> str:
        with self._lock:
            index = self._calls
            self._calls += 1
        return _answer(prompt, self.rule, index, record_id, fingerprint)


def load_mock_rule(path: Path) -> MockRule:
    """
    YAML rule file, one of:
      kind: fixed      text: "Yes"
      kind: keyword    table: {overwhelmed: "Yes"}   default: "No"
      kind: oracle     answers: {id: answer} | answers_file: answers.jsonl   default: ""
      kind: scripted   responses: ["Yes", "No"]
    answers_file rows are {"record_id": ..., "answer": ...}, relative to the rule file.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"mock rule file not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    kind = str(data.get("kind", "")).strip().lower()

    if kind == "fixed":
        return FixedRule(text=str(data.get("text", "")))
    if kind == "keyword":
        table = tuple((str(k), str(v)) for k, v in (data.get("table") or {}).items())
        return KeywordRule(table=table, default=str(data.get("default", "")))
    if kind == "oracle":
        answers = {str(k): str(v) for k, v in (data.get("answers") or {}).items()}
        if data.get("answers_file"):
            for row in read_jsonl(path.parent / str(data["answers_file"])):
                answers[str(row["record_id"])] = str(row["answer"])
        return OracleRule(answers=answers, default=str(data.get("default", "")))
    if kind == "scripted":
        return ScriptedRule(responses=tuple(str(r) for r in data.get("responses") or ()))
    raise ConfigError(f"{path}: unknown mock kind {kind!r} (fixed | keyword | oracle | scripted)")

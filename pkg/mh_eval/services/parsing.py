from __future__ import annotations

import re
import unicodedata
from typing import Dict, List, Optional, Tuple

from mh_eval.models import ClassLabel, ParseOutcome, TaskSpec
from mh_eval.services.prompt_engine import StrategyCatalog, default_catalog

RULE_EXACT = "exact"
RULE_ANSWER = "answer_anchor"
RULE_SCAN = "scan"

_EDGE_PUNCT_RE = re.compile(r"^[\W_]+|[\W_]+$", re.UNICODE)
_WORD_RE = re.compile(r"[^\W_]+|/", re.UNICODE)
_ANSWER_RE = re.compile(r"\banswer\b\s*(?:is\b)?\s*[:\-]?\s*", re.IGNORECASE)

NEGATORS = frozenset({"not", "never", "t", "nor", "without"})  # "t" from "isn't"
CONNECTORS = frozenset({"or", "/", "and", "to"})


def normalize(text: str) -> str:
    """NFC, lowercase, single spaces, no punctuation at either end."""
    s = unicodedata.normalize("NFC", text or "").lower()
    s = " ".join(s.split())
    return _EDGE_PUNCT_RE.sub("", s)


class LabelParser:
    """
    Maps completion text to a class of one task. Rules, first hit wins:
      exact          the whole normalized text is a class synonym
      answer_anchor  the words after the last "Answer:" start with a synonym
      scan           first synonym in the text not preceded by a negation
    Two different classes joined by "or"/"and"/"to"/"/" make the outcome ambiguous.
    """

    def __init__(self, catalog: Optional[StrategyCatalog] = None) -> None:
        self.catalog = catalog or default_catalog()
        self._tables: Dict[str, Dict[Tuple[str, ...], ClassLabel]] = {}

    def parse(self, text: str, task: TaskSpec) -> ParseOutcome:
        table = self._synonym_table(task)
        norm = normalize(text)
        if not norm:
            return ParseOutcome(label=None, status="unparseable")

        exact = table.get(tuple(norm.split()))
        if exact is not None:
            return ParseOutcome(label=exact, status="parsed", matched_span=norm, rule_id=RULE_EXACT)

        anchors = list(_ANSWER_RE.finditer(text or ""))
        if anchors:
            tail = normalize((text or "")[anchors[-1].end():])
            hit = self._match_at(_words(tail), 0, table)
            if hit is not None:
                return self._resolve(_words(tail), 0, hit, table, RULE_ANSWER)

        words = _words(norm)
        for i in range(len(words)):
            hit = self._match_at(words, i, table)
            if hit is None:
                continue
            if i > 0 and words[i - 1] in NEGATORS:
                continue
            return self._resolve(words, i, hit, table, RULE_SCAN)

        return ParseOutcome(label=None, status="unparseable")

    def _resolve(
        self,
        words: List[str],
        start: int,
        hit: Tuple[ClassLabel, int],
        table: Dict[Tuple[str, ...], ClassLabel],
        rule_id: str,
    ) -> ParseOutcome:
        label, width = hit
        span = " ".join(words[start : start + width])
        after = start + width
        if after < len(words) and words[after] in CONNECTORS:
            other = self._match_at(words, after + 1, table)
            if other is not None and other[0] != label:
                span = " ".join(words[start : after + 1 + other[1]])
                return ParseOutcome(label=None, status="ambiguous", matched_span=span, rule_id=rule_id)
        return ParseOutcome(label=label, status="parsed", matched_span=span, rule_id=rule_id)

    @staticmethod
    def _match_at(
        words: List[str], i: int, table: Dict[Tuple[str, ...], ClassLabel]
    ) -> Optional[Tuple[ClassLabel, int]]:
        # longest synonym first
        for width in sorted({len(k) for k in table}, reverse=True):
            label = table.get(tuple(words[i : i + width]))
            if label is not None and i + width <= len(words):
                return label, width
        return None

    def _synonym_table(self, task: TaskSpec) -> Dict[Tuple[str, ...], ClassLabel]:
        table = self._tables.get(task.task_id)
        if table is None:
            table = {}
            for c in task.classes:
                for syn in self.catalog.synonyms_for(c):
                    table[tuple(normalize(syn).split())] = c
            self._tables[task.task_id] = table
        return table


def _words(text: str) -> List[str]:
    return _WORD_RE.findall(text)


_default_parser: Optional[LabelParser] = None


def parse_label(text: str, task: TaskSpec) -> ParseOutcome:
    """parse with the shipped catalog's synonyms."""
    global _default_parser
    if _default_parser is None:
        _default_parser = LabelParser()
    return _default_parser.parse(text, task)

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import yaml

from mh_eval.errors import BudgetExceededError, PromptError
from mh_eval.models import ARITIES, CATEGORIES, STRATEGIES, ClassLabel, Mode, Record, TaskSpec
from mh_eval.services.tokens import BUDGET_COUNTER, TokenCounter

SEPARATOR = "\n"
EXEMPLAR_SEPARATOR = "\n\n"
ANSWER_PREFIX = "Answer: "
COT_SUFFIX = "Provide reasons step by step."

DEFAULT_CATALOG_PATH = Path(__file__).resolve().parent.parent / "data" / "strategy_catalog.yaml"

Exemplar = Tuple[Record, ClassLabel]


@dataclass(frozen=True)
class StrategyCatalog:
    """
    Prompt wording in one place:
      part1     strategy -> Part-1 sentences ("" for basic)
      part2     (category, arity) -> three question templates
      adjectives state word -> adjective form for the {state_adjective} slot
      synonyms  class name -> answer spellings the parser accepts
    """

    part1: Mapping[str, Tuple[str, ...]]
    part2: Mapping[Tuple[str, str], Tuple[str, ...]]
    adjectives: Mapping[str, str]
    synonyms: Mapping[str, Tuple[str, ...]]

    def __post_init__(self) -> None:
        for s in STRATEGIES:
            if not self.part1.get(s):
                raise PromptError(f"catalog: strategy {s!r} has no Part-1 variants")
        if tuple(self.part1["basic"]) != ("",):
            raise PromptError("catalog: 'basic' must have exactly one empty variant")

        for cat in CATEGORIES:
            for ar in ARITIES:
                templates = self.part2.get((cat, ar), ())
                if len(templates) != 3:
                    raise PromptError(f"catalog: {cat}/{ar} needs 3 question templates, has {len(templates)}")
                for t in templates:
                    filled = t.replace("{state_word}", "x").replace("{state_adjective}", "x")
                    if "{" in filled or "}" in filled:
                        raise PromptError(f"catalog: unresolved placeholder in {t!r}")

    def part1_variants(self, strategy: str) -> Tuple[str, ...]:
        try:
            return tuple(self.part1[strategy])
        except KeyError:
            raise PromptError(f"unknown strategy {strategy!r} (known: {', '.join(self.part1)})") from None

    def part2_variants(self, task: TaskSpec) -> Tuple[str, ...]:
        return tuple(self.part2[(task.category, task.arity)])

    def synonyms_for(self, label: ClassLabel) -> Tuple[str, ...]:
        syns = tuple(s.lower() for s in self.synonyms.get(label.name, ()))
        return syns if label.name in syns else (label.name,) + syns


def load_catalog(path: Path) -> StrategyCatalog:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return catalog_from_dict(data)


@functools.lru_cache(maxsize=1)
def default_catalog() -> StrategyCatalog:
    return load_catalog(DEFAULT_CATALOG_PATH)


def catalog_from_dict(data: Mapping) -> StrategyCatalog:
    part2: Dict[Tuple[str, str], Tuple[str, ...]] = {}
    for key, templates in (data.get("part2") or {}).items():
        cat, _, ar = str(key).partition("/")
        part2[(cat, ar)] = tuple(str(t) for t in templates)
    return StrategyCatalog(
        part1={str(k): tuple("" if v is None else str(v) for v in vs) for k, vs in (data.get("part1") or {}).items()},
        part2=part2,
        adjectives={str(k): str(v) for k, v in (data.get("adjectives") or {}).items()},
        synonyms={str(k): tuple(str(s) for s in vs) for k, vs in (data.get("synonyms") or {}).items()},
    )


def catalog_to_dict(catalog: StrategyCatalog) -> dict:
    return {
        "part1": {k: list(v) for k, v in catalog.part1.items()},
        "part2": {f"{cat}/{ar}": list(v) for (cat, ar), v in catalog.part2.items()},
        "adjectives": dict(catalog.adjectives),
        "synonyms": {k: list(v) for k, v in catalog.synonyms.items()},
    }


def dump_catalog(catalog: StrategyCatalog) -> str:
    return yaml.safe_dump(catalog_to_dict(catalog), sort_keys=False, allow_unicode=True, width=1000)


@dataclass(frozen=True)
class PromptPlan:
    record_id: str
    task: TaskSpec
    strategy: str
    part1_index: int
    part2_index: int
    mode: Mode
    exemplars: Tuple[Exemplar, ...]
    rendered: str
    token_estimate: int

    @property
    def variant(self) -> str:
        return f"{self.part1_index}.{self.part2_index}"

    @property
    def shots(self) -> int:
        return len(self.exemplars)


def class_enumeration(task: TaskSpec) -> str:
    if task.arity == "binary":
        return "Yes or No"
    names = [c.display for c in task.classes]
    return ", ".join(names[:-1]) + ", or " + names[-1]


def build_output_constraint(task: TaskSpec) -> str:
    return f"Only return {class_enumeration(task)}."


def build_cot_constraint(task: TaskSpec) -> str:
    return f"Return {class_enumeration(task)}. {COT_SUFFIX}"


def render_answer(label: ClassLabel) -> str:
    """Canonical answer text for a class, as used in exemplars and finetune pairs."""
    return label.display


class PromptEngine:
    """
    Renders prompts as  TextData / Part-1 / Part-2 / OutputConstraint,
    one segment per line, Part-1 omitted when empty.
    """

    def __init__(self, catalog: Optional[StrategyCatalog] = None, counter: TokenCounter = BUDGET_COUNTER) -> None:
        self.catalog = catalog or default_catalog()
        self.counter = counter

    def enumerate_variants(self, task: TaskSpec, strategy: str) -> List[Tuple[int, int]]:
        p1 = self.catalog.part1_variants(strategy)
        p2 = self.catalog.part2_variants(task)
        return list(itertools.product(range(len(p1)), range(len(p2))))

    def render_question(self, task: TaskSpec, part2_index: int) -> str:
        template = self._pick(self.catalog.part2_variants(task), part2_index, "Part-2")
        adjective = self.catalog.adjectives.get(task.state_word, task.state_word)
        return template.replace("{state_word}", task.state_word).replace("{state_adjective}", adjective)

    def build_zero_shot(
        self,
        record: Record,
        task: TaskSpec,
        strategy: str,
        part1_index: int,
        part2_index: int,
        token_budget: Optional[int] = None,
    ) -> PromptPlan:
        rendered = self._compose(record, task, strategy, part1_index, part2_index, build_output_constraint(task))
        return self._plan(record, task, strategy, part1_index, part2_index, "zero_shot", (), rendered, token_budget)

    def build_cot(
        self,
        record: Record,
        task: TaskSpec,
        strategy: str,
        part1_index: int,
        part2_index: int,
        token_budget: Optional[int] = None,
    ) -> PromptPlan:
        rendered = self._compose(record, task, strategy, part1_index, part2_index, build_cot_constraint(task))
        return self._plan(record, task, strategy, part1_index, part2_index, "cot", (), rendered, token_budget)

    def build_few_shot(
        self,
        record: Record,
        exemplars: Sequence[Exemplar],
        task: TaskSpec,
        strategy: str,
        part1_index: int,
        part2_index: int,
        token_budget: int,
        shots: Optional[int] = None,
    ) -> PromptPlan:
        """
        M exemplar blocks ("<prompt>\\nAnswer: <label>") then the unanswered query,
        blocks separated by a blank line. Exemplar text is never truncated: an
        over-budget prompt raises BudgetExceededError and the caller resamples.
        Post text is embedded verbatim, so a post that itself contains
        "Answer:" adds to the count of answer lines in the rendered prompt.
        """
        exemplars = tuple(exemplars)
        if len(exemplars) < 1:
            raise PromptError("few-shot prompts need at least one exemplar")
        if shots is not None and len(exemplars) != shots:
            raise PromptError(f"expected {shots} exemplars, got {len(exemplars)}")
        for ex_record, _ in exemplars:
            if ex_record.id == record.id:
                raise PromptError(f"exemplar {ex_record.id!r} is the query record")

        constraint = build_output_constraint(task)
        blocks = [
            self._compose(ex_record, task, strategy, part1_index, part2_index, constraint)
            + SEPARATOR
            + ANSWER_PREFIX
            + render_answer(ex_label)
            for ex_record, ex_label in exemplars
        ]
        blocks.append(self._compose(record, task, strategy, part1_index, part2_index, constraint))
        rendered = EXEMPLAR_SEPARATOR.join(blocks)
        return self._plan(record, task, strategy, part1_index, part2_index, "few_shot", exemplars, rendered, token_budget)

    def _compose(
        self,
        record: Record,
        task: TaskSpec,
        strategy: str,
        part1_index: int,
        part2_index: int,
        constraint: str,
    ) -> str:
        if not (record.text or "").strip():
            raise PromptError(f"record {record.id}: empty text")
        part1 = self._pick(self.catalog.part1_variants(strategy), part1_index, "Part-1")
        segments = [record.text]
        if part1:
            segments.append(part1)
        segments.append(self.render_question(task, part2_index))
        segments.append(constraint)
        return SEPARATOR.join(segments)

    def _plan(
        self,
        record: Record,
        task: TaskSpec,
        strategy: str,
        part1_index: int,
        part2_index: int,
        mode: Mode,
        exemplars: Tuple[Exemplar, ...],
        rendered: str,
        token_budget: Optional[int],
    ) -> PromptPlan:
        estimate = self.counter(rendered)
        if token_budget is not None and estimate > token_budget:
            raise BudgetExceededError(estimate, token_budget)
        return PromptPlan(
            record_id=record.id,
            task=task,
            strategy=strategy,
            part1_index=part1_index,
            part2_index=part2_index,
            mode=mode,
            exemplars=exemplars,
            rendered=rendered,
            token_estimate=estimate,
        )

    @staticmethod
    def _pick(options: Sequence[str], index: int, what: str) -> str:
        if not 0 <= index < len(options):
            raise PromptError(f"{what} index {index} out of range (0..{len(options) - 1})")
        return options[index]

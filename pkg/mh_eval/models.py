from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Tuple

Category = Literal["mental_state", "critical_action"]
Arity = Literal["binary", "multiclass"]
Granularity = Literal["post", "user"]
Mode = Literal["zero_shot", "few_shot", "cot"]
Strategy = Literal["basic", "context", "mh", "both"]
ParseStatus = Literal["parsed", "unparseable", "ambiguous"]

CATEGORIES = ("mental_state", "critical_action")
ARITIES = ("binary", "multiclass")
GRANULARITIES = ("post", "user")
MODES = ("zero_shot", "few_shot", "cot")
STRATEGIES = ("basic", "context", "mh", "both")


@dataclass(frozen=True)
class ClassLabel:
    name: str  # canonical: lowercase, trimmed
    ordinal: int

    @property
    def display(self) -> str:
        # "yes" -> "Yes", "moderate" -> "Moderate"
        return self.name[:1].upper() + self.name[1:]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    title: str
    category: Category
    arity: Arity
    classes: Tuple[ClassLabel, ...]
    granularity: Granularity
    state_word: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"task {self.task_id}: unknown category {self.category!r}")
        if self.arity not in ARITIES:
            raise ValueError(f"task {self.task_id}: unknown arity {self.arity!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"task {self.task_id}: unknown granularity {self.granularity!r}")
        if self.arity == "binary" and len(self.classes) != 2:
            raise ValueError(f"task {self.task_id}: binary tasks need exactly 2 classes")
        if self.arity == "multiclass" and len(self.classes) not in (4, 5):
            raise ValueError(f"task {self.task_id}: multiclass tasks need 4 or 5 classes")
        if not self.state_word.strip():
            raise ValueError(f"task {self.task_id}: empty state word")

        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ValueError(f"task {self.task_id}: duplicate class names {names}")
        if [c.ordinal for c in self.classes] != list(range(len(self.classes))):
            raise ValueError(f"task {self.task_id}: class ordinals must run 0..K-1")

    @property
    def class_names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def label(self, name: str) -> ClassLabel:
        key = (name or "").strip().lower()
        for c in self.classes:
            if c.name == key:
                return c
        raise KeyError(f"{name!r} is not a class of task {self.task_id}")


@dataclass(frozen=True)
class Record:
    id: str
    text: str
    label: ClassLabel
    user_id: str
    source: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id is empty")
        if not (self.text or "").strip():
            raise ValueError(f"record {self.id}: empty text")
        if not (self.user_id or "").strip():
            raise ValueError(f"record {self.id}: empty user_id")


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[Record, ...]
    test: Tuple[Record, ...]
    seed: int
    ratio: float


@dataclass(frozen=True)
class ModelConfig:
    name: str
    endpoint: str = ""
    api_key_env: Optional[str] = None  # name of the env var holding the bearer token
    temperature: float = 0.0
    max_output_tokens: int = 16
    cot_max_output_tokens: int = 512
    request_timeout: float = 60.0
    max_retries: int = 3
    rate_limit: float = 5.0  # requests / second
    backoff_base: float = 1.0  # seconds; doubled per attempt

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("model name is empty")
        if self.temperature < 0:
            raise ValueError(f"{self.name}: temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError(f"{self.name}: max_retries must be >= 0")
        if self.rate_limit <= 0:
            raise ValueError(f"{self.name}: rate_limit must be > 0")
        if self.max_output_tokens < 1 or self.cot_max_output_tokens < 1:
            raise ValueError(f"{self.name}: output token limits must be >= 1")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    model: str
    latency: float  # seconds
    cache_hit: bool
    request_fingerprint: str


@dataclass(frozen=True)
class ParseOutcome:
    label: Optional[ClassLabel]
    status: ParseStatus
    matched_span: str = ""
    rule_id: Optional[str] = None

    @property
    def parsed(self) -> bool:
        return self.status == "parsed"


@dataclass(frozen=True)
class RunRecord:
    record_id: str
    dataset: str
    task: str
    model: str
    mode: Mode
    strategy: Strategy
    variant: str  # "<part1_index>.<part2_index>"
    repeat_index: int
    prompt_fingerprint: str
    raw_response: str
    pred: Optional[str]
    status: str  # ParseStatus, or "budget_exceeded"
    rule_id: Optional[str]
    matched_span: str
    gold: str

    @property
    def key(self) -> tuple:
        return (self.record_id, self.model, self.mode, self.strategy, self.variant, self.repeat_index)

    def to_dict(self) -> dict:
        return {
            "record_id": self.record_id,
            "dataset": self.dataset,
            "task": self.task,
            "model": self.model,
            "mode": self.mode,
            "strategy": self.strategy,
            "variant": self.variant,
            "repeat_index": self.repeat_index,
            "prompt_fingerprint": self.prompt_fingerprint,
            "raw_response": self.raw_response,
            "pred": self.pred,
            "status": self.status,
            "rule_id": self.rule_id,
            "matched_span": self.matched_span,
            "gold": self.gold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            record_id=str(d["record_id"]),
            dataset=str(d["dataset"]),
            task=str(d["task"]),
            model=str(d["model"]),
            mode=d["mode"],
            strategy=d["strategy"],
            variant=str(d["variant"]),
            repeat_index=int(d["repeat_index"]),
            prompt_fingerprint=str(d.get("prompt_fingerprint", "")),
            raw_response=str(d.get("raw_response", "")),
            pred=d.get("pred"),
            status=str(d["status"]),
            rule_id=d.get("rule_id"),
            matched_span=str(d.get("matched_span", "")),
            gold=str(d["gold"]),
        )

from __future__ import annotations

from typing import Dict, Tuple

from mh_eval.models import ClassLabel, TaskSpec


def _classes(*names: str) -> Tuple[ClassLabel, ...]:
    return tuple(ClassLabel(name=n, ordinal=i) for i, n in enumerate(names))


BINARY = _classes("no", "yes")
DEPRESSION_LEVELS = _classes("minimal", "mild", "moderate", "severe")
SUICIDE_LEVELS = _classes("supportive", "indicator", "ideation", "behavior", "attempt")

TASKS: Dict[str, TaskSpec] = {
    t.task_id: t
    for t in (
        TaskSpec("1", "Binary Stress Prediction", "mental_state", "binary", BINARY, "post", "stressed"),
        TaskSpec("2", "Binary Depression Prediction", "mental_state", "binary", BINARY, "post", "depressed"),
        TaskSpec("3", "Four-level Depression Prediction", "mental_state", "multiclass", DEPRESSION_LEVELS, "post", "depressed"),
        TaskSpec("4", "Binary Suicide Ideation Prediction", "critical_action", "binary", BINARY, "post", "suicide"),
        TaskSpec("5", "Binary Suicide Risk Prediction", "critical_action", "binary", BINARY, "user", "suicide"),
        TaskSpec("6", "Five-level Suicide Risk Prediction", "critical_action", "multiclass", SUICIDE_LEVELS, "user", "suicide"),
    )
}

# Which task each public dataset feeds. External sets are evaluation-only.
DATASET_TASKS: Dict[str, Tuple[str, ...]] = {
    "dreaddit": ("1",),
    "depseverity": ("2", "3"),
    "sdcnl": ("4",),
    "cssrs-suicide": ("5", "6"),
    "red-sam": ("2",),
    "twt-60users": ("2",),
    "sad": ("1",),
}
EXTERNAL_DATASETS = frozenset({"red-sam", "twt-60users", "sad"})

# label_map presets for the derived binary tasks
DEPSEVERITY_AT_LEAST_MILD = {"minimal": "no", "mild": "yes", "moderate": "yes", "severe": "yes"}
CSSRS_AT_LEAST_INDICATOR = {
    "supportive": "no",
    "indicator": "yes",
    "ideation": "yes",
    "behavior": "yes",
    "attempt": "yes",
}
LABEL_MAP_PRESETS: Dict[str, Dict[str, str]] = {
    "depseverity_binary": DEPSEVERITY_AT_LEAST_MILD,
    "cssrs_binary": CSSRS_AT_LEAST_INDICATOR,
}

# raw-label spellings every binary dataset may use
BINARY_ALIASES = {"true": "yes", "1": "yes", "false": "no", "0": "no"}


def get_task(task_id: str | int) -> TaskSpec:
    key = str(task_id).strip().lstrip("#")
    try:
        return TASKS[key]
    except KeyError:
        raise KeyError(f"unknown task {task_id!r} (known: {', '.join(TASKS)})") from None


def default_shot_count(task: TaskSpec) -> int:
    """One exemplar per class."""
    return len(task.classes)

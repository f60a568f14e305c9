from __future__ import annotations

import difflib
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

import yaml
from dotenv import dotenv_values, find_dotenv, load_dotenv

from mh_eval.errors import ConfigError
from mh_eval.models import MODES, STRATEGIES, ModelConfig, TaskSpec
from mh_eval.services.corpus import DatasetSchema
from mh_eval.tasks import EXTERNAL_DATASETS, LABEL_MAP_PRESETS, get_task

_APP_DIR = "mh-eval"


# -----------------------------
# Secrets
# -----------------------------
def get_api_key(env_name: str) -> str:
    """
    Returns the secret stored under `env_name`.

    Lookup order:
      1) Real environment variable
      2) Repo-local .env (dev convenience)
      3) Per-user config file
    Files never override variables that are already set.
    """
    key = os.getenv(env_name)
    if key:
        return key

    dotenv_path = find_dotenv(usecwd=True)
    if dotenv_path:
        load_dotenv(dotenv_path, override=False)
        key = os.getenv(env_name)
        if key:
            return key

    user_path = _user_config_path()
    if user_path.exists():
        for k, v in dotenv_values(user_path).items():
            if k and v is not None:
                os.environ.setdefault(k, v)
        key = os.getenv(env_name)
        if key:
            return key

    raise ConfigError(
        f"{env_name} not set.\n"
        "Set it in your environment, in a .env file, or in the per-user config file:\n\n"
        f"  {_user_config_path()}\n"
        f"  {env_name}=YOUR_KEY_HERE\n"
    )


def _user_config_path() -> Path:
    """
    %APPDATA%\\mh-eval\\config.env on Windows
    ~/.config/mh-eval/config.env on macOS/Linux
    """
    if os.name == "nt":
        base = Path(os.environ.get("APPDATA", str(Path.home() / "AppData" / "Roaming")))
        return base / _APP_DIR / "config.env"
    return Path.home() / ".config" / _APP_DIR / "config.env"


# -----------------------------
# Experiment config
# -----------------------------
@dataclass(frozen=True)
class DatasetConfig:
    name: str
    task: TaskSpec
    schema: DatasetSchema
    path: Optional[Path] = None
    train: Optional[Path] = None
    test: Optional[Path] = None
    external: bool = False
    split_ratio: float = 0.8
    split_seed: int = 0


@dataclass(frozen=True)
class FewShotConfig:
    repeats: int = 3
    seed: int = 0
    shots: Mapping[str, int] = field(default_factory=dict)  # task id -> M
    token_budget: int = 2048
    max_resamples: int = 5


@dataclass(frozen=True)
class FinetuneConfig:
    datasets: Tuple[str, ...] = ()  # empty: every non-external dataset
    fraction: float = 1.0
    seed: int = 0
    strategy: str = "both"
    part1_index: int = 1
    part2_index: int = 0
    base_epochs: int = 3
    learning_rate: float = 2e-5
    warmup_ratio: float = 0.03


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    datasets: Tuple[DatasetConfig, ...]
    models: Tuple[ModelConfig, ...]
    modes: Tuple[str, ...] = ("zero_shot",)
    strategies: Tuple[str, ...] = STRATEGIES
    zero_shot_repeats: int = 1
    few_shot: FewShotConfig = field(default_factory=FewShotConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    concurrency: int = 4
    output_dir: Path = Path("runs")
    cache_dir: Optional[Path] = None
    max_consecutive_failures: int = 20

    def dataset(self, name: str) -> DatasetConfig:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"no dataset named {name!r}")

    def resolved_cache_dir(self) -> Path:
        return self.cache_dir or (self.output_dir / "cache")

    def to_dict(self) -> Dict[str, Any]:
        """Plain, YAML-safe view of the resolved config (secrets stay references)."""
        return {
            "name": self.name,
            "modes": list(self.modes),
            "strategies": list(self.strategies),
            "zero_shot": {"repeats": self.zero_shot_repeats},
            "few_shot": {**asdict(self.few_shot), "shots": dict(self.few_shot.shots)},
            "finetune": {**asdict(self.finetune), "datasets": list(self.finetune.datasets)},
            "concurrency": self.concurrency,
            "output_dir": str(self.output_dir),
            "cache_dir": str(self.cache_dir) if self.cache_dir else None,
            "max_consecutive_failures": self.max_consecutive_failures,
            "datasets": [
                {
                    "name": d.name,
                    "task": d.task.task_id,
                    "path": str(d.path) if d.path else None,
                    "train": str(d.train) if d.train else None,
                    "test": str(d.test) if d.test else None,
                    "external": d.external,
                    "split": {"ratio": d.split_ratio, "seed": d.split_seed},
                    "schema": {**asdict(d.schema), "label_map": dict(d.schema.label_map)},
                }
                for d in self.datasets
            ],
            "models": [asdict(m) for m in self.models],
        }

    def digest(self) -> str:
        """Identity of the experiment; concurrency and output locations do not count."""
        data = self.to_dict()
        for k in ("concurrency", "output_dir", "cache_dir"):
            data.pop(k)
        canonical = json.dumps(data, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_TOP_KEYS = {
    "name", "datasets", "models", "modes", "strategies", "zero_shot", "few_shot",
    "finetune", "concurrency", "output_dir", "cache_dir", "max_consecutive_failures",
}
_DATASET_KEYS = {"name", "task", "path", "train", "test", "external", "split", "schema"}
_SPLIT_KEYS = {"ratio", "seed"}
_SCHEMA_KEYS = {"text", "label", "user_id", "id", "label_map", "label_map_preset", "format", "delimiter"}
_ZERO_SHOT_KEYS = {"repeats"}
_FEW_SHOT_KEYS = {"repeats", "seed", "shots", "token_budget", "max_resamples"}
_FINETUNE_KEYS = {
    "datasets", "fraction", "seed", "strategy", "part1_index", "part2_index",
    "base_epochs", "learning_rate", "warmup_ratio",
}
_MODEL_KEYS = {
    "name", "endpoint", "api_key_env", "temperature", "max_output_tokens", "cot_max_output_tokens",
    "request_timeout", "max_retries", "rate_limit", "backoff_base",
}


def load_config(path: Path, output_dir: Optional[Path] = None) -> ExperimentConfig:
    """
    Reads an experiment YAML file. Unknown keys are rejected with the dotted key
    path; relative file paths resolve against the config file's directory.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data, base_dir=path.parent, output_dir=output_dir)


def config_from_dict(data: Mapping[str, Any], base_dir: Path, output_dir: Optional[Path] = None) -> ExperimentConfig:
    _check_keys(data, _TOP_KEYS, "")

    datasets = tuple(_dataset(d, i, base_dir) for i, d in enumerate(_list(data, "datasets", required=True)))
    names = [d.name for d in datasets]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ConfigError(f"duplicate dataset names: {', '.join(dupes)}")

    models = tuple(_model(m, i) for i, m in enumerate(_list(data, "models", required=True)))

    modes = tuple(str(m) for m in data.get("modes") or ("zero_shot",))
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"modes: unknown mode {m!r} (known: {', '.join(MODES)})")
    strategies = tuple(str(s) for s in data.get("strategies") or STRATEGIES)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"strategies: unknown strategy {s!r} (known: {', '.join(STRATEGIES)})")

    zs = _section(data, "zero_shot", _ZERO_SHOT_KEYS)
    fs = _section(data, "few_shot", _FEW_SHOT_KEYS)
    ft = _section(data, "finetune", _FINETUNE_KEYS)

    few_shot = FewShotConfig(
        repeats=int(fs.get("repeats", 3)),
        seed=int(fs.get("seed", 0)),
        shots={str(k).lstrip("#"): int(v) for k, v in (fs.get("shots") or {}).items()},
        token_budget=int(fs.get("token_budget", 2048)),
        max_resamples=int(fs.get("max_resamples", 5)),
    )
    if few_shot.repeats < 1:
        raise ConfigError("few_shot.repeats must be >= 1")
    if any(m < 1 for m in few_shot.shots.values()):
        raise ConfigError("few_shot.shots values must be >= 1")

    finetune = FinetuneConfig(
        datasets=tuple(str(n) for n in ft.get("datasets") or ()),
        fraction=float(ft.get("fraction", 1.0)),
        seed=int(ft.get("seed", 0)),
        strategy=str(ft.get("strategy", "both")),
        part1_index=int(ft.get("part1_index", 1)),
        part2_index=int(ft.get("part2_index", 0)),
        base_epochs=int(ft.get("base_epochs", 3)),
        learning_rate=float(ft.get("learning_rate", 2e-5)),
        warmup_ratio=float(ft.get("warmup_ratio", 0.03)),
    )
    if not 0 < finetune.fraction <= 1:
        raise ConfigError("finetune.fraction must be in (0, 1]")
    for n in finetune.datasets:
        if n not in names:
            raise ConfigError(f"finetune.datasets: unknown dataset {n!r}")

    concurrency = int(data.get("concurrency", 4))
    if concurrency < 1:
        raise ConfigError("concurrency must be >= 1")
    zero_shot_repeats = int(zs.get("repeats", 1))
    if zero_shot_repeats < 1:
        raise ConfigError("zero_shot.repeats must be >= 1")

    out = Path(output_dir) if output_dir else _resolve(base_dir, data.get("output_dir") or "runs")
    cache_dir = _resolve(base_dir, data["cache_dir"]) if data.get("cache_dir") else None

    return ExperimentConfig(
        name=str(data.get("name") or "experiment"),
        datasets=datasets,
        models=models,
        modes=modes,
        strategies=strategies,
        zero_shot_repeats=zero_shot_repeats,
        few_shot=few_shot,
        finetune=finetune,
        concurrency=concurrency,
        output_dir=out,
        cache_dir=cache_dir,
        max_consecutive_failures=int(data.get("max_consecutive_failures", 20)),
    )


def _dataset(d: Any, i: int, base_dir: Path) -> DatasetConfig:
    where = f"datasets[{i}]"
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: must be a mapping")
    _check_keys(d, _DATASET_KEYS, where)
    if not d.get("name"):
        raise ConfigError(f"{where}.name is required")
    name = str(d["name"])

    try:
        task = get_task(d.get("task", ""))
    except KeyError as e:
        raise ConfigError(f"{where}.task: {e.args[0]}") from None

    split = d.get("split") or {}
    _check_keys(split, _SPLIT_KEYS, f"{where}.split")
    schema_data = d.get("schema") or {}
    _check_keys(schema_data, _SCHEMA_KEYS, f"{where}.schema")

    label_map: Dict[str, str] = {}
    preset = schema_data.get("label_map_preset")
    if preset:
        if preset not in LABEL_MAP_PRESETS:
            raise ConfigError(f"{where}.schema.label_map_preset: unknown preset {preset!r}")
        label_map.update(LABEL_MAP_PRESETS[preset])
    label_map.update({str(k): str(v) for k, v in (schema_data.get("label_map") or {}).items()})

    schema = DatasetSchema(
        text=str(schema_data.get("text", "text")),
        label=str(schema_data.get("label", "label")),
        user_id=str(schema_data.get("user_id", "user_id")),
        id=str(schema_data["id"]) if schema_data.get("id") else None,
        label_map=label_map,
        format=str(schema_data["format"]) if schema_data.get("format") else None,
        delimiter=str(schema_data["delimiter"]) if schema_data.get("delimiter") else None,
    )

    external = bool(d.get("external", name.lower() in EXTERNAL_DATASETS))
    paths = {k: _resolve(base_dir, d[k]) if d.get(k) else None for k in ("path", "train", "test")}
    if paths["path"] is None and (paths["train"] is None or paths["test"] is None):
        if not (external and paths["test"] is not None):
            raise ConfigError(f"{where}: give either 'path' or both 'train' and 'test'")
    for k, p in paths.items():
        if p is not None and not p.exists():
            raise ConfigError(f"{where}.{k}: dataset file not found: {p}")

    ratio = float(split.get("ratio", 0.8))
    if not 0 < ratio < 1:
        raise ConfigError(f"{where}.split.ratio must be in (0, 1)")

    return DatasetConfig(
        name=name,
        task=task,
        schema=schema,
        path=paths["path"],
        train=paths["train"],
        test=paths["test"],
        external=external,
        split_ratio=ratio,
        split_seed=int(split.get("seed", 0)),
    )


def _model(m: Any, i: int) -> ModelConfig:
    where = f"models[{i}]"
    if not isinstance(m, dict):
        raise ConfigError(f"{where}: must be a mapping")
    _check_keys(m, _MODEL_KEYS, where)
    try:
        return ModelConfig(**m)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def _check_keys(data: Mapping[str, Any], allowed: Iterable[str], where: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where or 'config'}: must be a mapping")
    allowed = set(allowed)
    for key in data:
        if key not in allowed:
            dotted = f"{where}.{key}" if where else str(key)
            close = difflib.get_close_matches(str(key), sorted(allowed), n=1)
            hint = f" (did you mean {close[0]!r}?)" if close else ""
            raise ConfigError(f"unknown config key {dotted!r}{hint}")


def _section(data: Mapping[str, Any], key: str, allowed: Iterable[str]) -> Mapping[str, Any]:
    section = data.get(key) or {}
    _check_keys(section, allowed, key)
    return section


def _list(data: Mapping[str, Any], key: str, required: bool = False) -> list:
    value = data.get(key)
    if value is None:
        if required:
            raise ConfigError(f"'{key}' is required")
        return []
    if not isinstance(value, list) or (required and not value):
        raise ConfigError(f"'{key}' must be a non-empty list")
    return value


def _resolve(base_dir: Path, value: Any) -> Path:
    p = Path(str(value)).expanduser()
    return p if p.is_absolute() else (base_dir / p)

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Iterator, List

log = logging.getLogger(__name__)


def dumps_line(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False) + "\n"


def write_jsonl(path: Path, rows: Iterable[dict]) -> int:
    """Writes one JSON object per line (UTF-8, "\\n" endings). Returns the row count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(dumps_line(row))
            n += 1
    return n


def iter_jsonl(path: Path, tolerate_torn_tail: bool = False) -> Iterator[dict]:
    """
    Reads a JSONL file. With tolerate_torn_tail, a final line that is not valid
    JSON (a write cut short by a crash) is skipped with a warning.
    """
    path = Path(path)
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").split("\n")
    last = max((i for i, line in enumerate(lines) if line.strip()), default=-1)
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError:
            if tolerate_torn_tail and i == last:
                log.warning("%s: ignoring torn last line", path)
                return
            raise


def read_jsonl(path: Path, tolerate_torn_tail: bool = False) -> List[dict]:
    return list(iter_jsonl(path, tolerate_torn_tail=tolerate_torn_tail))


class JsonPrinter:
    def print(self, payload: Any) -> None:
        print(json.dumps(payload, indent=2, ensure_ascii=False))

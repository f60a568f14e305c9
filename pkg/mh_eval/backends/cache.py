from __future__ import annotations

import dataclasses
import json
import logging
import os
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Dict, Iterator, List

from mh_eval.models import ModelResponse

log = logging.getLogger(__name__)

_FIELDS = ("text", "model", "latency", "request_fingerprint")


class ResponseCache:
    """
    Content-addressed store, one JSON file per request:
        <root>/<first 2 hex chars>/<fingerprint>.json

    get_or_insert calls `producer` at most once per fingerprint, also across
    threads. Entries that fail to load are deleted and recomputed.
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._guard = threading.Lock()
        # fingerprint -> [lock, holders]; entries live only while someone holds or waits
        self._locks: Dict[str, List] = {}

    def path_for(self, fingerprint: str) -> Path:
        return self.root / fingerprint[:2] / f"{fingerprint}.json"

    def get(self, fingerprint: str) -> ModelResponse | None:
        path = self.path_for(fingerprint)
        if not path.exists():
            return None
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            if data.get("request_fingerprint") != fingerprint or not all(f in data for f in _FIELDS):
                raise ValueError("entry does not match its fingerprint")
            return ModelResponse(
                text=str(data["text"]),
                model=str(data["model"]),
                latency=float(data["latency"]),
                cache_hit=True,
                request_fingerprint=fingerprint,
            )
        except (ValueError, TypeError, OSError) as e:
            log.warning("cache entry %s is corrupt (%s); recomputing", path.name, e)
            path.unlink(missing_ok=True)
            return None

    def put(self, response: ModelResponse) -> None:
        path = self.path_for(response.request_fingerprint)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {f: getattr(response, f) for f in _FIELDS}
        tmp = path.with_name(f"{path.name}.{threading.get_ident()}.tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
        os.replace(tmp, path)

    def get_or_insert(self, fingerprint: str, producer: Callable[[], ModelResponse]) -> ModelResponse:
        with self._locked(fingerprint):
            hit = self.get(fingerprint)
            if hit is not None:
                return hit
            response = producer()
            self.put(response)
            return dataclasses.replace(response, cache_hit=False)

    @contextmanager
    def _locked(self, fingerprint: str) -> Iterator[None]:
        with self._guard:
            entry = self._locks.setdefault(fingerprint, [threading.Lock(), 0])
            entry[1] += 1
        try:
            with entry[0]:
                yield
        finally:
            with self._guard:
                entry[1] -= 1
                if entry[1] == 0:
                    del self._locks[fingerprint]

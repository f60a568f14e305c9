from __future__ import annotations

import hashlib
import json
import time
from typing import Optional

from mh_eval.backends.cache import ResponseCache
from mh_eval.models import ModelConfig, ModelResponse


def request_fingerprint(prompt: str, model: str, temperature: float, max_output_tokens: int) -> str:
    payload = json.dumps(
        {"prompt": prompt, "model": model, "temperature": float(temperature), "max_output_tokens": int(max_output_tokens)},
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class Backend:
    """
    Shared front half of every completion backend: fingerprinting and the
    optional response cache. Subclasses implement `_produce`.
    """

    def __init__(self, config: ModelConfig, cache: Optional[ResponseCache] = None) -> None:
        self.config = config
        self.cache = cache

    def complete(
        self,
        prompt: str,
        max_output_tokens: Optional[int] = None,
        record_id: Optional[str] = None,
    ) -> ModelResponse:
        """
        Returns the provider text verbatim. `record_id` is a hint for mock
        oracles only; it is never sent to a provider.
        """
        max_tokens = max_output_tokens or self.config.max_output_tokens
        fp = self.fingerprint(prompt, max_tokens, record_id)

        def produce() -> ModelResponse:
            started = time.monotonic()
            text = self._produce(prompt, max_tokens, fp, record_id)
            return ModelResponse(
                text=text,
                model=self.config.name,
                latency=time.monotonic() - started,
                cache_hit=False,
                request_fingerprint=fp,
            )

        if self.cache is None:
            return produce()
        return self.cache.get_or_insert(fp, produce)

    def fingerprint(self, prompt: str, max_tokens: int, record_id: Optional[str] = None) -> str:
        """Cache key of one request."""
        return request_fingerprint(prompt, self.config.name, self.config.temperature, max_tokens)

    def _produce(self, prompt: str, max_tokens: int, fingerprint: str, record_id: Optional[str]) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass

from __future__ import annotations

import logging
from typing import Optional

import requests
from tenacity import Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt, wait_exponential

from mh_eval.backends.base import Backend
from mh_eval.backends.cache import ResponseCache
from mh_eval.backends.rate_limit import RateLimiter
from mh_eval.config import get_api_key
from mh_eval.errors import BackendError, BackendTimeoutError, MalformedPayloadError
from mh_eval.models import ModelConfig

log = logging.getLogger(__name__)

TRANSIENT_STATUS = frozenset({408, 409, 425, 429, 500, 502, 503, 504})


class _Transient(Exception):
    """Retryable failure; carries the last cause for the final error."""

    def __init__(self, message: str, timed_out: bool = False) -> None:
        super().__init__(message)
        self.timed_out = timed_out


class ChatCompletionClient(Backend):
    """
    Thin wrapper around an OpenAI-style /chat/completions endpoint.
    Responsibilities:
      - one user message per prompt, first choice's content back verbatim
      - shared rate limit, retries with exponential backoff on transient errors
    """

    def __init__(
        self,
        config: ModelConfig,
        cache: Optional[ResponseCache] = None,
        session: Optional[requests.Session] = None,
        limiter: Optional[RateLimiter] = None,
    ) -> None:
        super().__init__(config, cache)
        if not config.endpoint:
            raise BackendError(f"model {config.name!r} has no endpoint configured")
        self._session = session or requests.Session()
        self._limiter = limiter or RateLimiter(config.rate_limit)
        self._api_key = get_api_key(config.api_key_env) if config.api_key_env else None

    def _produce(self, prompt: str, max_tokens: int, fingerprint: str, record_id: Optional[str]) -> str:
        body = {
            "model": self.config.name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        retrying = Retrying(
            stop=stop_after_attempt(self.config.max_retries + 1),
            wait=wait_exponential(multiplier=self.config.backoff_base, max=60),
            retry=retry_if_exception_type(_Transient),
            before_sleep=before_sleep_log(log, logging.WARNING),
            reraise=True,
        )
        try:
            payload = retrying(self._post, body, headers, fingerprint)
        except _Transient as e:
            attempts = self.config.max_retries + 1
            if e.timed_out:
                raise BackendTimeoutError(f"{self.config.name}: timed out after {attempts} attempt(s)", fingerprint) from e
            raise BackendError(f"{self.config.name}: {e} after {attempts} attempt(s)", fingerprint) from e

        return _extract_text(payload, fingerprint)

    def _post(self, body: dict, headers: dict, fingerprint: str) -> dict:
        self._limiter.acquire()
        log.debug("POST %s (%s)", self.config.endpoint, fingerprint[:12])
        try:
            resp = self._session.post(
                self.config.endpoint,
                json=body,
                headers=headers,
                timeout=self.config.request_timeout,
            )
        except requests.Timeout as e:
            raise _Transient(f"timeout: {e}", timed_out=True) from e
        except requests.ConnectionError as e:
            raise _Transient(f"connection error: {e}") from e

        if resp.status_code in TRANSIENT_STATUS:
            raise _Transient(f"HTTP {resp.status_code}")
        if not 200 <= resp.status_code < 300:
            raise BackendError(f"{self.config.name}: HTTP {resp.status_code}: {resp.text[:200]}", fingerprint)

        try:
            return resp.json()
        except ValueError as e:
            raise MalformedPayloadError(f"{self.config.name}: response is not JSON", fingerprint) from e

    def close(self) -> None:
        self._session.close()


def _extract_text(payload: dict, fingerprint: str) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise MalformedPayloadError(f"no choices[0].message.content in response: {e!r}", fingerprint) from e
    if not isinstance(content, str):
        raise MalformedPayloadError("choices[0].message.content is not a string", fingerprint)
    return content

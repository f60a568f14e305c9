from __future__ import annotations

from typing import Optional

from mh_eval.backends.base import Backend, request_fingerprint
from mh_eval.backends.cache import ResponseCache
from mh_eval.backends.chat_client import ChatCompletionClient
from mh_eval.backends.mock import MockBackend, MockRule, mock_complete
from mh_eval.models import ModelConfig

__all__ = [
    "Backend",
    "ChatCompletionClient",
    "MockBackend",
    "ResponseCache",
    "make_backend",
    "mock_complete",
    "request_fingerprint",
]


def make_backend(config: ModelConfig, mock_rule: Optional[MockRule] = None, cache: Optional[ResponseCache] = None) -> Backend:
    if mock_rule is not None:
        return MockBackend(config, mock_rule, cache=cache)
    return ChatCompletionClient(config, cache=cache)

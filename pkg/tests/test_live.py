"""
Talks to a real chat-completions endpoint. Skipped unless
MH_EVAL_LIVE_ENDPOINT is set; MH_EVAL_LIVE_MODEL and MH_EVAL_LIVE_KEY_ENV
are optional. Run with: pytest -m live
"""
from __future__ import annotations

import os

import pytest

from mh_eval.backends import ChatCompletionClient
from mh_eval.models import ModelConfig, Record
from mh_eval.services.parsing import parse_label
from mh_eval.services.prompt_engine import PromptEngine
from mh_eval.tasks import get_task

ENDPOINT = os.getenv("MH_EVAL_LIVE_ENDPOINT")

pytestmark = [
    pytest.mark.live,
    pytest.mark.skipif(not ENDPOINT, reason="MH_EVAL_LIVE_ENDPOINT not set"),
]


def test_live_zero_shot_round_trip():
    task = get_task("1")
    config = ModelConfig(
        name=os.getenv("MH_EVAL_LIVE_MODEL", "gpt-3.5-turbo"),
        endpoint=ENDPOINT or "",
        api_key_env=os.getenv("MH_EVAL_LIVE_KEY_ENV") or None,
        max_retries=2,
        rate_limit=1.0,
    )
    record = Record("live-1", "I have three deadlines tomorrow and I can't sleep.", task.label("yes"), "live", "live")
    plan = PromptEngine().build_zero_shot(record, task, "both", 1, 0)

    response = ChatCompletionClient(config).complete(plan.rendered)
    assert response.text.strip()
    assert parse_label(response.text, task).status in ("parsed", "unparseable", "ambiguous")

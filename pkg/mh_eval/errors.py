from __future__ import annotations


class MhEvalError(RuntimeError):
    """Base for every error this package raises on purpose."""


class ConfigError(MhEvalError):
    pass


class DatasetError(MhEvalError):
    pass


class SplitError(MhEvalError):
    pass


class PromptError(MhEvalError):
    pass


class BudgetExceededError(PromptError):
    def __init__(self, token_estimate: int, token_budget: int) -> None:
        super().__init__(f"prompt needs ~{token_estimate} tokens, budget is {token_budget}")
        self.token_estimate = token_estimate
        self.token_budget = token_budget


class BackendError(MhEvalError):
    """
    A completion request failed for good.
    `fingerprint` identifies the request so it can be replayed.
    """

    def __init__(self, message: str, fingerprint: str = "") -> None:
        super().__init__(f"{message} [request {fingerprint[:12]}]" if fingerprint else message)
        self.fingerprint = fingerprint


class BackendTimeoutError(BackendError):
    pass


class MalformedPayloadError(BackendError):
    pass


class MockScriptExhaustedError(BackendError):
    pass


class MetricsError(MhEvalError):
    pass


class ExportError(MhEvalError):
    pass


class DigestMismatchError(ExportError):
    pass


class ReportError(MhEvalError):
    pass

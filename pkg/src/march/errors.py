"""Exception hierarchy shared across the package."""

from __future__ import annotations

from typing import Any


class MarchError(Exception):
    """Base class for every error raised by this package."""


class MalformedReport(MarchError):
    pass


class SchemaError(MarchError):
    """A dataset line failed validation."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if field is not None:
            prefix.append(f"field '{field}'")
        full = f"{', '.join(prefix)}: {message}" if prefix else message
        super().__init__(full)


class DimensionMismatch(MarchError, ValueError):
    pass


class ZeroVector(MarchError, ValueError):
    pass


class MissingFeature(MarchError):
    pass


class UnknownCaseId(MarchError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class MissingBinding(MarchError):
    pass


class UnknownBinding(MarchError):
    pass


class OutputParseError(MarchError):
    """Model output could not be turned into the expected structure."""


class ParseFailure(OutputParseError):
    pass


class SchemaViolation(OutputParseError):
    pass


class ReportParseError(OutputParseError, MalformedReport):
    """A report embedded in model output was not in canonical form."""


class BackendError(MarchError):
    """An agent backend failed to produce a completion.

    ``category`` is one of ``Timeout``, ``Transport``, ``RateLimited``,
    ``BadStatus``, ``EmptyChoice`` or ``Exhausted``.
    """

    CATEGORIES = ("Timeout", "Transport", "RateLimited", "BadStatus", "EmptyChoice", "Exhausted")

    def __init__(self, category: str, message: str = ""):
        if category not in self.CATEGORIES:
            raise ValueError(f"unknown backend error category {category!r}")
        self.category = category
        super().__init__(f"{category}: {message}" if message else category)


class ExhaustedRepairs(MarchError):
    """Every repair attempt produced unparseable output."""

    def __init__(self, message: str, last_completion: str, exchanges: list[Any] | None = None):
        self.last_completion = last_completion
        self.exchanges = list(exchanges or [])
        super().__init__(message)


class ConsensusAborted(MarchError):
    """Unrecoverable failure inside the consensus loop; carries the partial transcript."""

    def __init__(self, message: str, transcript: Any, cause: BaseException | None = None):
        self.transcript = transcript
        self.cause = cause
        super().__init__(message)


class UnmatchedCase(MarchError):
    pass


class LengthMismatch(MarchError, ValueError):
    pass


class IncompleteLexicon(MarchError):
    pass


class ConfigError(MarchError):
    pass

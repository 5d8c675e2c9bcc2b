"""Turn free-form model completions into typed values.

Models are asked for bare JSON but often wrap it in code fences or prose, so
extraction strips fences and then keeps the longest balanced ``{...}`` span
that decodes to an object.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from typing import Any

from ..core import Report, parse_report, serialize_report
from ..errors import MalformedReport, ParseFailure, ReportParseError, SchemaViolation

_FENCE = re.compile(r"```[A-Za-z0-9_-]*")
_TRAILING_COMMA = re.compile(r",\s*([}\]])")


class Answer(str, enum.Enum):
    AGREE = "agree"
    DISAGREE = "disagree"


class Action(str, enum.Enum):
    CONTINUE = "Continue"
    STOP = "Stop"


@dataclass(frozen=True)
class Stance:
    answer: Answer
    confidence: int
    reason: str
    evidences: tuple[str, ...] = ()
    fellow_id: str = ""
    round: int = 1

    def __post_init__(self) -> None:
        if self.confidence not in (1, 2, 3) or isinstance(self.confidence, bool):
            raise SchemaViolation(f"confidence must be 1, 2 or 3, got {self.confidence!r}")
        if self.answer is Answer.DISAGREE and not self.evidences:
            raise SchemaViolation("a disagreeing stance must cite at least one evidence")
        if self.round < 1:
            raise ValueError("stance round must be >= 1")

    def to_json(self) -> dict[str, Any]:
        return {
            "fellow_id": self.fellow_id,
            "round": self.round,
            "answer": self.answer.value,
            "confidence": self.confidence,
            "reason": self.reason,
            "evidences": list(self.evidences),
        }


@dataclass(frozen=True)
class AttendingDecision:
    action: Action
    report: Report
    reasons: tuple[str, ...] = ()
    instructions: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "action": self.action.value,
            "report": serialize_report(self.report),
            "reasons": list(self.reasons),
            "instructions": list(self.instructions),
        }


@dataclass(frozen=True)
class Synthesis:
    report: Report
    reasons: tuple[str, ...] = field(default=())


def _balanced_spans(text: str) -> list[tuple[int, int]]:
    """(start, end) of every balanced top-level-or-nested brace span, string-aware."""
    spans = []
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        in_str = False
        escaped = False
        for pos in range(start, len(text)):
            c = text[pos]
            if in_str:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    spans.append((start, pos + 1))
                    break
    return spans


def _loads(candidate: str) -> Any:
    try:
        return json.loads(candidate)
    except json.JSONDecodeError:
        return json.loads(_TRAILING_COMMA.sub(r"\1", candidate))


def extract_json_object(completion: str) -> dict[str, Any]:
    """Return the longest JSON object embedded in ``completion``."""
    text = _FENCE.sub("", completion or "")
    spans = sorted(_balanced_spans(text), key=lambda s: (-(s[1] - s[0]), s[0]))
    for start, end in spans:
        try:
            obj = _loads(text[start:end])
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise ParseFailure("no JSON object found in completion")


def _require(obj: dict[str, Any], key: str) -> Any:
    if key not in obj:
        raise SchemaViolation(f"missing required key {key!r}")
    return obj[key]


def _text_list(obj: dict[str, Any], key: str, required: bool = False) -> tuple[str, ...]:
    if key not in obj:
        if required:
            raise SchemaViolation(f"missing required key {key!r}")
        return ()
    value = obj[key]
    if isinstance(value, str):
        return (value,) if value.strip() else ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SchemaViolation(f"{key!r} must be a list of strings")
    return tuple(value)


def _report_value(value: Any, allow_empty: bool = False) -> Report:
    try:
        if isinstance(value, str):
            report = parse_report(value)
        elif isinstance(value, dict):
            report = Report(value)
        else:
            raise SchemaViolation("'report' must be canonical report text or a region->text object")
    except MalformedReport as exc:
        raise ReportParseError(str(exc)) from None
    if not report and not allow_empty:
        raise SchemaViolation("'report' is empty")
    return report


def _confidence(value: Any) -> int:
    if isinstance(value, bool):
        raise SchemaViolation("confidence must be an integer")
    if isinstance(value, str) and value.strip().isdigit():
        value = int(value.strip())
    if not isinstance(value, int) or value not in (1, 2, 3):
        raise SchemaViolation(f"confidence must be an integer in 1..3, got {value!r}")
    return value


def parse_fellow_stance(completion: str, fellow_id: str = "", round: int = 1) -> Stance:
    obj = extract_json_object(completion)
    raw_answer = _require(obj, "answer")
    if not isinstance(raw_answer, str):
        raise SchemaViolation("answer must be a string")
    try:
        answer = Answer(raw_answer.strip().lower())
    except ValueError:
        raise SchemaViolation(f"answer must be 'agree' or 'disagree', got {raw_answer!r}") from None
    confidence = _confidence(_require(obj, "confidence"))
    reason = _require(obj, "reason")
    if not isinstance(reason, str):
        raise SchemaViolation("reason must be a string")
    evidences = _text_list(obj, "evidences")
    return Stance(answer, confidence, reason, evidences, fellow_id=fellow_id, round=round)


def parse_attending_decision(completion: str) -> AttendingDecision:
    obj = extract_json_object(completion)
    raw_action = _require(obj, "action")
    if not isinstance(raw_action, str) or raw_action.strip().lower() not in ("yes", "no"):
        raise SchemaViolation(f"action must be 'Yes' or 'No', got {raw_action!r}")
    action = Action.CONTINUE if raw_action.strip().lower() == "yes" else Action.STOP
    report = _report_value(_require(obj, "report"))
    return AttendingDecision(
        action=action,
        report=report,
        reasons=_text_list(obj, "reasons"),
        instructions=_text_list(obj, "instructions"),
    )


def parse_fellow_revision(completion: str) -> Report:
    obj = extract_json_object(completion)
    return _report_value(_require(obj, "report"))


def parse_attending_synthesis(completion: str) -> Synthesis:
    obj = extract_json_object(completion)
    return Synthesis(_report_value(_require(obj, "report")), _text_list(obj, "reasons"))


def parse_resident_draft(completion: str) -> Report:
    """Accept either the JSON ``{"report": ...}`` shape or bare canonical text."""
    try:
        return parse_fellow_revision(completion)
    except ParseFailure:
        try:
            report = parse_report(completion)
        except MalformedReport as exc:
            raise ReportParseError(str(exc)) from None
        if not report:
            raise SchemaViolation("resident draft is empty")
        return report

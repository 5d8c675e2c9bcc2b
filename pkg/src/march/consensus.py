"""Iterative consensus between fellow agents, moderated by an attending agent.

Round 0 merges the fellows' revised reports into a first consensus report.
Each later round collects one stance per fellow on the current report and
lets the attending decide whether to stop, possibly revising the report.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

from .agents.backends import AgentBackend, Exchange, invoke_with_repair
from .agents.parsing import (
    Action,
    Answer,
    AttendingDecision,
    Stance,
    Synthesis,
    parse_attending_decision,
    parse_attending_synthesis,
    parse_fellow_stance,
)
from .agents.prompts import PromptTemplate, load_templates, render_prompt
from .core import Report, parse_report, serialize_report
from .errors import BackendError, ConsensusAborted, ExhaustedRepairs, SchemaViolation

logger = logging.getLogger(__name__)

NO_CONTENT = "(none)"


class Termination(str, enum.Enum):
    UNANIMOUS_AGREEMENT = "UnanimousAgreement"
    ATTENDING_STOP = "AttendingStop"
    MAX_ROUNDS_REACHED = "MaxRoundsReached"


@dataclass(frozen=True)
class ConsensusConfig:
    num_fellows: int = 3
    max_rounds: int = 3
    unanimity_short_circuit: bool = True
    feed_instructions: bool = True
    degraded_mode: bool = False
    max_repairs: int = 1

    def __post_init__(self) -> None:
        if self.num_fellows < 1:
            raise ValueError("num_fellows must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.max_repairs < 0:
            raise ValueError("max_repairs must be >= 0")


@dataclass
class RoundRecord:
    index: int
    consensus_report: Report
    stances: list[Stance] = field(default_factory=list)
    decision: AttendingDecision | None = None
    reasons: list[str] = field(default_factory=list)
    raw_exchanges: list[Exchange] = field(default_factory=list)
    failures: list[dict[str, str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "consensus_report": serialize_report(self.consensus_report),
            "reasons": list(self.reasons),
            "stances": [s.to_json() for s in self.stances],
            "decision": self.decision.to_json() if self.decision else None,
            "failures": list(self.failures),
            "raw_exchanges": [e.to_json() for e in self.raw_exchanges],
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "RoundRecord":
        decision = data.get("decision")
        return cls(
            index=data["index"],
            consensus_report=parse_report(data["consensus_report"]),
            stances=[
                Stance(
                    answer=Answer(s["answer"]),
                    confidence=s["confidence"],
                    reason=s["reason"],
                    evidences=tuple(s["evidences"]),
                    fellow_id=s["fellow_id"],
                    round=s["round"],
                )
                for s in data.get("stances", [])
            ],
            decision=AttendingDecision(
                action=Action(decision["action"]),
                report=parse_report(decision["report"]),
                reasons=tuple(decision["reasons"]),
                instructions=tuple(decision["instructions"]),
            )
            if decision
            else None,
            reasons=list(data.get("reasons", [])),
            raw_exchanges=[Exchange(**e) for e in data.get("raw_exchanges", [])],
            failures=list(data.get("failures", [])),
        )


@dataclass
class ConsensusTranscript:
    """Audit log of one consensus run.

    ``synthesis`` holds round 0; ``rounds`` holds the stance rounds 1..t,
    so ``rounds_used == len(rounds)``. A transcript attached to
    ``ConsensusAborted`` has ``termination`` and ``final_report`` unset.
    """

    synthesis: RoundRecord | None = None
    rounds: list[RoundRecord] = field(default_factory=list)
    final_report: Report | None = None
    termination: Termination | None = None

    @property
    def rounds_used(self) -> int:
        return len(self.rounds)

    def exchanges(self) -> list[Exchange]:
        records = ([self.synthesis] if self.synthesis else []) + self.rounds
        return [e for r in records for e in r.raw_exchanges]

    def to_json(self) -> dict[str, Any]:
        return {
            "synthesis": self.synthesis.to_json() if self.synthesis else None,
            "rounds": [r.to_json() for r in self.rounds],
            "final_report": serialize_report(self.final_report) if self.final_report is not None else None,
            "termination": self.termination.value if self.termination else None,
            "rounds_used": self.rounds_used,
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ConsensusTranscript":
        final = data.get("final_report")
        return cls(
            synthesis=RoundRecord.from_json(data["synthesis"]) if data.get("synthesis") else None,
            rounds=[RoundRecord.from_json(r) for r in data.get("rounds", [])],
            final_report=parse_report(final) if final is not None else None,
            termination=Termination(data["termination"]) if data.get("termination") else None,
        )


_TEMPLATES: dict[str, PromptTemplate] | None = None


def default_templates() -> dict[str, PromptTemplate]:
    global _TEMPLATES
    if _TEMPLATES is None:
        _TEMPLATES = load_templates()
    return _TEMPLATES


def _report_or_none(report: Report | None) -> str:
    return serialize_report(report) if report else NO_CONTENT


def _bullets(items: Sequence[str]) -> str:
    return "\n".join(f"- {item}" for item in items) if items else NO_CONTENT


def format_doctor_reports(reports: Sequence[Report]) -> str:
    return "\n\n".join(f"Doctor {i}: {serialize_report(r)}" for i, r in enumerate(reports, start=1))


def format_stances(stances: Sequence[Stance]) -> str:
    blocks = []
    for i, s in enumerate(stances, start=1):
        blocks.append(
            f"Doctor {i}: {s.answer.value} (confidence {s.confidence})\n"
            f"Reason: {s.reason}\n"
            f"Evidence:\n{_bullets(s.evidences)}"
        )
    return "\n\n".join(blocks)


def synthesize_initial(
    attending: AgentBackend,
    revised_reports: Sequence[Report],
    *,
    draft: Report | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
    max_repairs: int = 1,
    exchanges: list[Exchange] | None = None,
) -> Synthesis:
    """Merge the fellows' revisions into the round-0 consensus report."""
    if not revised_reports:
        raise ValueError("synthesis needs at least one revised report")
    templates = templates or default_templates()
    prompt = render_prompt(
        templates["attending_synthesis"],
        {"init_report": _report_or_none(draft), "doctor_info": format_doctor_reports(revised_reports)},
    )
    return invoke_with_repair(attending, prompt, parse_attending_synthesis, max_repairs, exchanges)


def stance_prompt(
    templates: Mapping[str, PromptTemplate],
    *,
    evidence: str,
    draft: Report | None,
    fellow_report: Report,
    current: Report,
    attending_reasons: Sequence[str],
    instruction: str | None = None,
) -> str:
    prompt = render_prompt(
        templates["fellow_stance"],
        {
            "retrieved_report": evidence or NO_CONTENT,
            "init_report": _report_or_none(draft),
            "fellow_report": serialize_report(fellow_report),
            "attending_report": serialize_report(current),
            "attending_reason": _bullets(attending_reasons),
        },
    )
    if instruction:
        prompt += f"\n\nInstructions from the attending for this round:\n{instruction}"
    return prompt


def collect_stances(
    fellows: Sequence[AgentBackend],
    revised_reports: Sequence[Report],
    current: Report,
    round: int,
    instructions: Sequence[str] = (),
    *,
    draft: Report | None = None,
    evidence: Sequence[str] | None = None,
    attending_reasons: Sequence[str] = (),
    templates: Mapping[str, PromptTemplate] | None = None,
    max_repairs: int = 1,
    degraded_mode: bool = False,
    exchanges: list[Exchange] | None = None,
    failures: list[dict[str, str]] | None = None,
) -> list[Stance]:
    """Ask every fellow for its stance on ``current``, concurrently.

    Results and exchanges are ordered by fellow index whatever the completion
    order. With ``degraded_mode`` a failing fellow is dropped and logged in
    ``failures``; otherwise the first failure propagates.
    """
    if len(fellows) != len(revised_reports):
        raise ValueError("one revised report per fellow is required")
    if round < 1:
        raise ValueError("stance rounds start at 1")
    templates = templates or default_templates()
    evidence = list(evidence) if evidence is not None else [""] * len(fellows)

    def ask(i: int) -> tuple[Stance | None, list[Exchange], BaseException | None]:
        instruction = instructions[i] if round >= 2 and i < len(instructions) else None
        prompt = stance_prompt(
            templates,
            evidence=evidence[i],
            draft=draft,
            fellow_report=revised_reports[i],
            current=current,
            attending_reasons=attending_reasons,
            instruction=instruction,
        )
        local: list[Exchange] = []
        fellow = fellows[i]
        try:
            stance = invoke_with_repair(
                fellow,
                prompt,
                lambda text: parse_fellow_stance(text, fellow_id=fellow.name, round=round),
                max_repairs,
                local,
            )
        except (BackendError, ExhaustedRepairs) as exc:
            if isinstance(exc, ExhaustedRepairs):
                local = exc.exchanges
            return None, local, exc
        return stance, local, None

    if len(fellows) == 1:
        outcomes = [ask(0)]
    else:
        with ThreadPoolExecutor(max_workers=len(fellows)) as pool:
            outcomes = list(pool.map(ask, range(len(fellows))))

    stances = []
    first_error: BaseException | None = None
    for i, (stance, local, error) in enumerate(outcomes):
        if exchanges is not None:
            exchanges.extend(local)
        if error is not None:
            if failures is not None:
                failures.append({"fellow_id": fellows[i].name, "error": str(error)})
            first_error = first_error or error
            continue
        stances.append(stance)
    if first_error is not None and (not degraded_mode or not stances):
        raise first_error
    return stances


def adjudicate(
    attending: AgentBackend,
    current: Report,
    stances: Sequence[Stance],
    round: int,
    *,
    templates: Mapping[str, PromptTemplate] | None = None,
    max_repairs: int = 1,
    exchanges: list[Exchange] | None = None,
) -> AttendingDecision:
    """Let the attending weigh the stances and decide whether to continue."""
    templates = templates or default_templates()
    prompt = render_prompt(
        templates["attending_adjudication"],
        {"current_report": serialize_report(current), "fellow_info": format_stances(stances)},
    )

    def parse(text: str) -> AttendingDecision:
        decision = parse_attending_decision(text)
        if decision.report != current and not decision.reasons:
            raise SchemaViolation("'reasons' must explain a revised report")
        return decision

    logger.debug("adjudicating round %d with %d stances", round, len(stances))
    return invoke_with_repair(attending, prompt, parse, max_repairs, exchanges)


def run_consensus(
    attending: AgentBackend,
    fellows: Sequence[AgentBackend],
    revised_reports: Sequence[Report],
    config: ConsensusConfig = ConsensusConfig(),
    *,
    draft: Report | None = None,
    evidence: Sequence[str] | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> ConsensusTranscript:
    """Run synthesis and stance rounds until the attending stops or ``max_rounds`` is hit.

    Raises ``ConsensusAborted`` (with the partial transcript) if an agent
    fails unrecoverably.
    """
    n = config.num_fellows
    if len(fellows) != n or len(revised_reports) != n:
        raise ValueError(f"expected {n} fellows and revised reports, got {len(fellows)} and {len(revised_reports)}")
    templates = templates or default_templates()
    transcript = ConsensusTranscript()
    record: RoundRecord | None = None
    try:
        exchanges: list[Exchange] = []
        try:
            synthesis = synthesize_initial(
                attending, revised_reports, draft=draft, templates=templates,
                max_repairs=config.max_repairs, exchanges=exchanges,
            )
        finally:
            if exchanges:
                transcript.synthesis = RoundRecord(0, Report(), raw_exchanges=exchanges)
        transcript.synthesis = RoundRecord(0, synthesis.report, reasons=list(synthesis.reasons), raw_exchanges=exchanges)

        current = synthesis.report
        reasons: Sequence[str] = synthesis.reasons
        instructions: Sequence[str] = ()
        for t in range(1, config.max_rounds + 1):
            record = RoundRecord(t, current)
            transcript.rounds.append(record)
            record.stances = collect_stances(
                fellows, revised_reports, current, t,
                instructions if config.feed_instructions else (),
                draft=draft, evidence=evidence, attending_reasons=reasons, templates=templates,
                max_repairs=config.max_repairs, degraded_mode=config.degraded_mode,
                exchanges=record.raw_exchanges, failures=record.failures,
            )
            if config.unanimity_short_circuit and all(s.answer is Answer.AGREE for s in record.stances):
                transcript.final_report = current
                transcript.termination = Termination.UNANIMOUS_AGREEMENT
                return transcript
            decision = adjudicate(
                attending, current, record.stances, t, templates=templates,
                max_repairs=config.max_repairs, exchanges=record.raw_exchanges,
            )
            record.decision = decision
            record.reasons = list(decision.reasons)
            if decision.action is Action.STOP:
                transcript.final_report = decision.report
                transcript.termination = Termination.ATTENDING_STOP
                return transcript
            if t == config.max_rounds:
                transcript.final_report = decision.report
                transcript.termination = Termination.MAX_ROUNDS_REACHED
                return transcript
            current = decision.report
            reasons = decision.reasons
            instructions = decision.instructions
    except (BackendError, ExhaustedRepairs) as exc:
        if isinstance(exc, ExhaustedRepairs) and record is not None:
            seen = {id(e) for e in record.raw_exchanges}
            record.raw_exchanges.extend(e for e in exc.exchanges if id(e) not in seen)
        raise ConsensusAborted(f"consensus aborted: {exc}", transcript, cause=exc) from exc
    raise AssertionError("unreachable")

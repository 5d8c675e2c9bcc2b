"""End-to-end case execution: drafting, retrieval-augmented revision, consensus."""

from __future__ import annotations

import enum
import json
import logging
import time
from collections import Counter
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Protocol

from .agents.backends import AgentBackend, AgentRole, Exchange, estimate_tokens, invoke_with_repair
from .agents.parsing import parse_fellow_revision, parse_resident_draft
from .agents.prompts import PromptTemplate, load_templates, render_prompt
from .consensus import (
    ConsensusConfig,
    ConsensusTranscript,
    default_templates,
    run_consensus,
    synthesize_initial,
)
from .core import CaseDatabase, CaseRecord, Report, parse_report, serialize_report
from .errors import ConsensusAborted, MarchError
from .evaluation import Labeler, MetricsTable, evaluate
from .retrieval import (
    DEFAULT_K,
    PARADIGMS,
    CaseRetriever,
    RetrievalParadigm,
    RetrievedEvidence,
    assemble_evidence,
    subset_evidence,
)

logger = logging.getLogger(__name__)


class PipelineMode(str, enum.Enum):
    RESIDENT_ONLY = "resident_only"
    SR_SA = "sr_sa"
    SR_MA = "sr_ma"
    MR_MA = "mr_ma"
    FULL = "full"

    @classmethod
    def parse(cls, value: "str | PipelineMode") -> "PipelineMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "residentonly": cls.RESIDENT_ONLY,
            "singleroundsingleagent": cls.SR_SA,
            "singleroundmultiagent": cls.SR_MA,
            "multiroundmultiagent": cls.MR_MA,
        }
        try:
            return cls(key)
        except ValueError:
            pass
        if key.replace("_", "") in aliases:
            return aliases[key.replace("_", "")]
        raise ValueError(f"unknown pipeline mode {value!r}")


class BackendFactory(Protocol):
    """Creates the agent for one role slot of one case.

    ``index`` is the fellow index (0-based) and 0 for other roles;
    ``num_fellows`` is the effective fellow count for the run.
    """

    def __call__(self, role: AgentRole, index: int, case_id: str, num_fellows: int) -> AgentBackend: ...


@dataclass(frozen=True)
class PipelineConfig:
    mode: PipelineMode = PipelineMode.FULL
    consensus: ConsensusConfig = ConsensusConfig()
    retrieval_k: int = DEFAULT_K
    paradigms: tuple[RetrievalParadigm, ...] = PARADIGMS
    backends: BackendFactory | None = None
    transcript_dir: Path | None = None
    template_dir: Path | None = None

    def effective_consensus(self) -> ConsensusConfig:
        c = self.consensus
        if self.mode is PipelineMode.SR_SA:
            return replace(c, num_fellows=1, max_rounds=1)
        if self.mode is PipelineMode.SR_MA:
            return replace(c, max_rounds=1)
        if self.mode is PipelineMode.MR_MA:
            return replace(c, unanimity_short_circuit=False, feed_instructions=False)
        if self.mode is PipelineMode.FULL:
            return replace(c, feed_instructions=True)
        return c

    def with_fellows(self, n: int) -> "PipelineConfig":
        return replace(self, consensus=replace(self.consensus, num_fellows=n))


@dataclass
class CaseResult:
    case_id: str
    mode: PipelineMode
    draft: Report | None = None
    revised: list[Report] = field(default_factory=list)
    final: Report | None = None
    transcript: ConsensusTranscript | None = None
    exchanges: list[Exchange] = field(default_factory=list)
    usage: dict[str, dict[str, int]] = field(default_factory=dict)
    elapsed_s: float = 0.0
    error: str | None = None
    failed_stage: str | None = None
    termination: str | None = None
    rounds_used: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict[str, Any]:
        """Deterministic record; wall-clock timing is deliberately left out."""
        return {
            "case_id": self.case_id,
            "mode": self.mode.value,
            "draft": serialize_report(self.draft) if self.draft is not None else None,
            "revised": [serialize_report(r) for r in self.revised],
            "final": serialize_report(self.final) if self.final is not None else None,
            "termination": self.termination,
            "rounds_used": self.rounds_used,
            "usage": self.usage,
            "error": self.error,
            "failed_stage": self.failed_stage,
            "exchanges": [e.to_json() for e in self.exchanges],
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any], transcript: ConsensusTranscript | None = None) -> "CaseResult":
        def rep(value: str | None) -> Report | None:
            return parse_report(value) if value is not None else None

        return cls(
            case_id=data["case_id"],
            mode=PipelineMode(data["mode"]),
            draft=rep(data.get("draft")),
            revised=[parse_report(r) for r in data.get("revised", [])],
            final=rep(data.get("final")),
            transcript=transcript,
            exchanges=[Exchange(**e) for e in data.get("exchanges", [])],
            usage=data.get("usage", {}),
            error=data.get("error"),
            failed_stage=data.get("failed_stage"),
            termination=data.get("termination"),
            rounds_used=data.get("rounds_used", 0),
        )


def assign_paradigms(num_fellows: int, paradigms: Sequence[RetrievalParadigm]) -> list[tuple[RetrievalParadigm, ...]]:
    """Round-robin paradigm assignment.

    With at least as many fellows as paradigms, fellow ``i`` gets paradigm
    ``i mod P``. With fewer fellows, paradigm ``j`` goes to fellow ``j mod N``
    so that no paradigm's evidence is dropped.
    """
    if not paradigms:
        return [() for _ in range(num_fellows)]
    if num_fellows >= len(paradigms):
        return [(paradigms[i % len(paradigms)],) for i in range(num_fellows)]
    return [tuple(p for j, p in enumerate(paradigms) if j % num_fellows == i) for i in range(num_fellows)]


def _features_text(case: CaseRecord) -> tuple[str, str]:
    def fmt(vec: Any) -> str:
        return "[" + ", ".join(f"{v:.4f}" for v in vec) + "]" if vec is not None else "(not available)"

    return fmt(case.image_embedding), f"abnormality logits: {fmt(case.logits)}"


def _usage(exchanges: Sequence[Exchange]) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for e in exchanges:
        slot = out.setdefault(e.role or "unknown", {"calls": 0, "prompt_tokens": 0, "completion_tokens": 0})
        slot["calls"] += 1
        slot["prompt_tokens"] += estimate_tokens(e.prompt)
        slot["completion_tokens"] += estimate_tokens(e.completion)
    return dict(sorted(out.items()))


class _Stage:
    def __init__(self, result: CaseResult):
        self.result = result
        self.name = "setup"

    def __call__(self, name: str) -> "_Stage":
        self.name = name
        return self


def _templates(config: PipelineConfig) -> Mapping[str, PromptTemplate]:
    return load_templates(config.template_dir) if config.template_dir else default_templates()


def _make(config: PipelineConfig, role: AgentRole, index: int, case_id: str, n: int) -> AgentBackend:
    if config.backends is None:
        raise MarchError(f"no backend bound for role {role.value}")
    return config.backends(role, index, case_id, n)


def run_case(
    case: CaseRecord,
    db: CaseDatabase,
    config: PipelineConfig,
    retriever: CaseRetriever | None = None,
) -> CaseResult:
    """Run one case through the stages selected by ``config.mode``.

    Failures are recorded on the returned result (``error``/``failed_stage``)
    rather than raised.
    """
    started = time.perf_counter()
    result = CaseResult(case_id=case.case_id, mode=config.mode)
    stage = _Stage(result)
    templates = _templates(config)
    consensus = config.effective_consensus()
    n = consensus.num_fellows
    try:
        stage("draft")
        if case.draft is not None:
            draft = case.draft
        else:
            resident = _make(config, AgentRole.RESIDENT, 0, case.case_id, n)
            global_feats, regional_feats = _features_text(case)
            prompt = render_prompt(
                templates["resident_draft"],
                {"global_features": global_feats, "regional_features": regional_feats},
            )
            draft = invoke_with_repair(resident, prompt, parse_resident_draft, consensus.max_repairs, result.exchanges)
        result.draft = draft
        if config.mode is PipelineMode.RESIDENT_ONLY:
            result.final = draft
            return result

        stage("retrieval")
        if retriever is None:
            retriever = CaseRetriever(k=config.retrieval_k, paradigms=list(config.paradigms)).fit(db)
        full_evidence = _retrieve(retriever, case, config)
        assignments = assign_paradigms(n, [p for p in PARADIGMS if p in config.paradigms])
        evidence = [subset_evidence(full_evidence, a).rendered for a in assignments]

        stage("revision")
        fellows = [_make(config, AgentRole.FELLOW, i, case.case_id, n) for i in range(n)]
        result.revised = _revise(fellows, draft, evidence, templates, consensus.max_repairs, result.exchanges)
        if config.mode is PipelineMode.SR_SA:
            result.final = result.revised[0]
            return result

        stage("consensus")
        attending = _make(config, AgentRole.ATTENDING, 0, case.case_id, n)
        if config.mode is PipelineMode.SR_MA:
            exchanges: list[Exchange] = []
            try:
                synthesis = synthesize_initial(
                    attending, result.revised, draft=draft, templates=templates,
                    max_repairs=consensus.max_repairs, exchanges=exchanges,
                )
            finally:
                result.exchanges.extend(exchanges)
            result.final = synthesis.report
            return result

        try:
            transcript = run_consensus(
                attending, fellows, result.revised, consensus, draft=draft, evidence=evidence, templates=templates
            )
        except ConsensusAborted as exc:
            result.transcript = exc.transcript
            raise
        result.transcript = transcript
        result.final = transcript.final_report
        return result
    except (MarchError, ValueError) as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        result.failed_stage = stage.name
        logger.warning("case %s failed during %s: %s", case.case_id, stage.name, result.error)
        return result
    finally:
        all_exchanges = list(result.exchanges)
        if result.transcript is not None:
            all_exchanges += result.transcript.exchanges()
            termination = result.transcript.termination
            result.termination = termination.value if termination else None
            result.rounds_used = result.transcript.rounds_used
        result.usage = _usage(all_exchanges)
        result.elapsed_s = time.perf_counter() - started
        if config.transcript_dir is not None and result.transcript is not None:
            write_transcript(result.transcript, Path(config.transcript_dir) / f"{safe_name(case.case_id)}.json")


def _retrieve(retriever: CaseRetriever, case: CaseRecord, config: PipelineConfig) -> RetrievedEvidence:
    neighbors = {p: retriever.kneighbors(case, p, config.retrieval_k) for p in PARADIGMS if p in config.paradigms}
    return assemble_evidence(neighbors, retriever.database_, config.retrieval_k)


def _revise(
    fellows: Sequence[AgentBackend],
    draft: Report,
    evidence: Sequence[str],
    templates: Mapping[str, PromptTemplate],
    max_repairs: int,
    exchanges: list[Exchange],
) -> list[Report]:
    def revise(i: int) -> tuple[Report | None, list[Exchange], BaseException | None]:
        prompt = render_prompt(
            templates["fellow_revision"],
            {"init_report": serialize_report(draft), "retrieved_report": evidence[i] or "(none)"},
        )
        local: list[Exchange] = []
        try:
            return invoke_with_repair(fellows[i], prompt, parse_fellow_revision, max_repairs, local), local, None
        except MarchError as exc:
            return None, local, exc

    if len(fellows) == 1:
        outcomes = [revise(0)]
    else:
        with ThreadPoolExecutor(max_workers=len(fellows)) as pool:
            outcomes = list(pool.map(revise, range(len(fellows))))
    reports = []
    for report, local, error in outcomes:
        exchanges.extend(local)
        if error is not None:
            raise error
        reports.append(report)
    return reports


def run_batch(
    db_eval: CaseDatabase | Sequence[CaseRecord],
    db_train: CaseDatabase,
    config: PipelineConfig,
    parallelism: int = 1,
    skip: set[str] | None = None,
    retriever: CaseRetriever | None = None,
) -> list[CaseResult]:
    """Run every eval case against ``db_train``; results sorted by case_id."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    cases = [c for c in db_eval if not skip or c.case_id not in skip]
    if retriever is None and config.mode is not PipelineMode.RESIDENT_ONLY:
        retriever = CaseRetriever(k=config.retrieval_k, paradigms=list(config.paradigms)).fit(db_train)
    if parallelism == 1:
        results = [run_case(c, db_train, config, retriever) for c in cases]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(lambda c: run_case(c, db_train, config, retriever), cases))
    results.sort(key=lambda r: r.case_id)
    return results


def sweep_fellows(
    db_eval: CaseDatabase,
    db_train: CaseDatabase,
    base_config: PipelineConfig,
    counts: Sequence[int],
    labeler: Labeler | None = None,
    parallelism: int = 1,
) -> dict[int, MetricsTable]:
    if not counts:
        raise ValueError("counts must be nonempty")
    if any(n < 1 for n in counts):
        raise ValueError("every fellow count must be >= 1")
    rows: dict[int, MetricsTable] = {}
    for n in counts:
        results = run_batch(db_eval, db_train, base_config.with_fellows(n), parallelism)
        rows[n] = evaluate(results, db_eval, labeler)
    return rows


def summarize(results: Sequence[CaseResult]) -> dict[str, Any]:
    totals: Counter = Counter()
    for r in results:
        for role_usage in r.usage.values():
            totals.update(role_usage)
    rounds = Counter(r.rounds_used for r in results if r.termination is not None and r.ok)
    return {
        "cases": len(results),
        "failures": sum(1 for r in results if not r.ok),
        "rounds_histogram": {str(k): v for k, v in sorted(rounds.items())},
        "tokens": {k: totals[k] for k in ("calls", "prompt_tokens", "completion_tokens")},
        "elapsed_s": round(sum(r.elapsed_s for r in results), 3),
    }


def safe_name(case_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in case_id)


def _dump(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, ensure_ascii=False, sort_keys=False) + "\n", encoding="utf-8")


def write_transcript(transcript: ConsensusTranscript, path: str | Path) -> None:
    _dump(transcript.to_json(), Path(path))


def read_transcript(path: str | Path) -> ConsensusTranscript:
    return ConsensusTranscript.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_result(result: CaseResult, path: str | Path) -> None:
    _dump(result.to_json(), Path(path))


def read_result(path: str | Path) -> CaseResult:
    return CaseResult.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


__all__ = [
    "BackendFactory",
    "CaseResult",
    "PipelineConfig",
    "PipelineMode",
    "assign_paradigms",
    "read_result",
    "read_transcript",
    "run_batch",
    "run_case",
    "summarize",
    "sweep_fellows",
    "write_result",
    "write_transcript",
]

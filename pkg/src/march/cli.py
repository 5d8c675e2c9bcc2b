"""Command-line entry point: ``march <command> ...``.

Exit codes: 0 success, 1 validation/config error, 2 backend failure,
3 partial batch failure.
"""

from __future__ import annotations

import argparse
import enum
import json
import logging
import sys
from collections import Counter
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path

from .config import RunSettings, load_settings
from .core import ABNORMALITIES, REGIONS, CaseDatabase, load_database, serialize_report, write_database
from .errors import ConfigError, DimensionMismatch, MarchError, SchemaError
from .evaluation import evaluate, keyword_labeler, load_lexicon
from .pipeline import (
    CaseResult,
    read_result,
    read_transcript,
    run_batch,
    safe_name,
    summarize,
    sweep_fellows,
    write_result,
)
from .retrieval import PARADIGMS, RetrievalParadigm

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2
EXIT_PARTIAL = 3

log = logging.getLogger("march")


class Command(str, enum.Enum):
    INGEST = "ingest"
    VALIDATE = "validate"
    RUN = "run"
    EVAL = "eval"
    SWEEP = "sweep"
    INSPECT_TRANSCRIPT = "inspect"


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _labeler(lexicon: str | None):
    return keyword_labeler(load_lexicon(lexicon) if lexicon else None)


def _load(path: str | Path, what: str) -> CaseDatabase:
    try:
        return load_database(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} database {path}: {exc.strerror or exc}") from None
    except (SchemaError, DimensionMismatch) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def cmd_ingest(args: argparse.Namespace) -> int:
    db = _load(args.input, "input")
    write_database(db, args.output)
    labeler = _labeler(args.lexicon)
    regions: Counter = Counter()
    abnormalities: Counter = Counter()
    for case in db:
        regions.update(case.report.keys())
        abnormalities.update(a for a, v in labeler.label(case.report).items() if v)
    print(f"{len(db)} cases")
    print(f"image embedding dim: {db.d_img}  text embedding dim: {db.d_txt}")
    print("Regions")
    for r in REGIONS:
        print(f"  {r.value:<36}{regions[r]:>8}")
    print("Clinical Abnormalities")
    for a in ABNORMALITIES:
        print(f"  {a.value:<36}{abnormalities[a]:>8}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    db = _load(args.database, "input")
    paradigms = _parse_paradigms(args.paradigms) or PARADIGMS
    print(f"{len(db)} cases; d_img={db.d_img} d_txt={db.d_txt}")
    ok = True
    for p in paradigms:
        have = sum(1 for c in db if getattr(c, p.candidate_feature) is not None)
        problem = ""
        if p is RetrievalParadigm.IMAGE_TO_TEXT and db.d_img is not None and db.d_txt is not None and db.d_img != db.d_txt:
            problem = f"d_img ({db.d_img}) != d_txt ({db.d_txt})"
        status = "unusable: " + problem if problem else "ok"
        ok = ok and not problem
        print(f"  {p.label:<14} {have}/{len(db)} cases indexed  {status}")
    drafts = sum(1 for c in db if c.draft is not None)
    print(f"  drafts supplied: {drafts}/{len(db)}")
    return EXIT_OK if ok else EXIT_VALIDATION


def _parse_paradigms(value: str | None):
    if not value:
        return None
    try:
        return tuple(RetrievalParadigm.parse(v) for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _overrides(args: argparse.Namespace) -> dict:
    out = {
        "mode": getattr(args, "mode", None),
        "fellows": getattr(args, "fellows", None),
        "max_rounds": getattr(args, "max_rounds", None),
        "k": getattr(args, "k", None),
        "paradigms": getattr(args, "paradigms", None),
        "parallelism": getattr(args, "parallelism", None),
    }
    if getattr(args, "strict", False):
        out["strict"] = True
    return out


def _settings(args: argparse.Namespace) -> RunSettings:
    return load_settings(args.config, _overrides(args))


def _databases(args: argparse.Namespace, settings: RunSettings) -> tuple[CaseDatabase, CaseDatabase]:
    eval_path = args.eval_db or settings.eval_db
    train_path = args.train_db or settings.train_db
    if eval_path is None or train_path is None:
        raise ConfigError("both an eval and a train database are required (--eval-db/--train-db or data: in config)")
    return _load(eval_path, "eval"), _load(train_path, "train")


_BACKEND_ERRORS = ("BackendError", "ConsensusAborted", "ExhaustedRepairs")


def cmd_run(args: argparse.Namespace) -> int:
    settings = _settings(args)
    eval_db, train_db = _databases(args, settings)
    out = Path(args.out)
    results_dir = out / "results"
    transcripts_dir = Path(args.transcripts) if args.transcripts else settings.pipeline.transcript_dir or out / "transcripts"
    pipeline = replace(settings.pipeline, transcript_dir=transcripts_dir)
    out.mkdir(parents=True, exist_ok=True)

    existing: dict[str, CaseResult] = {}
    if not args.force and results_dir.exists():
        for case in eval_db:
            path = results_dir / f"{safe_name(case.case_id)}.json"
            if path.exists():
                existing[case.case_id] = read_result(path)
    if existing:
        print(f"resuming: {len(existing)} case(s) already have results (use --force to rerun)")

    results = run_batch(eval_db, train_db, pipeline, settings.parallelism, skip=set(existing))
    for r in results:
        write_result(r, results_dir / f"{safe_name(r.case_id)}.json")

    new_summary = summarize(results)
    everything = sorted([*results, *existing.values()], key=lambda r: r.case_id)
    summary = summarize(everything)
    summary["elapsed_s"] = new_summary["elapsed_s"]
    summary["timings"] = {r.case_id: round(r.elapsed_s, 4) for r in results}
    (out / "run_log.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")

    print(f"cases: {summary['cases']}  failures: {summary['failures']}")
    print(f"rounds histogram: {summary['rounds_histogram']}")
    tokens = summary["tokens"]
    print(f"agent calls: {tokens['calls']}  prompt tokens: {tokens['prompt_tokens']}  completion tokens: {tokens['completion_tokens']}")
    for r in everything:
        if not r.ok:
            print(f"  FAILED {r.case_id} [{r.failed_stage}] {r.error}", file=sys.stderr)

    failed = [r for r in everything if not r.ok]
    if failed and len(failed) == len(everything) and all(r.error.startswith(_BACKEND_ERRORS) for r in failed):
        return EXIT_BACKEND
    if failed and settings.strict:
        return EXIT_PARTIAL
    return EXIT_OK


def _results_from_dir(path: Path) -> list[CaseResult]:
    if (path / "results").is_dir():
        path = path / "results"
    if not path.is_dir():
        raise ConfigError(f"results directory {path} does not exist")
    files = sorted(path.glob("*.json"))
    if not files:
        raise ConfigError(f"no result files in {path}")
    return [read_result(f) for f in files]


def cmd_eval(args: argparse.Namespace) -> int:
    results = _results_from_dir(Path(args.results_dir))
    refs = _load(args.reference_db, "reference")
    table = evaluate(results, refs, _labeler(args.lexicon))
    print(table.format_text())
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(table.to_json(), indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def _counts(value: str) -> list[int]:
    try:
        counts = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--counts must be comma-separated integers, got {value!r}") from None
    if not counts or any(c < 1 for c in counts):
        raise ConfigError("--counts needs at least one positive integer")
    return counts


def format_sweep(rows: dict) -> str:
    lines = [f"{'N':>4}  {'BLEU-1':>8}  {'BLEU-4':>8}  {'ROUGE-L':>8}  {'CE-F1':>8}"]
    for n, t in rows.items():
        lines.append(f"{n:>4}  {t.bleu[1]:8.4f}  {t.bleu[4]:8.4f}  {t.rouge_l:8.4f}  {t.ce_f1:8.4f}")
    return "\n".join(lines)


def cmd_sweep(args: argparse.Namespace) -> int:
    counts = _counts(args.counts)
    settings = _settings(args)
    eval_db, train_db = _databases(args, settings)
    rows = sweep_fellows(eval_db, train_db, settings.pipeline, counts, _labeler(args.lexicon), settings.parallelism)
    print(format_sweep(rows))
    if args.json_out:
        payload = {str(n): t.to_json() for n, t in rows.items()}
        Path(args.json_out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def format_transcript(transcript) -> str:
    lines = []
    if transcript.synthesis is not None:
        s = transcript.synthesis
        lines.append("== Round 0: synthesis ==")
        lines.append(f"consensus: {_ser(s.consensus_report)}")
        for reason in s.reasons:
            lines.append(f"  reason: {reason}")
    for r in transcript.rounds:
        lines.append(f"== Round {r.index} ==")
        lines.append(f"under review: {_ser(r.consensus_report)}")
        for st in r.stances:
            lines.append(f"  {st.fellow_id or 'fellow'}: {st.answer.value} (confidence {st.confidence}) - {st.reason}")
            for ev in st.evidences:
                lines.append(f"      evidence: {ev}")
        for f in r.failures:
            lines.append(f"  FAILED {f['fellow_id']}: {f['error']}")
        if r.decision is None:
            lines.append("  attending: not consulted (unanimous agreement)")
        else:
            d = r.decision
            lines.append(f"  attending: {'continue' if d.action.value == 'Continue' else 'stop'}")
            lines.append(f"  revised: {_ser(d.report)}")
            for reason in d.reasons:
                lines.append(f"    reason: {reason}")
            for i, instr in enumerate(d.instructions, start=1):
                lines.append(f"    instruction {i}: {instr}")
        lines.append(f"  exchanges recorded: {len(r.raw_exchanges)}")
    term = transcript.termination.value if transcript.termination else "incomplete"
    lines.append(f"== Termination: {term} after {transcript.rounds_used} round(s) ==")
    if transcript.final_report is not None:
        lines.append(f"final: {_ser(transcript.final_report)}")
    return "\n".join(lines)


def _ser(report) -> str:
    return serialize_report(report) or "(empty)"


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        transcript = read_transcript(args.transcript)
    except OSError as exc:
        raise ConfigError(f"cannot read transcript {args.transcript}: {exc.strerror or exc}") from None
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{args.transcript} is not a valid transcript: {exc}") from None
    print(format_transcript(transcript))
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration (mode, agents, backends, data paths)")
    p.add_argument("--eval-db", help="JSONL cases to generate reports for (overrides data.eval)")
    p.add_argument("--train-db", help="JSONL retrieval corpus (overrides data.train)")
    p.add_argument("--mode", help="resident_only | sr_sa | sr_ma | mr_ma | full")
    p.add_argument("--fellows", type=int, metavar="N", help="number of fellow agents")
    p.add_argument("--max-rounds", type=int, metavar="T", help="maximum consensus rounds")
    p.add_argument("--k", type=int, help="neighbours retrieved per paradigm")
    p.add_argument("--paradigms", help="comma-separated: image_to_image,image_to_text,logits_based")
    p.add_argument("--parallelism", type=int, help="cases processed concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="march", description="Hierarchical multi-agent radiology report generation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(Command.INGEST.value, help="validate and normalise a JSONL case file")
    p.add_argument("input", help="JSONL case file to validate")
    p.add_argument("output", help="where to write the normalised JSONL")
    p.add_argument("--lexicon", help="JSON abnormality lexicon used for prevalence counts")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser(Command.VALIDATE.value, help="check a case database can serve each retrieval paradigm")
    p.add_argument("database", help="JSONL case file")
    p.add_argument("--paradigms", help="comma-separated paradigms to check (default: all)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser(Command.RUN.value, help="generate reports for a batch of cases")
    _add_run_flags(p)
    p.add_argument("--out", default="march-out", help="output directory (results/, transcripts/, run_log.json)")
    p.add_argument("--transcripts", metavar="DIR", help="where consensus transcripts are written")
    p.add_argument("--force", action="store_true", help="rerun cases that already have result files")
    p.add_argument("--strict", action="store_true", help="exit 3 if any case failed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser(Command.EVAL.value, help="score results against reference reports")
    p.add_argument("results_dir", help="run output directory or its results/ subdirectory")
    p.add_argument("reference_db", help="JSONL with the reference reports")
    p.add_argument("--lexicon", help="JSON abnormality lexicon (default: built-in)")
    p.add_argument("--json-out", help="also write metrics as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(Command.SWEEP.value, help="run and score the pipeline for several fellow counts")
    _add_run_flags(p)
    p.add_argument("--counts", default="1,3,5,10,20", help="comma-separated fellow counts (default 1,3,5,10,20)")
    p.add_argument("--lexicon", help="JSON abnormality lexicon (default: built-in)")
    p.add_argument("--json-out", help="also write per-count metrics as JSON here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser(Command.INSPECT_TRANSCRIPT.value, help="pretty-print a stored consensus transcript")
    p.add_argument("transcript", help="transcript JSON file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MarchError as exc:
        _err(str(exc))
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

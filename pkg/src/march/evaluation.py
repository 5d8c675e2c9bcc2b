"""Lexical (BLEU-1..4, ROUGE-L) and clinical-efficacy metrics for generated reports."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol

from .core import ABNORMALITIES, AbnormalityId, CaseRecord, Report, serialize_report
from .errors import IncompleteLexicon, LengthMismatch, UnmatchedCase

if TYPE_CHECKING:
    from .pipeline import CaseResult

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
NEGATION_CUES: tuple[tuple[str, ...], ...] = (("no",), ("without",), ("not",), ("negative", "for"))

_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase; words and individual punctuation marks become separate tokens."""
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate: str, references: Sequence[str] | str, n: int = 4) -> float:
    """Sentence-level BLEU with uniform weights over orders 1..n.

    Orders the candidate is too short to contain are left out of the
    geometric mean. A zero match count at order >= 2 is replaced by
    ``BLEU_EPSILON``; no unigram overlap gives 0.
    """
    if n not in (1, 2, 3, 4):
        raise ValueError(f"n must be in 1..4, got {n}")
    if isinstance(references, str):
        references = [references]
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    refs = [r for r in refs if r]
    if not cand or not refs:
        return 0.0

    log_sum = 0.0
    orders = 0
    for k in range(1, n + 1):
        cand_counts = _ngrams(cand, k)
        total = sum(cand_counts.values())
        if total == 0:
            break
        max_ref: Counter = Counter()
        for ref in refs:
            max_ref |= _ngrams(ref, k)
        matches = sum(min(c, max_ref[g]) for g, c in cand_counts.items())
        if matches == 0:
            if k == 1:
                return 0.0
            precision = BLEU_EPSILON / total
        else:
            precision = matches / total
        log_sum += math.log(precision)
        orders += 1

    c = len(cand)
    r = min((len(ref) for ref in refs), key=lambda length: (abs(length - c), length))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / orders)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure, ``beta`` weighting recall."""
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


LabelVector = dict[AbnormalityId, bool]


def empty_labels() -> LabelVector:
    return {a: False for a in ABNORMALITIES}


class Labeler(Protocol):
    descriptor: str

    def label(self, report: Report) -> LabelVector: ...


class KeywordLabeler:
    """Phrase-lexicon labeler with a simple preceding-negation rule.

    A label is positive when one of its phrases occurs as whole words and
    none of the negation cues appears within ``negation_window`` tokens
    before it in the same sentence.
    """

    def __init__(self, lexicon: Mapping[str, Sequence[str]], negation_window: int = 6):
        resolved: dict[AbnormalityId, list[tuple[str, ...]]] = {}
        for key, phrases in lexicon.items():
            try:
                abnormality = AbnormalityId(key.strip().lower())
            except ValueError:
                raise IncompleteLexicon(f"unknown abnormality {key!r} in lexicon") from None
            resolved[abnormality] = [tuple(tokenize(p)) for p in phrases if tokenize(p)]
        missing = [a.value for a in ABNORMALITIES if not resolved.get(a)]
        if missing:
            raise IncompleteLexicon(f"lexicon has no phrases for: {', '.join(missing)}")
        self.lexicon = resolved
        self.negation_window = negation_window
        self.descriptor = f"keyword(window={negation_window})"

    def _negated(self, sentence: Sequence[str], start: int) -> bool:
        lo = max(0, start - self.negation_window)
        window = sentence[lo:start]
        for cue in NEGATION_CUES:
            for i in range(len(window) - len(cue) + 1):
                if tuple(window[i : i + len(cue)]) == cue:
                    return True
        return False

    def label_text(self, text: str) -> LabelVector:
        labels = empty_labels()
        sentences: list[list[str]] = [[]]
        for tok in tokenize(text):
            if tok in (".", ";", "!", "?"):
                sentences.append([])
            else:
                sentences[-1].append(tok)
        for abnormality, phrases in self.lexicon.items():
            labels[abnormality] = any(
                not self._negated(sent, i)
                for sent in sentences
                for phrase in phrases
                for i in range(len(sent) - len(phrase) + 1)
                if tuple(sent[i : i + len(phrase)]) == phrase
            )
        return labels

    def label(self, report: Report) -> LabelVector:
        return self.label_text(report.text())


def default_lexicon() -> dict[str, list[str]]:
    text = resources.files("march").joinpath("lexicon.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_lexicon(path: str | Path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def keyword_labeler(lexicon: Mapping[str, Sequence[str]] | None = None, negation_window: int = 6) -> KeywordLabeler:
    return KeywordLabeler(default_lexicon() if lexicon is None else lexicon, negation_window)


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    support: int = 0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "PRF":
        """Each score is a single correctly rounded division of integer counts."""
        exact = _exact_prf(tp, fp, fn)
        return cls(*(float(x) for x in exact), tp + fn)

    def to_json(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "support": self.support}


@dataclass
class MetricsTable:
    bleu: dict[int, float] = field(default_factory=dict)
    rouge_l: float | None = None
    per_abnormality: dict[AbnormalityId, PRF] = field(default_factory=dict)
    micro: PRF | None = None
    macro: PRF | None = None
    num_cases: int = 0

    @property
    def ce_f1(self) -> float:
        return self.micro.f1 if self.micro else 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "num_cases": self.num_cases,
            **{f"bleu_{n}": v for n, v in sorted(self.bleu.items())},
            "rouge_l": self.rouge_l,
            "ce_micro": self.micro.to_json() if self.micro else None,
            "ce_macro": self.macro.to_json() if self.macro else None,
            "ce_per_abnormality": {a.value: prf.to_json() for a, prf in self.per_abnormality.items()},
        }

    def format_text(self) -> str:
        lines = [f"cases: {self.num_cases}"]
        head = [f"BLEU-{n}" for n in sorted(self.bleu)] + ["ROUGE-L", "CE-P", "CE-R", "CE-F1"]
        vals = [self.bleu[n] for n in sorted(self.bleu)] + [
            self.rouge_l or 0.0,
            *(astuple_prf(self.micro) if self.micro else (0.0, 0.0, 0.0)),
        ]
        lines.append("  ".join(f"{h:>8}" for h in head))
        lines.append("  ".join(f"{v:8.4f}" for v in vals))
        if self.macro:
            lines.append(f"macro CE  P={self.macro.precision:.4f}  R={self.macro.recall:.4f}  F1={self.macro.f1:.4f}")
        if self.per_abnormality:
            width = max(len(a.value) for a in self.per_abnormality)
            lines.append("")
            lines.append(f"{'abnormality':<{width}}  {'P':>6}  {'R':>6}  {'F1':>6}  {'support':>7}")
            for a, prf in self.per_abnormality.items():
                lines.append(f"{a.value:<{width}}  {prf.precision:6.3f}  {prf.recall:6.3f}  {prf.f1:6.3f}  {prf.support:7d}")
        return "\n".join(lines)


def _exact_prf(tp: int, fp: int, fn: int) -> tuple[Fraction, Fraction, Fraction]:
    zero = Fraction(0)
    p = Fraction(tp, tp + fp) if tp + fp else zero
    r = Fraction(tp, tp + fn) if tp + fn else zero
    f = Fraction(2 * tp, 2 * tp + fp + fn) if tp else zero
    return p, r, f


def astuple_prf(prf: PRF) -> tuple[float, float, float]:
    return prf.precision, prf.recall, prf.f1


def ce_metrics(predicted: Sequence[Mapping[AbnormalityId, bool]], reference: Sequence[Mapping[AbnormalityId, bool]]) -> MetricsTable:
    """Per-abnormality, micro- and macro-averaged precision/recall/F1."""
    if len(predicted) != len(reference):
        raise LengthMismatch(f"{len(predicted)} predicted vs {len(reference)} reference label vectors")
    if not predicted:
        raise LengthMismatch("no label vectors to score")
    counts = {a: [0, 0, 0] for a in ABNORMALITIES}
    for pred, ref in zip(predicted, reference):
        for a in ABNORMALITIES:
            p, r = bool(pred[a]), bool(ref[a])
            if p and r:
                counts[a][0] += 1
            elif p:
                counts[a][1] += 1
            elif r:
                counts[a][2] += 1
    per = {a: PRF.from_counts(*c) for a, c in counts.items()}
    micro = PRF.from_counts(*(sum(c[i] for c in counts.values()) for i in range(3)))
    exact = [_exact_prf(*c) for c in counts.values()]
    macro = PRF(*(float(sum(e[i] for e in exact) / len(exact)) for i in range(3)), micro.support)
    return MetricsTable(per_abnormality=per, micro=micro, macro=macro, num_cases=len(predicted))


def evaluate_reports(
    finals: Sequence[Report], references: Sequence[Report], labeler: Labeler | None = None
) -> MetricsTable:
    if len(finals) != len(references):
        raise LengthMismatch("finals and references differ in length")
    if not finals:
        raise UnmatchedCase("nothing to evaluate")
    labeler = labeler or keyword_labeler()
    cand_texts = [serialize_report(r) for r in finals]
    ref_texts = [serialize_report(r) for r in references]
    table = ce_metrics([labeler.label(r) for r in finals], [labeler.label(r) for r in references])
    m = len(finals)
    table.bleu = {n: math.fsum(bleu_n(c, [r], n) for c, r in zip(cand_texts, ref_texts)) / m for n in (1, 2, 3, 4)}
    table.rouge_l = math.fsum(rouge_l(c, r) for c, r in zip(cand_texts, ref_texts)) / m
    return table


def evaluate(results: Iterable["CaseResult"], references: Iterable[CaseRecord], labeler: Labeler | None = None) -> MetricsTable:
    """Score final reports of successful results against their reference cases.

    Cases are paired by ``case_id`` and processed in sorted id order, so the
    outcome does not depend on input order.
    """
    by_id = {c.case_id: c for c in references}
    scored = []
    for result in results:
        if result.case_id not in by_id:
            raise UnmatchedCase(f"no reference for case {result.case_id!r}")
        if result.final is None:
            continue
        scored.append((result.case_id, result.final, by_id[result.case_id].report))
    if not scored:
        raise UnmatchedCase("no successful results to evaluate")
    scored.sort(key=lambda item: item[0])
    return evaluate_reports([s[1] for s in scored], [s[2] for s in scored], labeler)

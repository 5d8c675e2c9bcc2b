"""Exhaustive similarity retrieval over a case database.

Scores are cosine similarities computed with correctly rounded dot products
(elementwise products, then ``math.fsum``), so a score depends only on the two
vectors and never on summation order or vector position inside a matrix.
That keeps ties exact and makes rankings reproducible bit for bit.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import CaseDatabase, CaseRecord, as_vector, serialize_report
from .errors import DimensionMismatch, MissingFeature, UnknownCaseId, ZeroVector

DEFAULT_K = 3


class RetrievalParadigm(str, enum.Enum):
    IMAGE_TO_IMAGE = "image_to_image"
    IMAGE_TO_TEXT = "image_to_text"
    LOGITS_BASED = "logits_based"

    def __str__(self) -> str:
        return self.value

    @property
    def label(self) -> str:
        return _LABELS[self]

    @property
    def probe_feature(self) -> str:
        return "logits" if self is RetrievalParadigm.LOGITS_BASED else "image_embedding"

    @property
    def candidate_feature(self) -> str:
        return {
            RetrievalParadigm.IMAGE_TO_IMAGE: "image_embedding",
            RetrievalParadigm.IMAGE_TO_TEXT: "text_embedding",
            RetrievalParadigm.LOGITS_BASED: "logits",
        }[self]

    @classmethod
    def parse(cls, value: "str | RetrievalParadigm") -> "RetrievalParadigm":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"i2i": cls.IMAGE_TO_IMAGE, "i2t": cls.IMAGE_TO_TEXT, "logits": cls.LOGITS_BASED}
        if key in aliases:
            return aliases[key]
        for member in cls:
            if key in (member.value, member.label.lower()):
                return member
        raise ValueError(f"unknown retrieval paradigm {value!r}")


_LABELS = {
    RetrievalParadigm.IMAGE_TO_IMAGE: "ImageToImage",
    RetrievalParadigm.IMAGE_TO_TEXT: "ImageToText",
    RetrievalParadigm.LOGITS_BASED: "LogitsBased",
}

PARADIGMS: tuple[RetrievalParadigm, ...] = tuple(RetrievalParadigm)


@dataclass(frozen=True)
class Neighbor:
    case_id: str
    score: float
    paradigm: RetrievalParadigm


@dataclass(frozen=True)
class RetrievedEvidence:
    per_paradigm: tuple[tuple[RetrievalParadigm, tuple[tuple[str, str], ...]], ...]
    rendered: str

    def entries(self) -> list[tuple[RetrievalParadigm, int, str, str]]:
        return [
            (paradigm, rank, case_id, text)
            for paradigm, items in self.per_paradigm
            for rank, (case_id, text) in enumerate(items, start=1)
        ]


def _rescale(vec: np.ndarray) -> np.ndarray:
    """Scale by a power of two so the largest entry lies in [0.5, 1).

    Exact in binary floating point, and it keeps squares and products from
    underflowing or overflowing; cosine does not depend on the scale.
    """
    peak = float(np.max(np.abs(vec))) if vec.size else 0.0
    if peak == 0.0:
        return vec
    return np.ldexp(vec, -math.frexp(peak)[1])


def _norm(vec: np.ndarray) -> float:
    return math.sqrt(math.fsum((vec * vec).tolist()))


def _finish(dot: float, norm_a: float, norm_b: float) -> float:
    return min(1.0, max(-1.0, dot / (norm_a * norm_b)))


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity of two equal-length, nonzero vectors, clamped to [-1, 1]."""
    a = _rescale(as_vector(a, "a"))
    b = _rescale(as_vector(b, "b"))
    if a.size != b.size:
        raise DimensionMismatch(f"vector lengths differ: {a.size} vs {b.size}")
    na, nb = _norm(a), _norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for an all-zero vector")
    return _finish(math.fsum((a * b).tolist()), na, nb)


class _FlatIndex:
    """Candidate vectors for one paradigm, with precomputed norms."""

    def __init__(self, ids: list[str], matrix: np.ndarray):
        self.ids = ids
        self.matrix = np.vstack([_rescale(row) for row in matrix]) if len(ids) else matrix
        self.norms = [_norm(row) for row in self.matrix]

    def search(self, probe: np.ndarray, k: int, exclude: str | None) -> list[tuple[str, float]]:
        if probe.size != self.matrix.shape[1]:
            raise DimensionMismatch(
                f"probe has dimension {probe.size}, index has {self.matrix.shape[1]}"
            )
        probe = _rescale(probe)
        probe_norm = _norm(probe)
        if probe_norm == 0.0:
            raise ZeroVector("probe vector is all zeros")
        products = self.matrix * probe
        scored = []
        for case_id, row, norm in zip(self.ids, products, self.norms):
            if case_id == exclude or norm == 0.0:
                continue
            scored.append((case_id, _finish(math.fsum(row.tolist()), probe_norm, norm)))
        scored.sort(key=lambda item: (-item[1], item[0]))
        return scored[:k]


def _build_index(db: CaseDatabase, paradigm: RetrievalParadigm) -> _FlatIndex:
    attr = paradigm.candidate_feature
    ids = []
    rows = []
    for case in db:
        vec = getattr(case, attr)
        if vec is None:
            continue
        ids.append(case.case_id)
        rows.append(vec)
    if not rows:
        return _FlatIndex([], np.zeros((0, 0)))
    return _FlatIndex(ids, np.vstack(rows))


def _probe_vector(probe: CaseRecord, paradigm: RetrievalParadigm) -> np.ndarray:
    vec = getattr(probe, paradigm.probe_feature)
    if vec is None:
        raise MissingFeature(
            f"case {probe.case_id!r} has no {paradigm.probe_feature} needed for {paradigm.label} retrieval"
        )
    return vec


def _check_paradigm_dims(db: CaseDatabase, paradigm: RetrievalParadigm) -> None:
    if paradigm is RetrievalParadigm.IMAGE_TO_TEXT and None not in (db.d_img, db.d_txt):
        if db.d_img != db.d_txt:
            raise DimensionMismatch(
                f"image-to-text retrieval needs a shared embedding space (d_img={db.d_img}, d_txt={db.d_txt})"
            )


class CaseRetriever(BaseEstimator):
    """Top-k case retrieval for the image-to-image, image-to-text and logits paradigms.

    Parameters
    ----------
    k : int
        Neighbours returned per paradigm.
    paradigms : sequence of str or RetrievalParadigm, optional
        Paradigms served by :meth:`retrieve`; all three when omitted.
    """

    def __init__(self, k: int = DEFAULT_K, paradigms: Sequence[str] | None = None):
        self.k = k
        self.paradigms = paradigms

    def _paradigms(self) -> tuple[RetrievalParadigm, ...]:
        if self.paradigms is None:
            return PARADIGMS
        chosen = {RetrievalParadigm.parse(p) for p in self.paradigms}
        return tuple(p for p in PARADIGMS if p in chosen)

    def fit(self, db: CaseDatabase, y=None) -> "CaseRetriever":
        if not isinstance(self.k, int) or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k!r}")
        self.database_ = db
        self.indexes_ = {p: _build_index(db, p) for p in PARADIGMS}
        return self

    def kneighbors(
        self, probe: CaseRecord, paradigm: str | RetrievalParadigm, k: int | None = None
    ) -> list[Neighbor]:
        check_is_fitted(self, "indexes_")
        paradigm = RetrievalParadigm.parse(paradigm)
        k = self.k if k is None else k
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        index = self.indexes_[paradigm]
        if not index.ids:
            return []
        _check_paradigm_dims(self.database_, paradigm)
        vec = _probe_vector(probe, paradigm)
        hits = index.search(vec, k, exclude=probe.case_id)
        return [Neighbor(cid, score, paradigm) for cid, score in hits]

    def retrieve(self, probe: CaseRecord) -> dict[RetrievalParadigm, list[Neighbor]]:
        return {p: self.kneighbors(probe, p) for p in self._paradigms()}

    def evidence(self, probe: CaseRecord) -> RetrievedEvidence:
        check_is_fitted(self, "indexes_")
        return assemble_evidence(self.retrieve(probe), self.database_, self.k)


def query(
    db: CaseDatabase, probe: CaseRecord, paradigm: str | RetrievalParadigm, k: int = DEFAULT_K
) -> list[Neighbor]:
    """One-shot top-k search; builds a throwaway index over ``db``."""
    return CaseRetriever(k=k).fit(db).kneighbors(probe, paradigm)


def render_evidence(per_paradigm: Iterable[tuple[RetrievalParadigm, Sequence[tuple[str, str]]]]) -> str:
    lines = []
    for paradigm, items in per_paradigm:
        for rank, (_, text) in enumerate(items, start=1):
            lines.append(f"[{paradigm.label}#{rank}] {text}")
    return "\n".join(lines)


def assemble_evidence(
    neighbors_by_paradigm: Mapping[RetrievalParadigm, Sequence[Neighbor]],
    db: CaseDatabase,
    k: int = DEFAULT_K,
) -> RetrievedEvidence:
    """Collect reports for the retrieved neighbours in fixed paradigm order."""
    given = {RetrievalParadigm.parse(p): list(v) for p, v in neighbors_by_paradigm.items()}
    per_paradigm = []
    for paradigm in PARADIGMS:
        if paradigm not in given:
            continue
        items = []
        for neighbor in given[paradigm][:k]:
            if neighbor.case_id not in db:
                raise UnknownCaseId(f"retrieved case {neighbor.case_id!r} is not in the database")
            items.append((neighbor.case_id, serialize_report(db.get(neighbor.case_id).report)))
        per_paradigm.append((paradigm, tuple(items)))
    per_paradigm = tuple(per_paradigm)
    return RetrievedEvidence(per_paradigm=per_paradigm, rendered=render_evidence(per_paradigm))


def subset_evidence(evidence: RetrievedEvidence, paradigms: Iterable[RetrievalParadigm]) -> RetrievedEvidence:
    wanted = set(paradigms)
    kept = tuple((p, items) for p, items in evidence.per_paradigm if p in wanted)
    return RetrievedEvidence(per_paradigm=kept, rendered=render_evidence(kept))

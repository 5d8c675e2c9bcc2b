"""Domain types, taxonomies, canonical report text and dataset ingestion."""

from __future__ import annotations

import enum
import json
import re
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DimensionMismatch, MalformedReport, SchemaError


class RegionId(str, enum.Enum):
    """The ten anatomical regions a report is organised by, in canonical order."""

    ABDOMEN = "abdomen"
    BONE = "bone"
    BREAST = "breast"
    HEART = "heart"
    ESOPHAGUS = "esophagus"
    LUNG = "lung"
    MEDIASTINUM = "mediastinum"
    PLEURA = "pleura"
    THYROID = "thyroid"
    TRACHEA_BRONCHI = "trachea/bronchi"

    def __str__(self) -> str:
        return self.value


class AbnormalityId(str, enum.Enum):
    """The eighteen labelled clinical abnormalities; order fixes logits indexing."""

    ARTERIAL_WALL_CALCIFICATION = "arterial wall calcification"
    ATELECTASIS = "atelectasis"
    BRONCHIECTASIS = "bronchiectasis"
    CARDIOMEGALY = "cardiomegaly"
    CONSOLIDATION = "consolidation"
    CORONARY_ARTERY_WALL_CALCIFICATION = "coronary artery wall calcification"
    EMPHYSEMA = "emphysema"
    HIATAL_HERNIA = "hiatal hernia"
    INTERLOBULAR_SEPTAL_THICKENING = "interlobular septal thickening"
    LUNG_NODULE = "lung nodule"
    LUNG_OPACITY = "lung opacity"
    LYMPHADENOPATHY = "lymphadenopathy"
    MEDICAL_MATERIAL = "medical material"
    MOSAIC_ATTENUATION_PATTERN = "mosaic attenuation pattern"
    PERIBRONCHIAL_THICKENING = "peribronchial thickening"
    PERICARDIAL_EFFUSION = "pericardial effusion"
    PLEURAL_EFFUSION = "pleural effusion"
    PULMONARY_FIBROTIC_SEQUELA = "pulmonary fibrotic sequela"

    def __str__(self) -> str:
        return self.value


REGIONS: tuple[RegionId, ...] = tuple(RegionId)
ABNORMALITIES: tuple[AbnormalityId, ...] = tuple(AbnormalityId)
NUM_ABNORMALITIES = len(ABNORMALITIES)

_REGION_BY_NAME = {r.value: r for r in RegionId}


def region_from_name(name: str) -> RegionId:
    try:
        return _REGION_BY_NAME[name.strip().lower()]
    except KeyError:
        raise MalformedReport(f"unknown region name {name!r}") from None


class Report(Mapping[RegionId, str]):
    """Immutable region -> text mapping, always iterated in canonical region order.

    Accepts region names or ``RegionId`` members as keys. Section text is
    stripped and must be nonempty.
    """

    __slots__ = ("_sections",)

    def __init__(self, sections: Mapping[Any, str] | Iterable[tuple[Any, str]] = ()):
        items = sections.items() if isinstance(sections, Mapping) else sections
        found: dict[RegionId, str] = {}
        for key, text in items:
            region = key if isinstance(key, RegionId) else region_from_name(str(key))
            if region in found:
                raise MalformedReport(f"duplicate region {region.value!r}")
            if not isinstance(text, str):
                raise MalformedReport(f"section {region.value!r} is not text")
            text = text.strip()
            if not text:
                raise MalformedReport(f"section {region.value!r} is empty")
            found[region] = text
        self._sections = tuple((r, found[r]) for r in REGIONS if r in found)

    def __getitem__(self, key: Any) -> str:
        region = key if isinstance(key, RegionId) else region_from_name(str(key))
        for r, text in self._sections:
            if r is region:
                return text
        raise KeyError(key)

    def __iter__(self) -> Iterator[RegionId]:
        return (r for r, _ in self._sections)

    def __len__(self) -> int:
        return len(self._sections)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Report):
            return self._sections == other._sections
        if isinstance(other, Mapping):
            try:
                return self == Report(other)
            except MalformedReport:
                return False
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._sections)

    def __repr__(self) -> str:
        inner = ", ".join(f"{r.value!r}: {t!r}" for r, t in self._sections)
        return f"Report({{{inner}}})"

    def to_dict(self) -> dict[str, str]:
        return {r.value: t for r, t in self._sections}

    def text(self) -> str:
        """Section texts joined without region labels (used for labelling)."""
        return " ".join(t for _, t in self._sections)


def serialize_report(report: Report) -> str:
    """Render ``report`` as ``The region <k> is <name>: <text>`` segments.

    ``k`` is positional over the regions present, starting at 0.
    """
    return " ".join(
        f"The region {k} is {region.value}: {text}"
        for k, (region, text) in enumerate(report.items())
    )


_SECTION_HEAD = re.compile(r"The region\s+(\d+)\s+is\s+([A-Za-z/ ]+?)\s*:", re.IGNORECASE)


def parse_report(text: str) -> Report:
    """Inverse of :func:`serialize_report`.

    Region numbering in the input is not checked (models renumber freely);
    region names must belong to the taxonomy and may not repeat.
    """
    text = text.strip()
    if not text:
        return Report()
    heads = list(_SECTION_HEAD.finditer(text))
    if not heads or heads[0].start() != 0:
        raise MalformedReport(f"report does not start with a region header: {text[:60]!r}")
    sections: list[tuple[RegionId, str]] = []
    for i, head in enumerate(heads):
        end = heads[i + 1].start() if i + 1 < len(heads) else len(text)
        region = region_from_name(head.group(2))
        sections.append((region, text[head.end():end]))
    return Report(sections)


def as_vector(values: Any, name: str = "vector", dim: int | None = None) -> np.ndarray:
    """Validate ``values`` as a finite 1-d float64 array, optionally of length ``dim``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionMismatch(f"{name} is empty")
    if dim is not None and arr.size != dim:
        raise DimensionMismatch(f"{name} has length {arr.size}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """One study: reference report plus its precomputed features.

    Feature vectors are optional so that a case can still be drafted and
    evaluated when, say, its logits were never computed; retrieval over a
    missing feature raises ``MissingFeature``.
    """

    case_id: str
    report: Report
    image_embedding: np.ndarray | None = None
    text_embedding: np.ndarray | None = None
    logits: np.ndarray | None = None
    draft: Report | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.case_id, str) or not self.case_id:
            raise ValueError("case_id must be a nonempty string")
        for name in ("image_embedding", "text_embedding"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, as_vector(value, name))
        if self.logits is not None:
            object.__setattr__(self, "logits", as_vector(self.logits, "logits", NUM_ABNORMALITIES))

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"case_id": self.case_id, "report": self.report.to_dict()}
        for name in ("image_embedding", "text_embedding", "logits"):
            value = getattr(self, name)
            if value is not None:
                out[name] = [float(v) for v in value]
        if self.draft is not None:
            out["draft"] = self.draft.to_dict()
        return out


@dataclass(frozen=True, eq=False)
class CaseDatabase:
    cases: tuple[CaseRecord, ...] = ()
    d_img: int | None = None
    d_txt: int | None = None
    provenance: str = ""
    _index: dict[str, CaseRecord] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cases", tuple(self.cases))
        index: dict[str, CaseRecord] = {}
        d_img, d_txt = self.d_img, self.d_txt
        for case in self.cases:
            if case.case_id in index:
                raise ValueError(f"duplicate case_id {case.case_id!r}")
            index[case.case_id] = case
            d_img = _check_dim(d_img, case.image_embedding, "image_embedding", case.case_id)
            d_txt = _check_dim(d_txt, case.text_embedding, "text_embedding", case.case_id)
        object.__setattr__(self, "d_img", d_img)
        object.__setattr__(self, "d_txt", d_txt)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self) -> Iterator[CaseRecord]:
        return iter(self.cases)

    def __contains__(self, case_id: object) -> bool:
        return case_id in self._index

    def get(self, case_id: str) -> CaseRecord:
        return self._index[case_id]

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]


def _check_dim(expected: int | None, vec: np.ndarray | None, name: str, case_id: str) -> int | None:
    if vec is None:
        return expected
    if expected is not None and vec.size != expected:
        raise DimensionMismatch(f"case {case_id!r}: {name} has dimension {vec.size}, expected {expected}")
    return vec.size


def _record_from_json(obj: Any, lineno: int) -> CaseRecord:
    if not isinstance(obj, dict):
        raise SchemaError("expected a JSON object", line=lineno)
    case_id = obj.get("case_id")
    if not isinstance(case_id, str) or not case_id:
        raise SchemaError("must be a nonempty string", line=lineno, field="case_id")

    def report_field(key: str, required: bool) -> Report | None:
        raw = obj.get(key)
        if raw is None:
            if required:
                raise SchemaError("missing", line=lineno, field=key)
            return None
        if not isinstance(raw, dict):
            raise SchemaError("must map region name to text", line=lineno, field=key)
        try:
            return Report(raw)
        except MalformedReport as exc:
            raise SchemaError(str(exc), line=lineno, field=key) from None

    def vector_field(key: str, dim: int | None) -> np.ndarray | None:
        raw = obj.get(key)
        if raw is None:
            return None
        if not isinstance(raw, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
        ):
            raise SchemaError("must be an array of numbers", line=lineno, field=key)
        if dim is not None and len(raw) != dim:
            raise SchemaError(f"must have exactly {dim} elements, got {len(raw)}", line=lineno, field=key)
        try:
            return as_vector(raw, key)
        except (DimensionMismatch, ValueError) as exc:
            raise SchemaError(str(exc), line=lineno, field=key) from None

    return CaseRecord(
        case_id=case_id,
        report=report_field("report", required=True),
        image_embedding=vector_field("image_embedding", None),
        text_embedding=vector_field("text_embedding", None),
        logits=vector_field("logits", NUM_ABNORMALITIES),
        draft=report_field("draft", required=False),
    )


def load_database(path: str | Path) -> CaseDatabase:
    """Read a JSON Lines case file; blank lines are skipped.

    Raises ``OSError`` when unreadable, ``SchemaError`` naming the line and
    field for bad records, ``DimensionMismatch`` when embedding widths differ
    between records.
    """
    path = Path(path)
    cases: list[CaseRecord] = []
    seen: set[str] = set()
    d_img = d_txt = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON ({exc.msg})", line=lineno) from None
            record = _record_from_json(obj, lineno)
            if record.case_id in seen:
                raise SchemaError(f"duplicate case_id {record.case_id!r}", line=lineno, field="case_id")
            seen.add(record.case_id)
            try:
                d_img = _check_dim(d_img, record.image_embedding, "image_embedding", record.case_id)
                d_txt = _check_dim(d_txt, record.text_embedding, "text_embedding", record.case_id)
            except DimensionMismatch as exc:
                raise DimensionMismatch(f"line {lineno}: {exc}") from None
            cases.append(record)
    return CaseDatabase(tuple(cases), d_img=d_img, d_txt=d_txt, provenance=f"jsonl:{path}")


def write_database(db: CaseDatabase | Iterable[CaseRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for case in db:
            fh.write(json.dumps(case.to_json(), ensure_ascii=False) + "\n")

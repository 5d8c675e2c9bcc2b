"""Prompt templates with ``{{name}}`` placeholders."""

from __future__ import annotations

import re
from collections.abc import Mapping
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..errors import MissingBinding, UnknownBinding

PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")

TEMPLATE_IDS = (
    "resident_draft",
    "fellow_revision",
    "attending_synthesis",
    "fellow_stance",
    "attending_adjudication",
)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_bindings: frozenset[str]

    @classmethod
    def from_text(cls, template_id: str, body: str) -> "PromptTemplate":
        return cls(template_id, body, frozenset(PLACEHOLDER.findall(body)))

    def __post_init__(self) -> None:
        found = frozenset(PLACEHOLDER.findall(self.body))
        if found != frozenset(self.required_bindings):
            raise ValueError(
                f"template {self.template_id!r}: placeholders {sorted(found)} "
                f"do not match required bindings {sorted(self.required_bindings)}"
            )


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute every placeholder in one pass.

    Substitution is single-pass, so binding values that themselves contain
    ``{{...}}`` are inserted literally.
    """
    missing = template.required_bindings - bindings.keys()
    if missing:
        raise MissingBinding(f"template {template.template_id!r} is missing {sorted(missing)}")
    extra = bindings.keys() - template.required_bindings
    if extra:
        raise UnknownBinding(f"template {template.template_id!r} does not use {sorted(extra)}")
    return PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), template.body)


def load_template(template_id: str, override_dir: str | Path | None = None) -> PromptTemplate:
    if override_dir is not None:
        candidate = Path(override_dir) / f"{template_id}.txt"
        if candidate.exists():
            return PromptTemplate.from_text(template_id, candidate.read_text(encoding="utf-8"))
    body = resources.files("march.agents").joinpath("templates", f"{template_id}.txt").read_text(encoding="utf-8")
    return PromptTemplate.from_text(template_id, body)


def load_templates(override_dir: str | Path | None = None) -> dict[str, PromptTemplate]:
    return {tid: load_template(tid, override_dir) for tid in TEMPLATE_IDS}

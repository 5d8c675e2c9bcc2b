from .backends import (
    API_KEY_ENV,
    AgentBackend,
    AgentRole,
    CallableBackend,
    Exchange,
    FixtureBackend,
    RemoteBackend,
    ScriptedBackend,
    invoke_with_repair,
    remote_backend,
    scripted_backend,
)
from .parsing import (
    Action,
    Answer,
    AttendingDecision,
    Stance,
    Synthesis,
    extract_json_object,
    parse_attending_decision,
    parse_attending_synthesis,
    parse_fellow_revision,
    parse_fellow_stance,
    parse_resident_draft,
)
from .prompts import TEMPLATE_IDS, PromptTemplate, load_template, load_templates, render_prompt

__all__ = [
    "API_KEY_ENV",
    "Action",
    "AgentBackend",
    "AgentRole",
    "Answer",
    "AttendingDecision",
    "CallableBackend",
    "Exchange",
    "FixtureBackend",
    "PromptTemplate",
    "RemoteBackend",
    "ScriptedBackend",
    "Stance",
    "Synthesis",
    "TEMPLATE_IDS",
    "extract_json_object",
    "invoke_with_repair",
    "load_template",
    "load_templates",
    "parse_attending_decision",
    "parse_attending_synthesis",
    "parse_fellow_revision",
    "parse_fellow_stance",
    "parse_resident_draft",
    "remote_backend",
    "render_prompt",
    "scripted_backend",
]

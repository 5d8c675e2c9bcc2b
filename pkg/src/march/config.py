"""YAML run configuration and the backend factories it describes.

Example::

    mode: full              # resident_only | sr_sa | sr_ma | mr_ma | full
    fellows: 3
    max_rounds: 3
    k: 3
    paradigms: [image_to_image, image_to_text, logits_based]
    parallelism: 4
    transcript_dir: out/transcripts
    backends:
      fellow:    {type: remote, endpoint: "https://api.example.com/v1", model: gpt-4.1}
      attending: {type: remote, endpoint: "https://api.example.com/v1", model: gpt-4o}
      resident:  {type: scripted, script: scripts.json}

Relative paths are resolved against the config file's directory.

Scripted backends read a JSON script::

    {"cases": {"<case_id>" | "*": {"resident": [...], "fellows": [[...], ...], "attending": [...]}},
     "by_fellow_count": {"5": {"cases": {...}}}}

Entries under ``by_fellow_count`` win over the top-level ``cases`` for runs
with that many fellows; fellow ``i`` uses ``fellows[i % len(fellows)]``.
Completions may be strings or JSON objects (serialised on load).
"""

from __future__ import annotations

import json
import os
import threading
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agents.backends import API_KEY_ENV, AgentBackend, AgentRole, RemoteBackend, ScriptedBackend
from .consensus import ConsensusConfig
from .errors import ConfigError
from .pipeline import PipelineConfig, PipelineMode
from .retrieval import DEFAULT_K, PARADIGMS, RetrievalParadigm

ROLE_KEYS = {AgentRole.RESIDENT: "resident", AgentRole.FELLOW: "fellows", AgentRole.ATTENDING: "attending"}


def _completion(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)


class ScriptBook:
    """Per-case, per-role scripted completions loaded from a JSON script."""

    def __init__(self, data: Mapping[str, Any]):
        self.data = data

    @classmethod
    def load(cls, path: str | Path) -> "ScriptBook":
        try:
            return cls(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read script {path}: {exc}") from exc

    def _entries(self, case_id: str, n: int) -> list[Mapping[str, Any]]:
        layers = []
        override = (self.data.get("by_fellow_count") or {}).get(str(n))
        if override:
            layers.append(override.get("cases", {}))
        layers.append(self.data.get("cases", {}))
        return [layer[key] for layer in layers for key in (case_id, "*") if key in layer]

    def completions(self, role: AgentRole, index: int, case_id: str, n: int) -> list[str]:
        key = ROLE_KEYS.get(role)
        for entry in self._entries(case_id, n):
            if key not in entry:
                continue
            if role is AgentRole.FELLOW:
                lanes = entry[key]
                if not lanes:
                    continue
                return [_completion(c) for c in lanes[index % len(lanes)]]
            return [_completion(c) for c in entry[key]]
        raise ConfigError(f"script has no {role.value} completions for case {case_id!r} (fellows={n})")


def agent_name(role: AgentRole, index: int) -> str:
    return f"fellow-{index + 1}" if role is AgentRole.FELLOW else role.value


@dataclass
class ConfiguredBackends:
    """Backend factory built from the ``backends`` section of a config."""

    specs: dict[AgentRole, dict[str, Any]]
    base_dir: Path = Path(".")
    api_key: str | None = None
    _scripts: dict[str, ScriptBook] = field(default_factory=dict, repr=False)
    _remotes: dict[tuple[AgentRole, int], RemoteBackend] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def spec(self, role: AgentRole) -> dict[str, Any] | None:
        return self.specs.get(role)

    def uses_remote(self) -> bool:
        return any(s.get("type") == "remote" for s in self.specs.values())

    def _script(self, path: str) -> ScriptBook:
        with self._lock:
            if path not in self._scripts:
                self._scripts[path] = ScriptBook.load(self.base_dir / path)
            return self._scripts[path]

    def __call__(self, role: AgentRole, index: int, case_id: str, num_fellows: int) -> AgentBackend:
        spec = self.specs.get(role)
        if spec is None:
            raise ConfigError(f"no backend configured for role {role.value!r}")
        kind = spec.get("type")
        name = agent_name(role, index)
        if kind == "scripted":
            book = self._script(spec["script"])
            return ScriptedBackend(book.completions(role, index, case_id, num_fellows), name=name, role=role)
        if kind == "remote":
            with self._lock:
                key = (role, index)
                if key not in self._remotes:
                    self._remotes[key] = RemoteBackend(
                        endpoint=spec["endpoint"],
                        model_name=spec["model"],
                        api_key=self.api_key,
                        temperature=float(spec.get("temperature", 0.0)),
                        timeout=float(spec.get("timeout", 60.0)),
                        max_retries=int(spec.get("max_retries", 4)),
                        name=name,
                        role=role,
                    )
                return self._remotes[key]
        raise ConfigError(f"unknown backend type {kind!r} for role {role.value!r}")


@dataclass
class RunSettings:
    pipeline: PipelineConfig
    parallelism: int = 1
    strict: bool = False
    eval_db: Path | None = None
    train_db: Path | None = None
    backends: ConfiguredBackends | None = None


def _path(base: Path, value: Any) -> Path | None:
    if value in (None, ""):
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _paradigms(value: Any) -> tuple[RetrievalParadigm, ...]:
    if value is None:
        return PARADIGMS
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    try:
        chosen = {RetrievalParadigm.parse(v) for v in value}
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return tuple(p for p in PARADIGMS if p in chosen)


def settings_from_dict(
    raw: Mapping[str, Any],
    base_dir: Path = Path("."),
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunSettings:
    """Build run settings; ``overrides`` (e.g. CLI flags) win over ``raw`` when not None."""
    merged = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    env = os.environ if env is None else env

    known = {
        "mode", "fellows", "max_rounds", "k", "paradigms", "parallelism", "strict", "transcript_dir",
        "templates", "unanimity_short_circuit", "degraded_mode", "max_repairs", "backends", "data",
    }
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    try:
        mode = PipelineMode.parse(merged.get("mode", "full"))
        consensus = ConsensusConfig(
            num_fellows=int(merged.get("fellows", 3)),
            max_rounds=int(merged.get("max_rounds", 3)),
            unanimity_short_circuit=bool(merged.get("unanimity_short_circuit", True)),
            degraded_mode=bool(merged.get("degraded_mode", False)),
            max_repairs=int(merged.get("max_repairs", 1)),
        )
        k = int(merged.get("k", DEFAULT_K))
        parallelism = int(merged.get("parallelism", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if k < 1 or parallelism < 1:
        raise ConfigError("k and parallelism must be positive")

    specs: dict[AgentRole, dict[str, Any]] = {}
    for key, spec in (merged.get("backends") or {}).items():
        try:
            role = AgentRole(key.rstrip("s"))
        except ValueError:
            raise ConfigError(f"unknown backend role {key!r}") from None
        if not isinstance(spec, Mapping) or spec.get("type") not in ("remote", "scripted"):
            raise ConfigError(f"backend {key!r} needs type 'remote' or 'scripted'")
        if spec["type"] == "remote":
            missing = [f for f in ("endpoint", "model") if not spec.get(f)]
            if missing:
                raise ConfigError(f"remote backend {key!r} is missing {', '.join(missing)}")
        if spec["type"] == "scripted" and not spec.get("script"):
            raise ConfigError(f"scripted backend {key!r} needs a 'script' path")
        specs[role] = dict(spec)

    backends = ConfiguredBackends(specs, base_dir=base_dir, api_key=env.get(API_KEY_ENV) or None)
    if backends.uses_remote() and not backends.api_key:
        raise ConfigError(
            f"a remote backend is configured but {API_KEY_ENV} is not set; "
            f"export {API_KEY_ENV}=<your key> or switch the backend to type 'scripted'"
        )

    data = merged.get("data") or {}
    pipeline = PipelineConfig(
        mode=mode,
        consensus=consensus,
        retrieval_k=k,
        paradigms=_paradigms(merged.get("paradigms")),
        backends=backends if specs else None,
        transcript_dir=_path(base_dir, merged.get("transcript_dir")),
        template_dir=_path(base_dir, merged.get("templates")),
    )
    return RunSettings(
        pipeline=pipeline,
        parallelism=parallelism,
        strict=bool(merged.get("strict", False)),
        eval_db=_path(base_dir, data.get("eval")),
        train_db=_path(base_dir, data.get("train")),
        backends=backends,
    )


def load_settings(
    path: str | Path | None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunSettings:
    raw: Mapping[str, Any] = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ConfigError(f"config {path} must be a mapping at the top level")
        base = path.parent
    return settings_from_dict(raw, base, overrides, env)

"""Shared builders for tests: synthetic cases and canned agent completions."""

from __future__ import annotations

import json
import random
import time
from collections.abc import Sequence

import numpy as np

from march.agents import AgentRole, CallableBackend, ScriptedBackend
from march.core import CaseDatabase, CaseRecord, Report, serialize_report


def rep(**sections: str) -> Report:
    return Report({k.replace("trachea_bronchi", "trachea/bronchi"): v for k, v in sections.items()})


def revision(report: Report) -> str:
    return json.dumps({"report": serialize_report(report)})


def synthesis(report: Report, reasons: Sequence[str] = ("merged",)) -> str:
    return json.dumps({"report": serialize_report(report), "reasons": list(reasons)})


def stance(answer: str = "agree", confidence: int = 3, reason: str = "fine", evidences: Sequence[str] | None = None) -> str:
    if evidences is None:
        evidences = [] if answer == "agree" else ["[ImageToImage#1] evidence"]
    return json.dumps({"answer": answer, "confidence": confidence, "reason": reason, "evidences": list(evidences)})


def decision(action: str, report: Report, reasons: Sequence[str] = ("checked",), instructions: Sequence[str] = ()) -> str:
    return json.dumps(
        {"action": action, "report": serialize_report(report), "reasons": list(reasons), "instructions": list(instructions)}
    )


def random_case(rng: np.random.Generator, case_id: str, dim: int = 8, draft: Report | None = None, logits: bool = True) -> CaseRecord:
    return CaseRecord(
        case_id=case_id,
        report=rep(lung=f"Finding for {case_id}."),
        image_embedding=rng.normal(size=dim),
        text_embedding=rng.normal(size=dim),
        logits=rng.normal(size=18) if logits else None,
        draft=draft,
    )


def random_db(n: int, dim: int = 8, seed: int = 0, prefix: str = "c") -> CaseDatabase:
    rng = np.random.default_rng(seed)
    return CaseDatabase(tuple(random_case(rng, f"{prefix}{i:04d}", dim) for i in range(n)))


class RecordingFactory:
    """Backend factory handing out scripted agents and keeping them for call counting."""

    def __init__(self, fellows: Sequence[Sequence[str]], attending: Sequence[str], resident: Sequence[str] = ("unused",)):
        self.fellow_scripts = [list(f) for f in fellows]
        self.attending_script = list(attending)
        self.resident_script = list(resident)
        self.created: list[ScriptedBackend] = []

    def __call__(self, role: AgentRole, index: int, case_id: str, num_fellows: int) -> ScriptedBackend:
        if role is AgentRole.FELLOW:
            backend = ScriptedBackend(self.fellow_scripts[index % len(self.fellow_scripts)], name=f"fellow-{index + 1}", role=role)
        elif role is AgentRole.ATTENDING:
            backend = ScriptedBackend(self.attending_script, name="attending", role=role)
        else:
            backend = ScriptedBackend(self.resident_script, name="resident", role=role)
        self.created.append(backend)
        return backend

    def calls(self, role: AgentRole) -> int:
        return sum(b.calls for b in self.created if b.role is role)


REPORT_POOL = [
    Report({"lung": "Clear."}),
    Report({"lung": "Small nodule in the right upper lobe."}),
    Report({"lung": "Clear.", "pleura": "Small left pleural effusion."}),
    Report({"heart": "Cardiomegaly.", "lung": "Clear."}),
]


def random_agents(rng, num_fellows: int, garbage_rate: float = 0.1, delay: float = 0.0):
    """Adversarial callable agents; each gets its own generator seeded from ``rng``."""
    def fellow_fn(seed):
        local = random.Random(seed)

        def fn(prompt):
            if delay:
                time.sleep(local.random() * delay)
            roll = local.random()
            if roll < garbage_rate:
                return "I refuse to answer in JSON."
            if "Output format example:\n{\"report\"" in prompt:
                return revision(local.choice(REPORT_POOL))
            return stance("agree" if local.random() < 0.5 else "disagree", local.choice([1, 2, 3]))

        return fn

    def attending_fn(seed):
        local = random.Random(seed)

        def fn(prompt):
            if local.random() < garbage_rate:
                return "{broken"
            if '"reasons"' in prompt and '"action"' not in prompt:
                return synthesis(local.choice(REPORT_POOL))
            return decision(local.choice(["Yes", "No"]), local.choice(REPORT_POOL), instructions=["again"] * num_fellows)

        return fn

    fellows = [
        CallableBackend(fellow_fn(rng.randrange(2**32)), name=f"fellow-{i + 1}", role=AgentRole.FELLOW)
        for i in range(num_fellows)
    ]
    attending = CallableBackend(attending_fn(rng.randrange(2**32)), name="attending", role=AgentRole.ATTENDING)
    return attending, fellows

"""Agent backends: a chat-completions client, scripted and fixture agents, and repair-on-parse."""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any, TypeVar

import httpx

from ..core import Report, serialize_report
from ..errors import BackendError, ExhaustedRepairs, OutputParseError

logger = logging.getLogger(__name__)

T = TypeVar("T")

API_KEY_ENV = "MARCH_API_KEY"


class AgentRole(str, enum.Enum):
    RESIDENT = "resident"
    FELLOW = "fellow"
    ATTENDING = "attending"
    RETRIEVAL = "retrieval"


ROLE_PREAMBLES = {
    AgentRole.RESIDENT: "You are a radiology resident drafting a chest CT report region by region.",
    AgentRole.FELLOW: "You are a radiology fellow who checks reports against retrieved reference cases.",
    AgentRole.ATTENDING: "You are the attending radiologist who leads the case conference and signs the final report.",
    AgentRole.RETRIEVAL: "You retrieve similar prior cases.",
}


@dataclass(frozen=True)
class Exchange:
    """One prompt/completion pair as seen by a named agent."""

    agent: str
    prompt: str
    completion: str
    role: str = ""

    def to_json(self) -> dict[str, str]:
        return {"agent": self.agent, "role": self.role, "prompt": self.prompt, "completion": self.completion}


def estimate_tokens(text: str) -> int:
    return len(text.split())


class AgentBackend:
    """Base class. Subclasses implement ``_complete``; ``invoke`` adds accounting.

    Counters are updated under a lock so one backend can serve several
    fellows concurrently.
    """

    descriptor = "abstract"

    def __init__(self, name: str, role: AgentRole | str = AgentRole.FELLOW):
        self.name = name
        self.role = AgentRole(role)
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self._lock = threading.Lock()

    def invoke(self, prompt: str) -> str:
        completion, usage = self._complete(prompt)
        with self._lock:
            self.calls += 1
            self.prompt_tokens += usage.get("prompt_tokens", estimate_tokens(prompt))
            self.completion_tokens += usage.get("completion_tokens", estimate_tokens(completion))
        return completion

    def _complete(self, prompt: str) -> tuple[str, dict[str, int]]:
        raise NotImplementedError

    def usage(self) -> dict[str, int]:
        return {
            "calls": self.calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, role={self.role.value!r})"


class ScriptedBackend(AgentBackend):
    """Returns canned completions in order and records every prompt it receives."""

    descriptor = "scripted"

    def __init__(self, transcript: Sequence[str], name: str = "scripted", role: AgentRole | str = AgentRole.FELLOW):
        if not transcript:
            raise ValueError("a scripted backend needs at least one completion")
        super().__init__(name, role)
        self.transcript = list(transcript)
        self.prompts: list[str] = []
        self._cursor = 0
        self._script_lock = threading.Lock()

    def _complete(self, prompt: str) -> tuple[str, dict[str, int]]:
        with self._script_lock:
            self.prompts.append(prompt)
            if self._cursor >= len(self.transcript):
                raise BackendError("Exhausted", f"{self.name}: scripted transcript exhausted after {len(self.transcript)} completions")
            completion = self.transcript[self._cursor]
            self._cursor += 1
        return completion, {}

    @property
    def remaining(self) -> int:
        return len(self.transcript) - self._cursor


def scripted_backend(transcript: Sequence[str], name: str = "scripted", role: AgentRole | str = AgentRole.FELLOW) -> ScriptedBackend:
    return ScriptedBackend(transcript, name=name, role=role)


class CallableBackend(AgentBackend):
    """Wraps a plain ``prompt -> completion`` function."""

    descriptor = "callable"

    def __init__(self, fn: Callable[[str], str], name: str = "callable", role: AgentRole | str = AgentRole.FELLOW):
        super().__init__(name, role)
        self.fn = fn

    def _complete(self, prompt: str) -> tuple[str, dict[str, int]]:
        return self.fn(prompt), {}


class FixtureBackend(AgentBackend):
    """Serves a precomputed report, e.g. a dataset-supplied resident draft."""

    descriptor = "fixture"

    def __init__(self, report: Report, name: str = "resident", role: AgentRole | str = AgentRole.RESIDENT):
        super().__init__(name, role)
        self.report = report

    def _complete(self, prompt: str) -> tuple[str, dict[str, int]]:
        return json.dumps({"report": serialize_report(self.report)}), {"prompt_tokens": 0, "completion_tokens": 0}


class RemoteBackend(AgentBackend):
    """Client for any server speaking the chat-completions wire protocol.

    ``POST {endpoint}/chat/completions`` with a system message (the role
    preamble) and a single user message (the prompt). HTTP 429 is retried with
    exponential backoff, up to ``max_retries`` extra attempts.
    """

    descriptor = "remote"

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        api_key: str | None,
        temperature: float = 0.0,
        timeout: float = 60.0,
        name: str = "remote",
        role: AgentRole | str = AgentRole.FELLOW,
        max_retries: int = 4,
        backoff_base: float = 0.5,
        backoff_cap: float = 30.0,
        system_prompt: str | None = None,
    ):
        super().__init__(name, role)
        url = httpx.URL(endpoint)
        if url.scheme not in ("http", "https") or not url.host:
            raise ValueError(f"endpoint must be an http(s) URL, got {endpoint!r}")
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.system_prompt = system_prompt if system_prompt is not None else ROLE_PREAMBLES[self.role]
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def payload(self, prompt: str) -> dict[str, Any]:
        return {
            "model": self.model_name,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": prompt},
            ],
            "temperature": self.temperature,
        }

    def _delay(self, attempt: int, response: httpx.Response) -> float:
        retry_after = response.headers.get("Retry-After")
        if retry_after:
            try:
                return min(float(retry_after), self.backoff_cap)
            except ValueError:
                pass
        return min(self.backoff_base * (2**attempt), self.backoff_cap)

    def _complete(self, prompt: str) -> tuple[str, dict[str, int]]:
        url = f"{self.endpoint}/chat/completions"
        body = self.payload(prompt)
        for attempt in range(self.max_retries + 1):
            try:
                response = self._client.post(url, json=body)
            except httpx.TimeoutException as exc:
                raise BackendError("Timeout", f"{self.name}: no response within {self.timeout}s") from exc
            except httpx.TransportError as exc:
                raise BackendError("Transport", f"{self.name}: {exc}") from exc
            if response.status_code == 429:
                if attempt == self.max_retries:
                    raise BackendError("RateLimited", f"{self.name}: still rate limited after {attempt + 1} requests")
                delay = self._delay(attempt, response)
                logger.warning("%s rate limited, retrying in %.2fs", self.name, delay)
                time.sleep(delay)
                continue
            if not response.is_success:
                raise BackendError("BadStatus", f"{self.name}: HTTP {response.status_code}: {response.text[:200]}")
            return self._read_choice(response)
        raise AssertionError("unreachable")

    def _read_choice(self, response: httpx.Response) -> tuple[str, dict[str, int]]:
        try:
            data = response.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError("EmptyChoice", f"{self.name}: response has no usable choice") from exc
        if not isinstance(content, str) or not content.strip():
            raise BackendError("EmptyChoice", f"{self.name}: first choice is empty")
        usage = {}
        raw_usage = data.get("usage") or {}
        for key in ("prompt_tokens", "completion_tokens"):
            if isinstance(raw_usage.get(key), int):
                usage[key] = raw_usage[key]
        return content, usage


def remote_backend(
    endpoint: str,
    model_name: str,
    credentials: str | None,
    temperature: float = 0.0,
    timeout: float = 60.0,
    **kwargs: Any,
) -> RemoteBackend:
    return RemoteBackend(endpoint, model_name, credentials, temperature=temperature, timeout=timeout, **kwargs)


REPAIR_SUFFIX = (
    "\n\nYour previous answer could not be used: {problem}\n"
    "Reply again with a single JSON object in exactly the requested format and nothing else."
)


def invoke_with_repair(
    backend: AgentBackend,
    prompt: str,
    parser: Callable[[str], T],
    max_repairs: int = 1,
    exchanges: list[Exchange] | None = None,
) -> T:
    """Invoke ``backend`` and parse, re-asking up to ``max_repairs`` times on bad output.

    Every prompt/completion pair is appended to ``exchanges`` when given.
    ``BackendError`` propagates immediately; it is not a parse problem.
    """
    if max_repairs < 0:
        raise ValueError("max_repairs must be >= 0")
    log = exchanges if exchanges is not None else []
    start = len(log)
    current = prompt
    completion = ""
    for attempt in range(max_repairs + 1):
        completion = backend.invoke(current)
        log.append(Exchange(backend.name, current, completion, backend.role.value))
        try:
            return parser(completion)
        except OutputParseError as exc:
            logger.info("%s: unparseable output (attempt %d): %s", backend.name, attempt + 1, exc)
            current = prompt + REPAIR_SUFFIX.format(problem=exc)
    raise ExhaustedRepairs(
        f"{backend.name}: output still invalid after {max_repairs} repair attempt(s)",
        last_completion=completion,
        exchanges=log[start:],
    )

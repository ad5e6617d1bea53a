"""Completion backends: a deterministic scripted queue and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import json
import logging
import os
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Protocol, Union

import httpx

from .prompting import PromptMessages

logger = logging.getLogger(__name__)

SCRIPT_FORMAT_VERSION = 1


class RoleTag(str, Enum):
    BASE = "BASE"
    META = "META"
    TEACHER = "TEACHER"


class BackendKind(str, Enum):
    SCRIPTED = "SCRIPTED"
    HTTP = "HTTP"


class BackendError(RuntimeError):
    pass


class ScriptExhausted(BackendError):
    pass


class TransportError(BackendError):
    pass


class RemoteRejection(BackendError):
    def __init__(self, status_code: int, body: str = "") -> None:
        self.status_code = status_code
        super().__init__(f"endpoint rejected the request with status {status_code}: {body[:200]}")


class MalformedResponse(BackendError):
    pass


class ConcurrentScriptAccess(BackendError):
    """A scripted backend was called from two executions at once."""


@dataclass(frozen=True)
class Usage:
    prompt_units: int = 0
    completion_units: int = 0


@dataclass(frozen=True)
class Completion:
    text: str
    usage: Usage
    backend_id: str


class Backend(Protocol):
    backend_id: str

    def complete(self, role: RoleTag, prompt: PromptMessages) -> Completion: ...


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind = BackendKind.SCRIPTED
    endpoint_url: str = ""
    model_name: str = "scripted"
    api_key_env_var: str = "OPENAI_API_KEY"
    timeout: float = 30.0
    max_retries_transport: int = 2
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind is BackendKind.HTTP and not (self.endpoint_url and self.model_name):
            raise ValueError("an HTTP backend requires endpoint_url and model_name")
        if self.max_retries_transport < 0:
            raise ValueError("max_retries_transport must be >= 0")

    @property
    def backend_id(self) -> str:
        if self.kind is BackendKind.HTTP:
            return f"http:{self.model_name}"
        return f"scripted:{self.model_name}"


# --------------------------------------------------------------------------- #
# Scripted backend
# --------------------------------------------------------------------------- #

# A script entry is either a plain response string, a {"guided": ..., "unguided": ...}
# pair chosen by whether the prompt carries a meta-instruction, or {"raise": <error>}.
ScriptEntry = Union[str, Mapping[str, str]]

_RAISABLE = {
    "transport": TransportError,
    "rejection": lambda msg: RemoteRejection(500, msg),
    "malformed": MalformedResponse,
}


@dataclass
class ScriptedScript:
    queues: dict[RoleTag, list[ScriptEntry]]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScriptedScript":
        version = data.get("format_version", SCRIPT_FORMAT_VERSION)
        if version != SCRIPT_FORMAT_VERSION:
            raise ValueError(f"unsupported script format_version {version!r}")
        queues: dict[RoleTag, list[ScriptEntry]] = {}
        for role in RoleTag:
            entries = data.get(role.value, [])
            if not isinstance(entries, list):
                raise ValueError(f"script queue {role.value} must be a list")
            for e in entries:
                if not isinstance(e, (str, dict)):
                    raise ValueError(f"script entry {e!r} in {role.value} is neither text nor an object")
            queues[role] = list(entries)
        return cls(queues)

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedScript":
        """Load from a JSON file, or from a directory containing ``script.json``."""
        path = Path(path)
        if path.is_dir():
            path = path / "script.json"
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


class ScriptedBackend:
    """Pops one queued response per call, per role, in order."""

    def __init__(self, script: ScriptedScript | Mapping[str, Any], backend_id: str = "scripted") -> None:
        if not isinstance(script, ScriptedScript):
            script = ScriptedScript.from_dict(script)
        self.backend_id = backend_id
        self._queues = {role: deque(script.queues.get(role, [])) for role in RoleTag}
        self._lock = threading.Lock()
        self.calls: dict[RoleTag, int] = {role: 0 for role in RoleTag}

    def remaining(self, role: RoleTag) -> int:
        return len(self._queues[role])

    def complete(self, role: RoleTag, prompt: PromptMessages) -> Completion:
        if not self._lock.acquire(blocking=False):
            raise ConcurrentScriptAccess("a ScriptedBackend is owned by a single execution")
        try:
            queue = self._queues[RoleTag(role)]
            if not queue:
                raise ScriptExhausted(f"scripted {RoleTag(role).value} queue is exhausted")
            entry = queue.popleft()
            self.calls[RoleTag(role)] += 1
        finally:
            self._lock.release()

        if isinstance(entry, Mapping):
            if "raise" in entry:
                raise _RAISABLE.get(entry["raise"], BackendError)(f"scripted failure: {entry['raise']}")
            text = entry["guided"] if prompt.has_guidance() else entry["unguided"]
        else:
            text = entry
        usage = Usage(sum(len(m.content) for m in prompt.messages), len(text))
        return Completion(text, usage, self.backend_id)


# --------------------------------------------------------------------------- #
# HTTP backend
# --------------------------------------------------------------------------- #


class HttpBackend:
    """POSTs to ``{endpoint_url}/chat/completions``; safe for concurrent callers."""

    def __init__(self, config: BackendConfig, client: Optional[httpx.Client] = None) -> None:
        if config.kind is not BackendKind.HTTP:
            raise ValueError("HttpBackend needs an HTTP BackendConfig")
        self.config = config
        self.backend_id = config.backend_id
        self._client = client or httpx.Client(timeout=config.timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env_var)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, role: RoleTag, prompt: PromptMessages) -> Completion:
        url = self.config.endpoint_url.rstrip("/") + "/chat/completions"
        body = {"model": self.config.model_name, "messages": prompt.to_wire(), **self.config.extras}
        response = None
        for attempt in range(self.config.max_retries_transport + 1):
            try:
                response = self._client.post(url, json=body, headers=self._headers())
                break
            except httpx.TransportError as exc:
                logger.warning("transport error on %s (try %d): %s", url, attempt + 1, exc)
                if attempt == self.config.max_retries_transport:
                    raise TransportError(str(exc)) from exc
        if response.status_code >= 300:
            raise RemoteRejection(response.status_code, response.text)
        try:
            data = response.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response body: {response.text[:200]}") from exc
        if not isinstance(text, str):
            raise MalformedResponse("message content is not text")
        usage = data.get("usage") or {}
        return Completion(
            text,
            Usage(int(usage.get("prompt_tokens", 0) or 0), int(usage.get("completion_tokens", 0) or 0)),
            self.backend_id,
        )

    def close(self) -> None:
        self._client.close()


def make_backend(config: BackendConfig, script: Optional[ScriptedScript] = None) -> Backend:
    if config.kind is BackendKind.HTTP:
        return HttpBackend(config)
    if script is None:
        raise ValueError("a scripted backend needs a script")
    return ScriptedBackend(script, backend_id=config.backend_id)

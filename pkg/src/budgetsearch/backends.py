"""Completion backends: a live chat-completion HTTP client and a scripted test double."""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

import httpx

from .budget import TokenUsage

log = logging.getLogger(__name__)

API_KEY_ENV = "BCAS_API_KEY"


class BackendError(RuntimeError):
    """Base class for backend failures that end a trajectory as Failed(backend)."""


class BackendUnavailable(BackendError):
    pass


class ScriptError(AssertionError):
    """Scripted trace misuse. Indicates a broken test fixture, never a runtime condition."""


class TraceExhausted(ScriptError):
    pass


class PredicateMismatch(ScriptError):
    pass


class CorruptLog(ValueError):
    pass


class FinishReason(str, enum.Enum):
    STOP = "stop"
    LENGTH = "length"
    ERROR = "error"

    @classmethod
    def parse(cls, value: str | None) -> FinishReason:
        if value in (None, "", "stop", "end_turn", "eos"):
            return cls.STOP
        if value in ("length", "max_tokens"):
            return cls.LENGTH
        try:
            return cls(value)
        except ValueError:
            return cls.ERROR


@dataclass(frozen=True)
class ModelRequest:
    prompt: str
    max_completion_tokens: int
    temperature: float = 0.0
    seed: int | None = None
    session: str | None = None

    def __post_init__(self) -> None:
        if self.max_completion_tokens < 1:
            raise ValueError("max_completion_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    usage: TokenUsage = field(default_factory=TokenUsage)
    finish_reason: FinishReason = FinishReason.STOP
    retries: int = 0

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "usage": {"prompt_tokens": self.usage.prompt_tokens,
                      "completion_tokens": self.usage.completion_tokens},
            "finish_reason": self.finish_reason.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelResponse:
        usage = d.get("usage") or {}
        return cls(
            text=d["text"],
            usage=TokenUsage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
            finish_reason=FinishReason.parse(d.get("finish_reason")),
        )


class ModelBackend(Protocol):
    backend_id: str

    def complete(self, request: ModelRequest) -> ModelResponse: ...


# --------------------------------------------------------------------------- scripted


@dataclass(frozen=True)
class ScriptedStep:
    expect: str
    response: ModelResponse

    @classmethod
    def from_dict(cls, d: dict) -> ScriptedStep:
        if "response" in d:
            response = ModelResponse.from_dict(d["response"])
        else:
            response = ModelResponse(
                text=d["text"],
                usage=TokenUsage(int(d.get("prompt_tokens", 0)), int(d.get("completion_tokens", 0))),
                finish_reason=FinishReason.parse(d.get("finish_reason")),
            )
        return cls(expect=d.get("expect", ""), response=response)

    def to_dict(self) -> dict:
        return {"expect": self.expect, "response": self.response.to_dict()}


@dataclass(frozen=True)
class ScriptedTrace:
    steps: tuple[ScriptedStep, ...] = ()

    def __len__(self) -> int:
        return len(self.steps)

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> ScriptedTrace:
        return cls(tuple(ScriptedStep.from_dict(x) for x in items))


class ScriptedBackend:
    """Replays a fixed trace. One instance per trajectory; steps are consumed in order.

    Each step's ``expect`` string must occur in the prompt it answers.
    """

    def __init__(self, trace: ScriptedTrace | Iterable[ScriptedStep], backend_id: str = "scripted"):
        self.trace = trace if isinstance(trace, ScriptedTrace) else ScriptedTrace(tuple(trace))
        self.backend_id = backend_id
        self.prompts: list[str] = []
        self.requests: list[ModelRequest] = []
        self._cursor = 0
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return len(self.trace) - self._cursor

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            if self._cursor >= len(self.trace):
                raise TraceExhausted(
                    f"trace exhausted after {len(self.trace)} steps; unexpected prompt:\n{request.prompt}"
                )
            step = self.trace.steps[self._cursor]
            if step.expect and step.expect not in request.prompt:
                raise PredicateMismatch(
                    f"step {self._cursor} expected {step.expect!r} in prompt:\n{request.prompt}"
                )
            self._cursor += 1
            self.prompts.append(request.prompt)
            self.requests.append(request)
            return step.response


# --------------------------------------------------------------------------- live HTTP


class CallLog:
    """Thread-safe line-delimited JSON log of raw prompts and responses."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, request: ModelRequest, response: ModelResponse) -> None:
        entry = {
            "session": request.session,
            "prompt": request.prompt,
            "request": {"max_completion_tokens": request.max_completion_tokens,
                        "temperature": request.temperature, "seed": request.seed},
            "response": response.to_dict(),
        }
        line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")


_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class HttpBackend:
    """Generic chat-completion client (OpenAI-compatible request/response JSON)."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 120.0,
        call_log: CallLog | None = None,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.call_log = call_log
        self.backend_id = f"http:{model}"
        self._client = client or httpx.Client(timeout=timeout)

    def _payload(self, request: ModelRequest) -> dict:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_completion_tokens,
            "temperature": request.temperature,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def complete(self, request: ModelRequest) -> ModelResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = "no attempt made"
        for attempt in range(self.max_attempts):
            if attempt:
                delay = self.backoff_base * 2 ** (attempt - 1)
                log.warning("retrying %s in %.2fs (%s)", self.endpoint, delay, last_error)
                time.sleep(delay)
            try:
                resp = self._client.post(self.endpoint, json=self._payload(request), headers=headers)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
            result = self._parse(resp, retries=attempt)
            if self.call_log is not None:
                self.call_log.append(request, result)
            return result
        raise BackendUnavailable(f"{self.endpoint} failed after {self.max_attempts} attempts: {last_error}")

    def _parse(self, resp: httpx.Response, retries: int) -> ModelResponse:
        try:
            body = resp.json()
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            usage = body.get("usage") or {}
            return ModelResponse(
                text=text,
                usage=TokenUsage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))),
                finish_reason=FinishReason.parse(choice.get("finish_reason")),
                retries=retries,
            )
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed provider response: {exc}") from exc

    def close(self) -> None:
        self._client.close()


def record_replay(log_path: str | Path, session: str) -> ScriptedTrace:
    """Turn the logged calls of one session into a trace that reproduces them exactly."""
    steps = []
    path = Path(log_path)
    if not path.exists():
        return ScriptedTrace()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                if entry.get("session") != session:
                    continue
                steps.append(ScriptedStep(expect=entry["prompt"], response=ModelResponse.from_dict(entry["response"])))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise CorruptLog(f"{path}:{lineno}: {exc}") from exc
    return ScriptedTrace(tuple(steps))


def load_trace_file(path: str | Path) -> dict[str, dict[str, ScriptedTrace]]:
    """Load a scripts file: ``{"model": {sample_id: [steps]}, "judge": {sample_id: [steps]}}``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    out: dict[str, dict[str, ScriptedTrace]] = {}
    for role in ("model", "judge"):
        out[role] = {sid: ScriptedTrace.from_list(steps) for sid, steps in (raw.get(role) or {}).items()}
    return out

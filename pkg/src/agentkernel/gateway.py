"""Model gateway: a uniform completion interface plus a scripted backend.

Live model clients plug in behind :class:`ModelBackend`; the kernel itself
only ships :class:`ScriptedBackend`, which replays a fixed transcript and is
what every hermetic test drives.
"""

from __future__ import annotations

import copy
import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

from .errors import (
    ConcurrentConsumption,
    DuplicateBackend,
    KernelError,
    PredicateMismatch,
    TranscriptExhausted,
    UnknownBackend,
)

INHERIT = "inherit"


def estimate_tokens(text: str | bytes) -> int:
    """Return ``ceil(byte_length / 4)`` of the UTF-8 encoding of ``text``."""
    data = text.encode("utf-8") if isinstance(text, str) else text
    return math.ceil(len(data) / 4)


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"tool_name": self.tool_name, "args": copy.deepcopy(self.args)}


@dataclass(frozen=True)
class ToolSummary:
    name: str
    description: str
    parameters: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Turn:
    """One entry of the history shown to a model.

    ``kind`` is ``text`` (final or intermediate model text), ``tool_call``
    (a call together with its response), ``summary`` (compressed older
    history) or ``context`` (seeded memory such as a parent summary).
    """

    seq: int
    kind: str
    text: str | None = None
    tool_call: ToolCall | None = None
    response: Any = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seq": self.seq, "kind": self.kind}
        if self.text is not None:
            out["text"] = self.text
        if self.tool_call is not None:
            out["tool_call"] = self.tool_call.to_dict()
        if self.response is not None:
            out["response"] = self.response
        return out

    def render(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)


def render_history(history: list[Turn]) -> str:
    return "\n".join(turn.render() for turn in history)


@dataclass(frozen=True)
class ModelRequest:
    agent_id: Any
    system_instruction: str
    history: tuple[Turn, ...] = ()
    available_tools: tuple[ToolSummary, ...] = ()
    task: str = ""
    # opaque pass-through for sampling parameters; never interpreted here
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seqs = [t.seq for t in self.history]
        if any(b <= a for a, b in zip(seqs, seqs[1:])):
            raise ValueError("history turns must be strictly ordered by seq")

    def latest_text(self) -> str:
        """Text that scripted context predicates are matched against."""
        if self.history:
            return self.history[-1].render()
        return self.task

    def tool_names(self) -> list[str]:
        return [t.name for t in self.available_tools]


@dataclass(frozen=True)
class ModelResponse:
    kind: str
    text: str | None = None
    tool_call: ToolCall | None = None

    def __post_init__(self) -> None:
        if self.kind == "text":
            if self.text is None or self.tool_call is not None:
                raise ValueError("text response must carry text and no tool_call")
        elif self.kind == "tool_call":
            if self.tool_call is None or self.text is not None:
                raise ValueError("tool_call response must carry tool_call and no text")
        else:
            raise ValueError(f"unknown response kind {self.kind!r}")

    @classmethod
    def of_text(cls, text: str) -> ModelResponse:
        return cls(kind="text", text=text)

    @classmethod
    def of_call(cls, tool_name: str, args: dict[str, Any] | None = None) -> ModelResponse:
        return cls(kind="tool_call", tool_call=ToolCall(tool_name, dict(args or {})))

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> ModelResponse:
        kind = doc.get("kind")
        if kind == "text":
            return cls.of_text(str(doc["text"]))
        if kind == "tool_call":
            call = doc["tool_call"]
            return cls.of_call(str(call["tool_name"]), dict(call.get("args") or {}))
        raise ValueError(f"unknown response kind {kind!r}")

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "text":
            return {"kind": "text", "text": self.text}
        assert self.tool_call is not None
        return {"kind": "tool_call", "tool_call": self.tool_call.to_dict()}


@runtime_checkable
class ModelBackend(Protocol):
    def complete(self, request: ModelRequest) -> ModelResponse: ...


@dataclass(frozen=True)
class TranscriptStep:
    response: ModelResponse
    match: str | None = None


class ScriptedBackend:
    """Replays a transcript of responses, one step per ``complete`` call.

    Steps are consumed strictly in order. A step with ``match`` set only
    fires when that substring occurs in the request's latest turn. Every
    request received is kept in :attr:`requests` for inspection.
    """

    single_consumer = True

    def __init__(self, steps: list[TranscriptStep] | list[ModelResponse]) -> None:
        self._steps = [s if isinstance(s, TranscriptStep) else TranscriptStep(s) for s in steps]
        self._cursor = 0
        self._busy = threading.Lock()
        self.requests: list[ModelRequest] = []

    @classmethod
    def from_document(cls, doc: dict[str, Any]) -> ScriptedBackend:
        steps = []
        for raw in doc["steps"]:
            steps.append(TranscriptStep(ModelResponse.from_dict(raw["response"]), raw.get("match")))
        return cls(steps)

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedBackend:
        return cls.from_document(json.loads(Path(path).read_text(encoding="utf-8")))

    @property
    def remaining(self) -> int:
        return len(self._steps) - self._cursor

    def complete(self, request: ModelRequest) -> ModelResponse:
        if not self._busy.acquire(blocking=False):
            raise ConcurrentConsumption("scripted backend is already serving another run")
        try:
            if self._cursor >= len(self._steps):
                raise TranscriptExhausted(
                    f"transcript exhausted after {len(self._steps)} steps"
                )
            step = self._steps[self._cursor]
            if step.match is not None and step.match not in request.latest_text():
                raise PredicateMismatch(
                    f"step {self._cursor + 1} expects {step.match!r} in the latest turn"
                )
            self._cursor += 1
            self.requests.append(request)
            return copy.deepcopy(step.response)
        finally:
            self._busy.release()


class ModelGateway:
    """Registry of backends keyed by id."""

    def __init__(self) -> None:
        self._backends: dict[str, ModelBackend] = {}
        self._lock = threading.Lock()

    def register_backend(self, backend_id: str, backend: ModelBackend) -> None:
        if backend_id == INHERIT:
            raise DuplicateBackend(f"backend id {INHERIT!r} is reserved")
        with self._lock:
            if backend_id in self._backends:
                raise DuplicateBackend(f"backend {backend_id!r} already registered")
            self._backends[backend_id] = backend

    def has_backend(self, backend_id: str) -> bool:
        return backend_id in self._backends

    def backend(self, backend_id: str) -> ModelBackend:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise UnknownBackend(f"no backend registered as {backend_id!r}") from None

    def backend_ids(self) -> list[str]:
        return sorted(self._backends)

    def resolve(self, model_name: str, inherit_from: str | None) -> str:
        """Map an agent's ``model_name`` onto a registered backend id."""
        if model_name == INHERIT:
            if inherit_from is None:
                raise UnknownBackend("'inherit' used with no caller backend to inherit from")
            return inherit_from
        self.backend(model_name)
        return model_name

    def complete(self, backend_id: str, request: ModelRequest) -> ModelResponse:
        response = self.backend(backend_id).complete(request)
        if not isinstance(response, ModelResponse):
            raise KernelError(f"backend {backend_id!r} returned {type(response).__name__}")
        return response

"""Sub-agent pool, clone-on-run invocation, ensembles and the agent loop."""

from __future__ import annotations

import copy
import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .errors import (
    AgentNotFound,
    ConcurrentConsumption,
    DuplicateAgentName,
    InvalidModel,
    KernelError,
    NothingToSummarize,
    StepLimitExceeded,
    SubAgentError,
    UnresolvableTool,
)
from .gateway import INHERIT, ModelRequest, ToolSummary
from .stm import ShortTermMemory

if TYPE_CHECKING:
    from .kernel import Kernel

INITIAL_MEMORY = ("empty", "parent_summary")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")

SUMMARIZE_HISTORY_INSTRUCTION = (
    "Compress the following agent events into a short summary that keeps "
    "every fact needed to continue the task."
)
SUMMARIZE_PARENT_INSTRUCTION = (
    "Summarize the parent agent's progress so far for a newly created sub-agent."
)
SUMMARIZE_ENSEMBLE_INSTRUCTION = (
    "Several agents worked on the same task in parallel. Merge their "
    "responses into one answer, noting agreements and conflicts."
)


@dataclass(frozen=True)
class AgentSpec:
    agent_name: str
    description: str = ""
    instruction: str = ""
    model_name: str = INHERIT
    tools_list: tuple[str, ...] = ()
    initial_memory: str = "empty"

    def __post_init__(self) -> None:
        if not isinstance(self.agent_name, str) or not _NAME.match(self.agent_name):
            raise ValueError(f"agent_name {self.agent_name!r} is not an identifier")
        if self.initial_memory not in INITIAL_MEMORY:
            raise ValueError(f"initial_memory must be one of {INITIAL_MEMORY}")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> AgentSpec:
        """Accepts the wire names, plus ``tools``/``role`` as seen in model-written calls."""
        tools = doc.get("tools_list", doc.get("tools", []))
        if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
            raise ValueError("tools_list must be a list of tool names or registry paths")
        return cls(
            agent_name=str(doc.get("agent_name", "")),
            description=str(doc.get("description", doc.get("role", ""))),
            instruction=str(doc.get("instruction", "")),
            model_name=str(doc.get("model_name", INHERIT)),
            tools_list=tuple(t for t in tools if t != "..."),
            initial_memory=str(doc.get("initial_memory", "empty")),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_name": self.agent_name,
            "description": self.description,
            "instruction": self.instruction,
            "model_name": self.model_name,
            "tools_list": list(self.tools_list),
            "initial_memory": self.initial_memory,
        }

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class ToolRef:
    """A tool in an agent's scope: a built-in by name or a registry tool by id."""

    kind: str
    name: str
    tool_id: str | None = None


@dataclass
class AgentPoolEntry:
    spec: AgentSpec
    scope: tuple[ToolRef, ...]
    created_by: Any
    created_at: float
    invocation_count: int = 0
    seed_summary: str | None = None


@dataclass
class AgentInstance:
    """A runnable agent: either the root or a clone of a pooled entry."""

    name: str
    spec: AgentSpec
    scope: dict[str, ToolRef]
    backend_id: str
    instruction: str
    seed_summary: str | None = None
    board_id: str | None = None
    run_id: int | None = None

    def add_tool(self, ref: ToolRef) -> None:
        key = ref.name if ref.name not in self.scope else (ref.tool_id or ref.name)
        self.scope[key] = ref


@dataclass
class AgentResponse:
    agent: str
    status: str
    summary: list[str] = field(default_factory=list)
    observations: list[str] = field(default_factory=list)
    run_id: int | None = None
    final_text: str = ""

    @classmethod
    def from_final_text(cls, agent: str, text: str, run_id: int | None = None) -> AgentResponse:
        summary: list[str] = []
        observations: list[str] = []
        try:
            doc = json.loads(text)
        except (json.JSONDecodeError, TypeError):
            doc = None
        if isinstance(doc, dict) and ("summary" in doc or "observations" in doc):
            s = doc.get("summary", [])
            summary = [str(x) for x in s] if isinstance(s, list) else [str(s)]
            o = doc.get("observations", [])
            observations = [str(x) for x in o] if isinstance(o, list) else [str(o)]
        else:
            summary = [line for line in text.splitlines() if line.strip()]
        return cls(agent, "success", summary, observations, run_id, text)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent": self.agent,
            "status": self.status,
            "summary": list(self.summary),
            "observations": list(self.observations),
        }


@dataclass(frozen=True)
class EnsembleRequest:
    task: str
    members: tuple[tuple[str, str], ...]
    aggregation: str = "summarize"

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.aggregation != "summarize":
            raise ValueError("the only aggregation strategy is 'summarize'")


@dataclass
class MemberResult:
    agent_name: str
    model_name: str
    run_id: int
    status: str
    response: AgentResponse | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "agent_name": self.agent_name,
            "model_name": self.model_name,
            "run_id": self.run_id,
            "status": self.status,
        }
        if self.response is not None:
            out["response"] = self.response.to_dict()
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class EnsembleResult:
    members: list[MemberResult]
    summary: str
    board_id: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": "success",
            "members": [m.to_dict() for m in self.members],
            "summary": self.summary,
            "board_id": self.board_id,
        }


@dataclass
class RunResult:
    run_id: int
    final_text: str
    event_count: int
    status: str = "done"


class AgentPool:
    """The unified store of created agents; lookups are lock-free, registration is serialized."""

    def __init__(self) -> None:
        self._entries: dict[str, AgentPoolEntry] = {}
        self._lock = threading.Lock()

    def register(self, entry: AgentPoolEntry) -> None:
        with self._lock:
            if entry.spec.agent_name in self._entries:
                raise DuplicateAgentName(f"agent {entry.spec.agent_name!r} already exists")
            self._entries[entry.spec.agent_name] = entry

    def get(self, name: str) -> AgentPoolEntry:
        entry = self._entries.get(name)
        if entry is None:
            raise AgentNotFound(name)
        return entry

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def entries(self) -> list[AgentPoolEntry]:
        return list(self._entries.values())

    def search(self, filter_text: str | None = None) -> list[tuple[str, str]]:
        needle = (filter_text or "").lower()
        return [
            (e.spec.agent_name, e.spec.description)
            for e in self._entries.values()
            if needle in e.spec.agent_name.lower() or needle in e.spec.description.lower()
        ]

    def record_invocation(self, name: str) -> None:
        with self._lock:
            self._entries[name].invocation_count += 1

    def spec_snapshot(self) -> dict[str, str]:
        return {name: e.spec.canonical() for name, e in self._entries.items()}


@dataclass
class ToolContext:
    """What a tool handler knows about its caller."""

    instance: AgentInstance
    run_id: int
    event_id: int | None
    stm: ShortTermMemory


class AgentRuntime:
    """Agent-topology operations; tool execution and storage come from the kernel."""

    def __init__(self, kernel: Kernel) -> None:
        self.kernel = kernel
        self.pool = AgentPool()
        self._active: dict[int, AgentInstance] = {}
        self._active_lock = threading.Lock()
        self._live_clones = 0
        self._clone_lock = threading.Lock()

    # -- bookkeeping --------------------------------------------------

    @property
    def live_clones(self) -> int:
        return self._live_clones

    def _clone_delta(self, delta: int) -> None:
        with self._clone_lock:
            self._live_clones += delta

    def active_instance(self, agent_id: Any) -> AgentInstance | None:
        return self._active.get(agent_id) if agent_id is not None else None

    def backend_of(self, agent_id: Any) -> str | None:
        inst = self.active_instance(agent_id)
        return inst.backend_id if inst is not None else self.kernel.default_backend

    # -- scope --------------------------------------------------------

    def resolve_scope(self, tools_list: tuple[str, ...], parent: AgentInstance | None) -> list[ToolRef]:
        """Resolve each entry by name in the parent's scope, else as a registry path.

        Without a parent (root agents, operator calls) built-in names are
        also accepted directly.
        """
        builtins = self.kernel.builtin_names()
        refs: list[ToolRef] = []
        for entry in tools_list:
            if parent is not None and entry in parent.scope:
                refs.append(parent.scope[entry])
                continue
            if parent is None and entry in builtins:
                refs.append(ToolRef("builtin", entry))
                continue
            tool_ids = self.kernel.registry.resolve(entry)
            if not tool_ids:
                raise UnresolvableTool(f"tool {entry!r} is neither in the parent's scope nor in the registry")
            refs.extend(ToolRef("registry", tid.rsplit("/", 1)[-1], tid) for tid in tool_ids)
        return refs

    @staticmethod
    def _scope_dict(refs: tuple[ToolRef, ...] | list[ToolRef]) -> dict[str, ToolRef]:
        scope: dict[str, ToolRef] = {}
        for ref in refs:
            key = ref.name
            if key in scope and scope[key] != ref:
                key = ref.tool_id or ref.name
            scope.setdefault(key, ref)
        return scope

    def _check_model(self, model_name: str) -> None:
        if model_name != INHERIT and not self.kernel.gateway.has_backend(model_name):
            raise InvalidModel(f"model {model_name!r} is not a registered backend")

    # -- pool operations ----------------------------------------------

    def create_agent(self, parent: Any, spec: AgentSpec) -> str:
        """Validate ``spec``, freeze its tool scope and store it in the pool."""
        if spec.agent_name in self.pool:
            raise DuplicateAgentName(f"agent {spec.agent_name!r} already exists")
        self._check_model(spec.model_name)
        parent_inst = self.active_instance(parent)
        refs = self.resolve_scope(spec.tools_list, parent_inst)
        seed = None
        if spec.initial_memory == "parent_summary" and parent_inst is not None and parent_inst.run_id is not None:
            events = self.kernel.stm.inspect_events(parent_inst.run_id)
            seed = self.kernel.summarize(
                parent_inst.backend_id, SUMMARIZE_PARENT_INSTRUCTION, events, agent_id=parent
            )
        entry = AgentPoolEntry(spec, tuple(refs), parent, time.monotonic(), seed_summary=seed)
        self.pool.register(entry)
        return spec.agent_name

    def list_agents(self, filter_text: str | None = None) -> dict[str, Any]:
        found = self.pool.search(filter_text)
        message = f"Found {len(found)} total agents."
        if not found:
            message += " If no suitable agents exist, create a dynamic sub-agent."
        return {
            "summary": {"total_active_agents": len(found)},
            "agents": [{"agent_name": n, "description": d} for n, d in found],
            "message": message,
        }

    def _clone(self, entry: AgentPoolEntry, backend_id: str) -> AgentInstance:
        spec = copy.deepcopy(entry.spec)
        return AgentInstance(
            name=spec.agent_name,
            spec=spec,
            scope=self._scope_dict(copy.deepcopy(entry.scope)),
            backend_id=backend_id,
            instruction=spec.instruction,
            seed_summary=entry.seed_summary,
        )

    def call_agent(
        self, caller: Any, agent_name: str, task_message: str, *, parent_event: int | None = None
    ) -> AgentResponse:
        """Clone the pooled agent, run the clone on the task, then discard it."""
        entry = self.pool.get(agent_name)
        if agent_name == self.kernel.MEMORY_AGENT and self.kernel.memory_agent is not None:
            return self.kernel.memory_agent.answer_as_agent(caller, task_message)
        caller_backend = self.backend_of(caller)
        try:
            backend_id = self.kernel.gateway.resolve(entry.spec.model_name, caller_backend)
        except KernelError as exc:
            raise InvalidModel(str(exc)) from exc
        instance = self._clone(entry, backend_id)
        self._clone_delta(+1)
        try:
            run = self.kernel.stm.open_agent_run(parent_event, instance.spec.to_dict(), task=task_message)
            try:
                result = self.run_instance(instance, run, task_message)
            except KernelError as exc:
                raise SubAgentError(f"sub-agent {agent_name!r} failed: {exc}") from exc
            self.pool.record_invocation(agent_name)
            return AgentResponse.from_final_text(agent_name, result.final_text, run)
        finally:
            del instance
            self._clone_delta(-1)

    def run_ensemble(
        self, caller: Any, request: EnsembleRequest, *, parent_event: int | None = None
    ) -> EnsembleResult:
        entries = [self.pool.get(name) for name, _ in request.members]
        caller_backend = self.backend_of(caller)
        backends = []
        for name, model in request.members:
            self._check_model(model)
            backends.append(self.kernel.gateway.resolve(model, caller_backend))
        exclusive = [
            b for b in backends if getattr(self.kernel.gateway.backend(b), "single_consumer", False)
        ]
        if len(exclusive) != len(set(exclusive)):
            raise ConcurrentConsumption(
                "ensemble members would share a single-consumer backend: "
                + ", ".join(sorted({b for b in exclusive if exclusive.count(b) > 1}))
            )

        instances = [self._clone(e, b) for e, b in zip(entries, backends)]
        self._clone_delta(len(instances))
        try:
            peers = [(e.spec.agent_name, e.spec.description, m) for e, (_, m) in zip(entries, request.members)]
            runs = []
            for i, inst in enumerate(instances):
                others = [p for j, p in enumerate(peers) if j != i]
                inst.instruction = _with_peers(inst.instruction, others)
                spec_doc = inst.spec.to_dict()
                spec_doc["model_name"] = request.members[i][1]
                runs.append(self.kernel.stm.open_agent_run(parent_event, spec_doc, task=request.task))
            board = self.kernel.boards.create(runs)
            for inst in instances:
                inst.board_id = board.board_id
                inst.add_tool(ToolRef("builtin", "post_message"))

            def member(i: int) -> MemberResult:
                name, model = request.members[i]
                try:
                    res = self.run_instance(instances[i], runs[i], request.task)
                except KernelError as exc:
                    return MemberResult(name, model, runs[i], "failed", error=str(exc))
                self.pool.record_invocation(name)
                return MemberResult(
                    name, model, runs[i], "success",
                    AgentResponse.from_final_text(name, res.final_text, runs[i]),
                )

            with ThreadPoolExecutor(max_workers=len(instances), thread_name_prefix="ensemble") as ex:
                results = list(ex.map(member, range(len(instances))))
            board.close()
        finally:
            instances.clear()
            self._clone_delta(-len(entries))

        survivors = [
            {"agent": r.agent_name, "model": r.model_name, "response": r.response.final_text}
            for r in results
            if r.response is not None
        ]
        summary = self.kernel.summarize(
            caller_backend, SUMMARIZE_ENSEMBLE_INSTRUCTION, survivors, agent_id=caller, task=request.task
        )
        return EnsembleResult(results, summary, board.board_id)

    # -- execution ----------------------------------------------------

    def root_instance(self, spec: AgentSpec, backend_id: str | None = None) -> AgentInstance:
        self._check_model(spec.model_name)
        if backend_id is None:
            backend_id = self.kernel.gateway.resolve(spec.model_name, self.kernel.default_backend)
        refs = self.resolve_scope(spec.tools_list, None)
        return AgentInstance(spec.agent_name, spec, self._scope_dict(refs), backend_id, spec.instruction)

    def run_root(
        self, spec: AgentSpec, task: str, max_steps: int | None = None, *, backend_id: str | None = None
    ) -> RunResult:
        instance = self.root_instance(spec, backend_id)
        run = self.kernel.stm.open_agent_run(None, spec.to_dict(), task=task)
        return self.run_instance(instance, run, task, max_steps)

    def run_instance(
        self,
        instance: AgentInstance,
        run: int,
        task: str,
        max_steps: int | None = None,
        *,
        stm: ShortTermMemory | None = None,
    ) -> RunResult:
        """Drive complete()/tool dispatch until a text response or the step limit.

        Events are recorded in ``stm`` (the kernel's graph unless a scratch
        graph is given). Tool failures are fed back to the model; gateway
        failures are recorded and end the run.
        """
        stm = stm or self.kernel.stm
        limit = max_steps if max_steps is not None else self.kernel.config.max_steps
        if limit < 1:
            raise ValueError("max_steps must be >= 1")
        instance.run_id = run
        with self._active_lock:
            self._active[run] = instance
        try:
            if instance.seed_summary:
                stm.append_event(run, {"kind": "context", "text": instance.seed_summary})
            steps = 0
            while True:
                if steps >= limit:
                    raise StepLimitExceeded(f"agent {instance.name!r} hit the {limit}-step limit")
                self._maybe_summarize(instance, run, stm)
                request = ModelRequest(
                    agent_id=run,
                    system_instruction=instance.instruction,
                    history=tuple(stm.assemble_history(run)),
                    available_tools=tuple(self.tool_summaries(instance)),
                    task=task,
                )
                try:
                    response = self.kernel.gateway.complete(instance.backend_id, request)
                except KernelError as exc:
                    stm.append_event(
                        run, {"kind": "error", "source": "gateway", "text": str(exc), "error": True}
                    )
                    raise
                steps += 1
                if response.kind == "text":
                    stm.append_event(run, {"kind": "text", "text": response.text})
                    stm.close_run(run, "done")
                    return RunResult(run, response.text or "", len(stm.run_events(run)))
                call = response.tool_call
                assert call is not None
                event = stm.append_event(
                    run, {"kind": "tool_call", "tool_name": call.tool_name, "args": call.args}
                )
                ctx = ToolContext(instance, run, event if stm is self.kernel.stm else None, stm)
                doc, raw, failed = self.kernel.dispatch_tool(ctx, call.tool_name, call.args)
                if instance.board_id is not None:
                    diff = self.kernel.boards.drain_messages(instance.board_id, run)
                    if diff:
                        doc = dict(doc)
                        doc["board_messages"] = [m.to_dict() for m in diff]
                stm.attach_response(event, doc, raw, error=failed)
        except BaseException:
            try:
                stm.close_run(run, "failed")
            except KernelError:
                pass
            raise
        finally:
            with self._active_lock:
                self._active.pop(run, None)

    def _maybe_summarize(self, instance: AgentInstance, run: int, stm: ShortTermMemory) -> None:
        cfg = self.kernel.config
        if stm.history_tokens(run) <= cfg.summarization_threshold_tokens:
            return
        try:
            stm.summarize_history(
                run,
                cfg.keep_recent_events,
                lambda payloads: self.kernel.summarize(
                    instance.backend_id, SUMMARIZE_HISTORY_INSTRUCTION, payloads, agent_id=run
                ),
            )
        except NothingToSummarize:
            pass

    def tool_summaries(self, instance: AgentInstance) -> list[ToolSummary]:
        return [self.kernel.tool_summary(name, ref) for name, ref in instance.scope.items()]


def _with_peers(instruction: str, peers: list[tuple[str, str, str]]) -> str:
    if not peers:
        lines = ["You are the only member of this ensemble."]
    else:
        lines = ["You are working in parallel with these agents on the same task:"]
        lines += [f"- {name} ({model}): {desc}" for name, desc, model in peers]
    lines.append("Share findings with post_message; messages from peers arrive with tool responses.")
    return (instruction + "\n\n" if instruction else "") + "\n".join(lines)

"""The memory agent: natural-language access to both memory tiers.

Queries run through the agent's own loop, so routing is whatever the model
decides to call. The loop's trace goes to a private scratch graph: the
memory agent reads the shared short-term graph but never writes to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

from .errors import RoutingFailure
from .ltm import RetrievalQuery
from .stm import ShortTermMemory
from .topology import AgentPoolEntry, AgentResponse, AgentSpec

if TYPE_CHECKING:
    from .kernel import Kernel

SHORT_TERM_TOOLS = ("list_agent_runs", "inspect_events", "recover_raw", "graph_query")
LONG_TERM_TOOLS = (
    "create_node",
    "create_edge",
    "list_schema",
    "search_nodes",
    "grep_nodes",
    "update_node",
    "delete_node",
)
MEMORY_TOOLS = SHORT_TERM_TOOLS + LONG_TERM_TOOLS

MEMORY_AGENT_SPEC = AgentSpec(
    agent_name="memory_agent",
    description="Searches execution history and reads or updates the long-term knowledge graph.",
    instruction=(
        "You manage agent memory. Decide whether the request concerns short-term "
        "memory (this task's execution history, read-only) or long-term memory "
        "(the shared knowledge graph). For long-term stores and updates, search "
        "for existing nodes first and only persist non-redundant knowledge."
    ),
    model_name="inherit",
    tools_list=MEMORY_TOOLS,
)

AGGREGATE_INSTRUCTION = "Aggregate these memory search results into a concise summary."
DEDUP_INSTRUCTION = (
    "A new memory item closely matches an existing node. Reply SKIP if it adds "
    "nothing; otherwise reply with the merged content for the existing node."
)

_WRITE_PRECEDENCE = (("delete_node", "delete"), ("update_node", "update"), ("create_node", "store"), ("create_edge", "store"))


@dataclass(frozen=True)
class MemoryQuery:
    requester: Any
    text: str

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("memory query text must be non-empty")


@dataclass
class MemoryAnswer:
    tier: str
    action: str
    found: bool
    total_found: int
    results: list[dict[str, Any]] = field(default_factory=list)
    summary: str = ""
    tools_called: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tier": self.tier,
            "action": self.action,
            "found": self.found,
            "total_found": self.total_found,
            "results": self.results,
            "summary": self.summary,
        }


@dataclass(frozen=True)
class StoreDecision:
    decision: str
    node_id: int

    def to_dict(self) -> dict[str, Any]:
        return {"decision": self.decision, "node_id": self.node_id}


class MemoryAgent:
    def __init__(self, kernel: Kernel) -> None:
        self.kernel = kernel

    def _backend(self, requester: Any, backend_id: str | None) -> str:
        if backend_id is not None:
            return backend_id
        resolved = self.kernel.runtime.backend_of(requester)
        return self.kernel.gateway.resolve(MEMORY_AGENT_SPEC.model_name, resolved)

    def handle_query(self, query: MemoryQuery, backend_id: str | None = None) -> MemoryAnswer:
        backend = self._backend(query.requester, backend_id)
        entry = self.kernel.runtime.pool.get(MEMORY_AGENT_SPEC.agent_name) if (
            MEMORY_AGENT_SPEC.agent_name in self.kernel.runtime.pool
        ) else None
        scope_refs = entry.scope if entry is not None else tuple(
            self.kernel.runtime.resolve_scope(MEMORY_AGENT_SPEC.tools_list, None)
        )
        instance = self.kernel.runtime._clone(
            entry or _transient_entry(scope_refs), backend
        )
        scratch = ShortTermMemory(self.kernel.config.truncation_limit_bytes)
        run = scratch.open_agent_run(None, MEMORY_AGENT_SPEC.to_dict(), task=query.text)
        self.kernel.runtime._clone_delta(+1)
        try:
            result = self.kernel.runtime.run_instance(instance, run, query.text, stm=scratch)
        finally:
            self.kernel.runtime._clone_delta(-1)
        calls = [
            e for e in scratch.inspect_events(run)
            if e.get("kind") == "tool_call" and e.get("tool_name") in MEMORY_TOOLS
        ]
        if not calls:
            raise RoutingFailure("memory agent finished without calling any memory tool")
        names = [c["tool_name"] for c in calls]
        tier = "long_term" if any(n in LONG_TERM_TOOLS for n in names) else "short_term"
        action = "search"
        for tool, act in _WRITE_PRECEDENCE:
            if tool in names:
                action = act
                break
        results = _collect_results(calls, writes=action != "search")
        if action == "search":
            summary = self.kernel.summarize(
                backend, AGGREGATE_INSTRUCTION, results, agent_id=query.requester, task=query.text
            )
        else:
            summary = result.final_text
        return MemoryAnswer(tier, action, bool(results), len(results), results, summary, names)

    def dedup_store(
        self, candidate: dict[str, str], backend_id: str | None = None, requester: Any = None
    ) -> StoreDecision:
        """Store a node unless a near-duplicate exists; then update or skip per one model reply."""
        ltm = self.kernel.ltm
        node_type, label, content = candidate["node_type"], candidate["label"], candidate["content"]
        hits = []
        if node_type in ltm.list_schema().node_types:
            hits = ltm.search_nodes(RetrievalQuery(node_type, label, top_n=3))
        if hits and hits[0]["score"] >= self.kernel.config.dedup_threshold:
            existing = hits[0]["node"]
            reply = self.kernel.summarize(
                self._backend(requester, backend_id),
                DEDUP_INSTRUCTION,
                [{"existing": existing, "candidate": dict(candidate)}],
                agent_id=requester,
            )
            if reply.strip().upper().startswith("SKIP"):
                return StoreDecision("skipped", existing["node_id"])
            ltm.update_node(existing["node_id"], new_content=reply)
            return StoreDecision("updated", existing["node_id"])
        return StoreDecision("created", ltm.create_node(node_type, label, content))

    def answer_as_agent(self, caller: Any, task_message: str) -> AgentResponse:
        """Adapter used when a user agent reaches the memory agent through call_agent."""
        answer = self.handle_query(MemoryQuery(caller, task_message))
        self.kernel.runtime.pool.record_invocation(MEMORY_AGENT_SPEC.agent_name)
        return AgentResponse(
            MEMORY_AGENT_SPEC.agent_name,
            "success",
            [answer.summary],
            [json.dumps(r, sort_keys=True, default=str) for r in answer.results],
            final_text=answer.summary,
        )


def _transient_entry(scope_refs: tuple) -> AgentPoolEntry:
    return AgentPoolEntry(MEMORY_AGENT_SPEC, tuple(scope_refs), None, 0.0)


def _collect_results(calls: list[dict[str, Any]], writes: bool) -> list[dict[str, Any]]:
    results: list[dict[str, Any]] = []
    seen: set[Any] = set()

    def add(key: Any, doc: dict[str, Any]) -> None:
        if key not in seen:
            seen.add(key)
            results.append(doc)

    for call in calls:
        resp = call.get("response")
        if not isinstance(resp, dict) or resp.get("status") == "failed":
            continue
        name = call["tool_name"]
        if writes:
            if name in ("create_node", "update_node", "delete_node") and "node_id" in resp:
                add(("node", resp["node_id"], name), {"tool": name, **resp})
            continue
        if name == "search_nodes":
            for hit in resp.get("results", []):
                add(("node", hit["node"]["node_id"]), dict(hit["node"]))
        elif name == "grep_nodes":
            for node in resp.get("nodes", []):
                add(("node", node["node_id"]), dict(node))
        elif name == "list_agent_runs":
            for run in resp.get("runs", []):
                add(("run", run["run_id"]), dict(run))
        elif name == "inspect_events":
            for ev in resp.get("events", []):
                add(("event", ev.get("run"), ev.get("index")), dict(ev))
        elif name == "recover_raw":
            add(("raw", resp.get("event_id")), dict(resp))
        elif name == "graph_query":
            for binding in resp.get("bindings", []):
                add(("binding", tuple(binding["nodes"])), dict(binding))
    return results

"""Short-term memory: the per-run execution graph.

Nodes are ``AgentRun``, ``Event``, ``RawToolResponse`` and ``SummaryEvent``;
edges are ``emits`` (run to its events), ``spawns`` (call event to the child
run it opened), ``raw_of`` (event to its full tool output) and
``summarizes`` (summary to each event it covers).
"""

from __future__ import annotations

import base64
import copy
import json
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import (
    InvalidParent,
    MalformedPattern,
    NoRawAttachment,
    NothingToSummarize,
    RunClosed,
    UnknownEvent,
    UnknownRun,
)
from .gateway import ToolCall, Turn, estimate_tokens, render_history

NODE_KINDS = ("AgentRun", "Event", "RawToolResponse", "SummaryEvent")
EDGE_KINDS = ("emits", "spawns", "raw_of", "summarizes")

# tool calls whose events may parent a new AgentRun
SPAWNING_TOOLS = frozenset({"create_agent", "call_agent", "run_ensemble"})

DEFAULT_TRUNCATION_LIMIT = 64 * 1024


@dataclass
class StmNode:
    node_id: int
    kind: str
    payload: dict[str, Any]
    raw: bytes | None = None

    def to_record(self) -> dict[str, Any]:
        payload = copy.deepcopy(self.payload)
        if self.raw is not None:
            payload["raw_b64"] = base64.b64encode(self.raw).decode("ascii")
        return {"node_id": self.node_id, "kind": self.kind, "payload": payload}


@dataclass(frozen=True)
class StmEdge:
    src: int
    dst: int
    kind: str

    def to_record(self) -> dict[str, Any]:
        return {"src": self.src, "dst": self.dst, "kind": self.kind}


@dataclass
class _RunState:
    events: list[int] = field(default_factory=list)
    summaries: list[int] = field(default_factory=list)
    covered: set[int] = field(default_factory=set)
    open: bool = True


class ShortTermMemory:
    """In-memory execution graph with retrieval and summarization support."""

    def __init__(self, truncation_limit: int = DEFAULT_TRUNCATION_LIMIT) -> None:
        if truncation_limit <= 0:
            raise ValueError("truncation_limit must be positive")
        self.truncation_limit = truncation_limit
        self._nodes: dict[int, StmNode] = {}
        self._edges: list[StmEdge] = []
        self._out: dict[int, list[StmEdge]] = defaultdict(list)
        self._in: dict[int, list[StmEdge]] = defaultdict(list)
        self._runs: dict[int, _RunState] = {}
        self._next_id = 1
        self._lock = threading.RLock()

    # -- construction -------------------------------------------------

    def _new_node(self, kind: str, payload: dict[str, Any], raw: bytes | None = None) -> int:
        node_id = self._next_id
        self._next_id += 1
        self._nodes[node_id] = StmNode(node_id, kind, payload, raw)
        return node_id

    def _add_edge(self, src: int, dst: int, kind: str) -> None:
        edge = StmEdge(src, dst, kind)
        self._edges.append(edge)
        self._out[src].append(edge)
        self._in[dst].append(edge)

    def _run(self, run: int) -> _RunState:
        state = self._runs.get(run)
        if state is None:
            raise UnknownRun(f"no AgentRun with id {run}")
        return state

    def open_agent_run(
        self,
        parent_event: int | None = None,
        spec_snapshot: dict[str, Any] | None = None,
        *,
        task: str | None = None,
    ) -> int:
        """Open a new AgentRun, linked by a ``spawns`` edge when it has a parent."""
        with self._lock:
            parent_run = None
            if parent_event is not None:
                node = self._nodes.get(parent_event)
                if node is None or node.kind != "Event":
                    raise InvalidParent(f"parent {parent_event} is not an Event")
                if node.payload.get("kind") != "tool_call" or (
                    node.payload.get("tool_name") not in SPAWNING_TOOLS
                ):
                    raise InvalidParent(
                        f"event {parent_event} is not an agent-spawning tool call"
                    )
                parent_run = node.payload["run"]
            spec = copy.deepcopy(spec_snapshot or {})
            payload = {
                "agent_name": spec.get("agent_name", ""),
                "spec": spec,
                "status": "running",
                "task": task,
                "parent_run": parent_run,
                "parent_event": parent_event,
            }
            run = self._new_node("AgentRun", payload)
            self._runs[run] = _RunState()
            if parent_event is not None:
                self._add_edge(parent_event, run, "spawns")
            return run

    def close_run(self, run: int, status: str = "done") -> None:
        with self._lock:
            state = self._run(run)
            state.open = False
            self._nodes[run].payload["status"] = status

    def _store_output(self, event: int, payload: dict[str, Any], raw_output: bytes | None) -> None:
        if raw_output is None:
            return
        if len(raw_output) > self.truncation_limit:
            head = raw_output[: self.truncation_limit].decode("utf-8", errors="replace")
            payload.setdefault("output", head)
            payload["truncated"] = True
            payload["raw_size"] = len(raw_output)
            raw = self._new_node("RawToolResponse", {"size": len(raw_output)}, bytes(raw_output))
            self._add_edge(event, raw, "raw_of")
        else:
            payload.setdefault("output", raw_output.decode("utf-8", errors="replace"))

    def append_event(
        self, run: int, event_payload: dict[str, Any], raw_output: bytes | None = None
    ) -> int:
        """Append an Event with the next dense index.

        ``raw_output`` longer than the truncation limit is kept whole in a
        RawToolResponse node; the event itself holds only the head.
        """
        with self._lock:
            state = self._run(run)
            if not state.open:
                raise RunClosed(f"AgentRun {run} is closed")
            payload = copy.deepcopy(event_payload)
            payload["index"] = len(state.events) + 1
            payload["run"] = run
            payload.setdefault("kind", "text")
            event = self._new_node("Event", payload)
            self._store_output(event, payload, raw_output)
            state.events.append(event)
            self._add_edge(run, event, "emits")
            return event

    def attach_response(
        self, event: int, response: Any, raw_output: bytes | None = None, *, error: bool = False
    ) -> None:
        """Record the response of a tool-call event appended earlier."""
        with self._lock:
            node = self._nodes.get(event)
            if node is None or node.kind != "Event":
                raise UnknownEvent(f"no Event with id {event}")
            node.payload["response"] = copy.deepcopy(response)
            if error:
                node.payload["error"] = True
            self._store_output(event, node.payload, raw_output)

    # -- summarization ------------------------------------------------

    def summarize_history(
        self,
        run: int,
        keep_recent: int,
        summarizer: Callable[[list[dict[str, Any]]], str],
    ) -> int:
        """Compress uncovered events older than the last ``keep_recent`` into a SummaryEvent.

        ``summarizer`` receives the covered event payloads and returns the
        summary text; the kernel backs it with one model completion.
        """
        if keep_recent < 0:
            raise ValueError("keep_recent must be >= 0")
        with self._lock:
            state = self._run(run)
            if not state.open:
                raise RunClosed(f"AgentRun {run} is closed")
            older = state.events[: max(0, len(state.events) - keep_recent)]
            covered = [e for e in older if e not in state.covered]
            if not covered:
                raise NothingToSummarize(
                    f"run {run} has no uncovered events older than the last {keep_recent}"
                )
            payloads = [copy.deepcopy(self._nodes[e].payload) for e in covered]
        text = summarizer(payloads)
        with self._lock:
            indices = [p["index"] for p in payloads]
            summary = self._new_node(
                "SummaryEvent",
                {
                    "run": run,
                    "text": text,
                    "covered": [min(indices), max(indices)],
                    "covered_events": list(covered),
                },
            )
            self._add_edge(run, summary, "emits")
            for e in covered:
                self._add_edge(summary, e, "summarizes")
            state.covered.update(covered)
            state.summaries.append(summary)
            return summary

    def assemble_history(self, run: int) -> list[Turn]:
        """Model-facing history: all summaries in order, then uncovered events."""
        with self._lock:
            state = self._run(run)
            turns: list[Turn] = []
            for sid in state.summaries:
                turns.append(Turn(len(turns) + 1, "summary", text=self._nodes[sid].payload["text"]))
            for eid in state.events:
                if eid in state.covered:
                    continue
                turns.append(_event_turn(len(turns) + 1, self._nodes[eid].payload))
            return turns

    def history_tokens(self, run: int) -> int:
        return estimate_tokens(render_history(self.assemble_history(run)))

    def summary_count(self, run: int) -> int:
        with self._lock:
            return len(self._run(run).summaries)

    # -- retrieval ----------------------------------------------------

    def list_agent_runs(
        self, name: str | None = None, status: str | None = None
    ) -> list[dict[str, Any]]:
        with self._lock:
            out = []
            for run, state in self._runs.items():
                p = self._nodes[run].payload
                if name and name.lower() not in str(p["agent_name"]).lower():
                    continue
                if status and p["status"] != status:
                    continue
                out.append(
                    {
                        "run_id": run,
                        "agent_name": p["agent_name"],
                        "status": p["status"],
                        "task": p["task"],
                        "parent_run": p["parent_run"],
                        "parent_event": p["parent_event"],
                        "event_count": len(state.events),
                        "summary_count": len(state.summaries),
                    }
                )
            return out

    def run_events(self, run: int) -> list[int]:
        with self._lock:
            return list(self._run(run).events)

    def inspect_events(
        self, run: int, start: int | None = None, end: int | None = None
    ) -> list[dict[str, Any]]:
        """Event payloads with ``start <= index <= end`` (1-based, inclusive)."""
        with self._lock:
            events = self._run(run).events
            lo = 1 if start is None else start
            hi = len(events) if end is None else end
            return [
                copy.deepcopy(self._nodes[e].payload)
                for e in events
                if lo <= self._nodes[e].payload["index"] <= hi
            ]

    def event_id(self, run: int, index: int) -> int:
        with self._lock:
            events = self._run(run).events
            if not 1 <= index <= len(events):
                raise UnknownEvent(f"run {run} has no event {index}")
            return events[index - 1]

    def recover_raw(self, event: int) -> bytes:
        with self._lock:
            node = self._nodes.get(event)
            if node is None or node.kind != "Event":
                raise UnknownEvent(f"no Event with id {event}")
            for edge in self._out[event]:
                if edge.kind == "raw_of":
                    raw = self._nodes[edge.dst].raw
                    assert raw is not None
                    return raw
            raise NoRawAttachment(f"event {event} has no raw tool response")

    def node(self, node_id: int) -> StmNode:
        with self._lock:
            node = self._nodes[node_id]
            return StmNode(node.node_id, node.kind, copy.deepcopy(node.payload), node.raw)

    def graph_query(self, pattern: dict[str, Any]) -> list[dict[str, Any]]:
        """Evaluate a structured pattern and return path bindings.

        Pattern shape::

            {"match": {"kind": "AgentRun", "where": {"agent_name": "gdb_helper"}},
             "walk": [{"edge": "emits", "direction": "out", "kind": "Event",
                       "where": {...}, "repeat": 1}, ...]}

        ``where`` maps dotted payload keys (or ``node_id``) to a literal or to
        ``{"eq"|"contains"|"in"|"exists": value}``. Each binding is
        ``{"nodes": [...]}`` listing the node ids along one matching path,
        ordered by node ids ascending.
        """
        start_spec, steps = _parse_pattern(pattern)
        with self._lock:
            paths = [
                [n.node_id]
                for n in sorted(self._nodes.values(), key=lambda n: n.node_id)
                if _node_matches(n, start_spec)
            ]
            for step in steps:
                nxt = []
                for path in paths:
                    edges = self._out[path[-1]] if step["direction"] == "out" else self._in[path[-1]]
                    for edge in edges:
                        if edge.kind != step["edge"]:
                            continue
                        other = edge.dst if step["direction"] == "out" else edge.src
                        if _node_matches(self._nodes[other], step):
                            nxt.append(path + [other])
                paths = nxt
            paths.sort()
            return [{"nodes": p} for p in paths]

    # -- persistence --------------------------------------------------

    def _subtree(self, run: int) -> set[int]:
        self._run(run)
        keep: set[int] = set()
        stack = [run]
        while stack:
            nid = stack.pop()
            if nid in keep:
                continue
            keep.add(nid)
            for edge in self._out[nid]:
                stack.append(edge.dst)
        return keep

    def export_records(self, run: int | None = None) -> list[dict[str, Any]]:
        """Nodes first, then edges; restricted to ``run``'s subtree when given."""
        with self._lock:
            keep = set(self._nodes) if run is None else self._subtree(run)
            nodes = [self._nodes[n].to_record() for n in sorted(keep)]
            edges = [e.to_record() for e in self._edges if e.src in keep and e.dst in keep]
            return nodes + edges

    def export_jsonl(self, path: str | Path, run: int | None = None) -> int:
        records = self.export_records(run)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return len(records)

    def fingerprint(self) -> tuple[tuple[str, ...], tuple[tuple[int, int, str], ...]]:
        """Hashable snapshot of the full node/edge multiset."""
        with self._lock:
            nodes = tuple(sorted(json.dumps(n.to_record(), sort_keys=True) for n in self._nodes.values()))
            edges = tuple(sorted((e.src, e.dst, e.kind) for e in self._edges))
            return nodes, edges

    def counts(self) -> dict[str, int]:
        with self._lock:
            out = {k: 0 for k in NODE_KINDS}
            for n in self._nodes.values():
                out[n.kind] += 1
            for k in EDGE_KINDS:
                out[k] = sum(1 for e in self._edges if e.kind == k)
            return out


def _event_turn(seq: int, payload: dict[str, Any]) -> Turn:
    kind = payload.get("kind")
    if kind == "tool_call":
        return Turn(
            seq,
            "tool_call",
            tool_call=ToolCall(payload["tool_name"], payload.get("args", {})),
            response=payload.get("response"),
        )
    if kind == "context":
        return Turn(seq, "context", text=payload.get("text", ""))
    if kind == "error":
        return Turn(seq, "error", text=payload.get("text", ""))
    return Turn(seq, "text", text=payload.get("text", ""))


_STEP_KEYS = {"edge", "direction", "kind", "where", "repeat"}


def _parse_pattern(pattern: Any) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    if not isinstance(pattern, dict) or set(pattern) - {"match", "walk"}:
        raise MalformedPattern("pattern must be an object with 'match' and optional 'walk'")
    start = pattern.get("match")
    if not isinstance(start, dict) or set(start) - {"kind", "where"}:
        raise MalformedPattern("'match' must be an object with optional 'kind' and 'where'")
    _check_where(start.get("where"))
    walk = pattern.get("walk", [])
    if not isinstance(walk, list):
        raise MalformedPattern("'walk' must be a list of steps")
    steps: list[dict[str, Any]] = []
    for i, raw in enumerate(walk):
        if not isinstance(raw, dict) or set(raw) - _STEP_KEYS or "edge" not in raw:
            raise MalformedPattern(f"walk step {i} must be an object with an 'edge' key")
        direction = raw.get("direction", "out")
        if direction not in ("out", "in"):
            raise MalformedPattern(f"walk step {i}: direction must be 'out' or 'in'")
        repeat = raw.get("repeat", 1)
        if not isinstance(repeat, int) or isinstance(repeat, bool) or not 1 <= repeat <= 64:
            raise MalformedPattern(f"walk step {i}: repeat must be an integer in 1..64")
        _check_where(raw.get("where"))
        step = {"edge": raw["edge"], "direction": direction, "kind": raw.get("kind"), "where": raw.get("where")}
        steps.extend([step] * repeat)
    return start, steps


def _check_where(where: Any) -> None:
    if where is None:
        return
    if not isinstance(where, dict):
        raise MalformedPattern("'where' must be an object")
    for key, cond in where.items():
        if isinstance(cond, dict):
            if len(cond) != 1 or next(iter(cond)) not in ("eq", "contains", "in", "exists"):
                raise MalformedPattern(f"bad predicate for {key!r}")


_MISSING = object()


def _lookup(node: StmNode, key: str) -> Any:
    if key == "node_id":
        return node.node_id
    cur: Any = node.payload
    for part in key.split("."):
        if not isinstance(cur, dict) or part not in cur:
            return _MISSING
        cur = cur[part]
    return cur


def _node_matches(node: StmNode, spec: dict[str, Any]) -> bool:
    if spec.get("kind") is not None and node.kind != spec["kind"]:
        return False
    for key, cond in (spec.get("where") or {}).items():
        value = _lookup(node, key)
        if isinstance(cond, dict):
            op, arg = next(iter(cond.items()))
            if op == "exists":
                if (value is not _MISSING) != bool(arg):
                    return False
            elif value is _MISSING:
                return False
            elif op == "eq" and value != arg:
                return False
            elif op == "contains" and str(arg) not in (value if isinstance(value, str) else json.dumps(value, default=str)):
                return False
            elif op == "in" and value not in arg:
                return False
        elif value is _MISSING or value != cond:
            return False
    return True

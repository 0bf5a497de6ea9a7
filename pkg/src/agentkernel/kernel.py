"""Kernel assembly and the built-in tools agents call.

:class:`Kernel` wires the gateway, both memory tiers, the tool registry, the
sandbox runtime, message boards, the agent pool and the memory agent around
one :class:`~agentkernel.config.KernelConfig`.
"""

from __future__ import annotations

import json
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .board import BoardManager
from .config import KernelConfig
from .errors import (
    ArgValidation,
    KernelError,
    OutOfScope,
    UnknownTool,
)
from .gateway import ModelGateway, ModelRequest, ScriptedBackend, ToolSummary
from .ltm import LongTermMemory, RetrievalQuery
from .memory_agent import MEMORY_AGENT_SPEC, MemoryAgent, MemoryQuery
from .registry import ParamSpec, ToolExecutor, ToolRegistry, ToolResult, check_args
from .sandbox import Driver, InvocationHandle, LocalDriver, SandboxRuntime
from .stm import ShortTermMemory
from .topology import (
    AgentInstance,
    AgentPoolEntry,
    AgentRuntime,
    AgentSpec,
    EnsembleRequest,
    ToolContext,
    ToolRef,
)

Handler = Callable[["Kernel", ToolContext, dict[str, Any]], Any]


@dataclass(frozen=True)
class Builtin:
    name: str
    description: str
    params: tuple[ParamSpec, ...]
    handler: Handler

    def schema(self) -> dict[str, Any]:
        return {
            "type": "object",
            "properties": {p.param_name: {"type": p.param_type, "description": p.description} for p in self.params},
            "required": [p.param_name for p in self.params if p.required],
        }


def _p(name: str, ptype: str, required: bool = True, description: str = "") -> ParamSpec:
    return ParamSpec(name, ptype, required, description)


class Kernel:
    MEMORY_AGENT = MEMORY_AGENT_SPEC.agent_name

    def __init__(
        self,
        config: KernelConfig,
        *,
        driver: Driver | None = None,
        ltm: LongTermMemory | None = None,
        install_memory_agent: bool = True,
    ) -> None:
        self.config = config
        self.gateway = ModelGateway()
        self.default_backend: str | None = config.default_backend
        for decl in config.backends:
            self.register_backend(decl["id"], ScriptedBackend.from_file(decl["transcript"]))
        self.stm = ShortTermMemory(config.truncation_limit_bytes)
        if ltm is None and config.ltm_path and Path(config.ltm_path).is_file():
            ltm = LongTermMemory.load_jsonl(config.ltm_path)
        self.ltm = ltm or LongTermMemory()
        self.registry = ToolRegistry(config.registry_root)
        state_dir = config.state_dir or tempfile.mkdtemp(prefix="agentkernel-state-")
        self.sandboxes = SandboxRuntime(driver or LocalDriver(state_dir), config.workspace)
        self.tools = ToolExecutor(self.registry, self.sandboxes, config.truncation_limit_bytes)
        self.boards = BoardManager(Path(config.workspace) / ".boards")
        self.runtime = AgentRuntime(self)
        self.memory_agent: MemoryAgent | None = None
        if install_memory_agent:
            self.memory_agent = MemoryAgent(self)
            refs = self.runtime.resolve_scope(MEMORY_AGENT_SPEC.tools_list, None)
            self.runtime.pool.register(AgentPoolEntry(MEMORY_AGENT_SPEC, tuple(refs), None, 0.0))

    # -- backends -----------------------------------------------------

    def register_backend(self, backend_id: str, backend: Any) -> None:
        self.gateway.register_backend(backend_id, backend)
        if self.default_backend is None:
            self.default_backend = backend_id

    def summarize(
        self,
        backend_id: str | None,
        instruction: str,
        items: list[Any],
        *,
        agent_id: Any = None,
        task: str | None = None,
    ) -> str:
        """One text completion over ``items``; used by every summarization step."""
        if backend_id is None:
            backend_id = self.default_backend
        body = {"items": items} if task is None else {"task": task, "items": items}
        request = ModelRequest(
            agent_id=agent_id,
            system_instruction=instruction,
            task=json.dumps(body, sort_keys=True, default=str),
        )
        response = self.gateway.complete(self.gateway.resolve(backend_id or "", None), request)
        if response.kind != "text":
            raise KernelError("summarization step returned a tool call instead of text")
        return response.text or ""

    # -- agent topology façade ----------------------------------------

    def create_agent(self, parent: Any, spec: AgentSpec) -> str:
        return self.runtime.create_agent(parent, spec)

    def list_agents(self, filter_text: str | None = None) -> dict[str, Any]:
        return self.runtime.list_agents(filter_text)

    def call_agent(self, caller: Any, agent_name: str, task_message: str):
        return self.runtime.call_agent(caller, agent_name, task_message)

    def run_ensemble(self, caller: Any, request: EnsembleRequest):
        return self.runtime.run_ensemble(caller, request)

    def run_root(self, spec: AgentSpec, task: str, max_steps: int | None = None, **kw: Any):
        return self.runtime.run_root(spec, task, max_steps, **kw)

    def post_message(self, board_id: str, writer: Any, text: str) -> int:
        return self.boards.post_message(board_id, writer, text)

    def drain_messages(self, board_id: str, reader: Any):
        return self.boards.drain_messages(board_id, reader)

    # -- tools --------------------------------------------------------

    def builtin_names(self) -> set[str]:
        return set(BUILTINS) - {"post_message"}

    def tool_summary(self, name: str, ref: ToolRef) -> ToolSummary:
        if ref.kind == "builtin":
            b = BUILTINS[ref.name]
            return ToolSummary(name, b.description, b.schema())
        try:
            manifest = self.registry.describe_tool(ref.tool_id or "")
        except KernelError as exc:
            return ToolSummary(name, f"(unavailable: {exc})", {})
        first_line = manifest.description.splitlines()[0] if manifest.description else ""
        return ToolSummary(name, first_line, manifest.parameters_schema())

    def _scope_of(self, caller: Any) -> dict[str, ToolRef] | None:
        inst = self.runtime.active_instance(caller)
        if inst is not None:
            return inst.scope
        if isinstance(caller, str):
            return self.runtime._scope_dict(self.runtime.pool.get(caller).scope)
        return None

    def invoke_tool(
        self, caller: Any, tool_id: str, args: dict[str, Any], mode: str = "sync"
    ) -> ToolResult | InvocationHandle:
        """Run a registry tool for ``caller``.

        ``caller`` is an active run id or a pooled agent name (scope-checked),
        or ``None`` for operator calls.
        """
        scope = self._scope_of(caller)
        if scope is not None and not any(r.tool_id == tool_id for r in scope.values()):
            raise OutOfScope(f"tool {tool_id!r} is not in the caller's tool scope")
        return self.tools.invoke(tool_id, args, mode)

    def dispatch_tool(
        self, ctx: ToolContext, name: str, args: dict[str, Any]
    ) -> tuple[dict[str, Any], bytes | None, bool]:
        """Execute one model tool call; errors come back as structured responses.

        Returns ``(response_document, full_raw_output_or_None, failed)``.
        """
        scope = ctx.instance.scope
        ref = scope.get(name)
        if ref is None:
            ref = next((r for r in scope.values() if r.tool_id == name), None)
        try:
            if ref is None:
                if name in BUILTINS or self.registry.resolve(name):
                    raise OutOfScope(f"Tool '{name}' is not in this agent's tool scope.")
                raise UnknownTool(f"Tool '{name}' not found.")
            if not isinstance(args, dict):
                raise ArgValidation([("args", "must be a document")])
            if ref.kind == "builtin":
                builtin = BUILTINS[ref.name]
                diags = check_args(builtin.params, args)
                if diags:
                    raise ArgValidation(diags)
                out = builtin.handler(self, ctx, args)
            else:
                out = self.tools.invoke(ref.tool_id or "", args, "sync")
        except KernelError as exc:
            doc = exc.to_response()
            if isinstance(exc, UnknownTool):
                doc["available_tools"] = sorted(scope)
            return doc, None, True
        if isinstance(out, InvocationHandle):
            return {"status": "running", "handle_id": out.handle_id, "state": out.state.value}, None, False
        if isinstance(out, ToolResult):
            return out.to_dict(), out.raw if out.truncated else None, out.exit_status != 0
        return out, None, False

    # -- persistence --------------------------------------------------

    def save_ltm(self) -> None:
        if self.config.ltm_path:
            self.ltm.export_jsonl(self.config.ltm_path)

    def shutdown(self) -> None:
        self.sandboxes.shutdown()


# -- built-in tool handlers -------------------------------------------


def _create_agent(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    try:
        spec = AgentSpec.from_dict(args)
    except ValueError as exc:
        raise ArgValidation([("agent_name", str(exc))]) from exc
    name = k.runtime.create_agent(ctx.run_id, spec)
    entry = k.runtime.pool.get(name)
    return {
        "status": "success",
        "agent_name": name,
        "tools": [r.name for r in entry.scope],
        "message": f"Agent '{name}' created and added to the agent pool.",
    }


def _list_agents(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    return k.runtime.list_agents(args.get("filter"))


def _task_text(args: dict[str, Any]) -> str:
    if "task_message" in args:
        return str(args["task_message"])
    instructions = args.get("instructions", "")
    if isinstance(instructions, list):
        return "\n".join(str(x) for x in instructions)
    return str(instructions)


def _call_agent(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    response = k.runtime.call_agent(ctx.run_id, args["agent_name"], _task_text(args), parent_event=ctx.event_id)
    return response.to_dict()


def _run_ensemble(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    members = []
    for m in args["members"]:
        if isinstance(m, dict):
            members.append((str(m["agent_name"]), str(m.get("model_name", "inherit"))))
        elif isinstance(m, str):
            members.append((m, "inherit"))
        else:
            members.append((str(m[0]), str(m[1]) if len(m) > 1 else "inherit"))
    try:
        request = EnsembleRequest(args["task"], tuple(members))
    except ValueError as exc:
        raise ArgValidation([("members", str(exc))]) from exc
    return k.runtime.run_ensemble(ctx.run_id, request, parent_event=ctx.event_id).to_dict()


def _post_message(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    if ctx.instance.board_id is None:
        raise OutOfScope("post_message is only available inside an ensemble")
    seq = k.boards.post_message(ctx.instance.board_id, ctx.run_id, args["text"])
    return {"status": "success", "seq": seq}


def _search_tools(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    hits = k.registry.search_tools(args.get("keyword", ""))
    return {"total": len(hits), "tools": [{"tool_id": t, "description": d} for t, d in hits]}


def _expand_category(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    return k.registry.expand_category(args["path"])


def _load_root_index(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    return {"categories": [c.to_dict() for c in k.registry.load_root_index()]}


def _describe_tool(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    return k.registry.describe_tool(args["tool_id"]).to_dict()


def _create_tool(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    tool_id = k.registry.create_tool(args["category"], args["manifest"], args["implementation"])
    ctx.instance.add_tool(ToolRef("registry", tool_id.rsplit("/", 1)[-1], tool_id))
    return {"status": "success", "tool_id": tool_id}


def _modify_tool(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    k.registry.modify_tool(args["tool_id"], args.get("manifest"), args.get("implementation"))
    return {"status": "success", "tool_id": args["tool_id"]}


def _run_terminal_command(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> Any:
    mode = "background" if args.get("background") else "sync"
    return k.tools.run_command(args["command"], args.get("timeout_seconds", 60), mode)


def _poll(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    return {"handle_id": args["handle_id"], "state": k.sandboxes.poll(args["handle_id"]).value}


def _fetch(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> Any:
    return ToolResult.from_exec(k.sandboxes.fetch_result(args["handle_id"]), k.config.truncation_limit_bytes)


def _terminate(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    k.sandboxes.terminate(args["handle_id"])
    return {"handle_id": args["handle_id"], "state": k.sandboxes.poll(args["handle_id"]).value}


def _list_agent_runs(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    runs = k.stm.list_agent_runs(args.get("name"), args.get("status"))
    return {"total": len(runs), "runs": runs}


def _inspect_events(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    events = k.stm.inspect_events(args["run_id"], args.get("start"), args.get("end"))
    return {"total": len(events), "events": events}


def _recover_raw(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    raw = k.stm.recover_raw(args["event_id"])
    return {"event_id": args["event_id"], "size": len(raw), "content": raw.decode("utf-8", errors="replace")}


def _graph_query(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    bindings = k.stm.graph_query(args["pattern"])
    return {"total": len(bindings), "bindings": bindings}


def _create_node(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    nid = k.ltm.create_node(args["node_type"], args["label"], args["content"])
    return {"status": "success", "node_id": nid, "node_type": args["node_type"], "label": args["label"]}


def _create_edge(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    eid = k.ltm.create_edge(args["src"], args["dst"], args["edge_type"])
    return {"status": "success", "edge_id": eid}


def _list_schema(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    return k.ltm.list_schema().to_dict()


def _search_nodes(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    try:
        query = RetrievalQuery(args["node_type"], args["query_label"], args.get("top_n", 5))
    except ValueError as exc:
        raise ArgValidation([("top_n", str(exc))]) from exc
    results = k.ltm.search_nodes(query)
    return {"found": bool(results), "total_found": len(results), "results": results}


def _grep_nodes(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    nodes = [n.to_dict() for n in k.ltm.grep_nodes(args["pattern"])]
    return {"total": len(nodes), "nodes": nodes}


def _update_node(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    if "label" not in args and "content" not in args:
        raise ArgValidation([("label", "give a new label or new content")])
    k.ltm.update_node(args["node_id"], args.get("label"), args.get("content"))
    return {"status": "success", "node_id": args["node_id"]}


def _delete_node(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    removed = k.ltm.delete_node(args["node_id"])
    return {"status": "success", "node_id": args["node_id"], "edges_removed": removed}


def _search_memory(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    if k.memory_agent is None:
        raise UnknownTool("Tool 'search_memory' not found.")
    answer = k.memory_agent.handle_query(MemoryQuery(ctx.run_id, args["query"]), ctx.instance.backend_id)
    return answer.to_dict()


def _save_memory(k: Kernel, ctx: ToolContext, args: dict[str, Any]) -> dict[str, Any]:
    if k.memory_agent is None:
        raise UnknownTool("Tool 'save_memory' not found.")
    decision = k.memory_agent.dedup_store(
        {"node_type": args["node_type"], "label": args["label"], "content": args["content"]},
        ctx.instance.backend_id,
        ctx.run_id,
    )
    return {"status": "success", **decision.to_dict()}


_AGENT_SPEC_PARAMS = (
    _p("agent_name", "string"),
    _p("instruction", "string", False, "system instruction for the sub-agent"),
    _p("description", "string", False),
    _p("role", "string", False, "alias of description"),
    _p("model_name", "string", False, "backend id or 'inherit'"),
    _p("tools_list", "list", False, "tool names in your scope or registry paths"),
    _p("tools", "list", False, "alias of tools_list"),
    _p("initial_memory", "string", False, "'empty' or 'parent_summary'"),
)

BUILTINS: dict[str, Builtin] = {
    b.name: b
    for b in [
        Builtin("create_agent", "Create a sub-agent and store it in the agent pool.", _AGENT_SPEC_PARAMS, _create_agent),
        Builtin("list_agents", "List or search pooled sub-agents by name or description.",
                (_p("filter", "string", False),), _list_agents),
        Builtin("list_active_agents", "Alias of list_agents.", (_p("filter", "string", False),), _list_agents),
        Builtin("call_agent", "Run a pooled sub-agent on a task and return its response.",
                (_p("agent_name", "string"), _p("task_message", "string", False),
                 _p("instructions", "list", False), _p("history_passed_in", "boolean", False)), _call_agent),
        Builtin("run_ensemble", "Run several pooled agents in parallel on one task and merge their answers.",
                (_p("task", "string"), _p("members", "list", description="[{agent_name, model_name}]")), _run_ensemble),
        Builtin("post_message", "Post a message to the ensemble's shared board.", (_p("text", "string"),), _post_message),
        Builtin("load_root_index", "Show the top-level tool categories.", (), _load_root_index),
        Builtin("search_tools", "Keyword search over the tool registry.", (_p("keyword", "string", False),), _search_tools),
        Builtin("expand_category", "List sub-categories and tools of a registry category.",
                (_p("path", "string"),), _expand_category),
        Builtin("describe_tool", "Show the full manifest of a registry tool.", (_p("tool_id", "string"),), _describe_tool),
        Builtin("create_tool", "Write and register a new tool (manifest + implementation).",
                (_p("category", "string"), _p("manifest", "document"), _p("implementation", "string")), _create_tool),
        Builtin("modify_tool", "Replace a tool's manifest and/or implementation.",
                (_p("tool_id", "string"), _p("manifest", "document", False), _p("implementation", "string", False)),
                _modify_tool),
        Builtin("run_terminal_command", "Run a shell command in the default sandbox.",
                (_p("command", "string"), _p("timeout_seconds", "number", False), _p("background", "boolean", False)),
                _run_terminal_command),
        Builtin("poll_invocation", "Current state of a background invocation.", (_p("handle_id", "string"),), _poll),
        Builtin("fetch_result", "Result of a finished background invocation.", (_p("handle_id", "string"),), _fetch),
        Builtin("terminate_invocation", "Stop a background invocation.", (_p("handle_id", "string"),), _terminate),
        Builtin("list_agent_runs", "List agent executions recorded in short-term memory.",
                (_p("name", "string", False), _p("status", "string", False)), _list_agent_runs),
        Builtin("inspect_events", "Events of one agent run, optionally an index range.",
                (_p("run_id", "integer"), _p("start", "integer", False), _p("end", "integer", False)), _inspect_events),
        Builtin("recover_raw", "Full untruncated output of a tool-call event.", (_p("event_id", "integer"),), _recover_raw),
        Builtin("graph_query", "Structured pattern query over the short-term graph.",
                (_p("pattern", "document"),), _graph_query),
        Builtin("create_node", "Add a node to long-term memory.",
                (_p("node_type", "string"), _p("label", "string"), _p("content", "string")), _create_node),
        Builtin("create_edge", "Add a typed directed edge between long-term nodes.",
                (_p("src", "integer"), _p("dst", "integer"), _p("edge_type", "string")), _create_edge),
        Builtin("list_schema", "List long-term node and edge types.", (), _list_schema),
        Builtin("search_nodes", "Top-N long-term nodes of a type by label similarity, with one-hop subgraphs.",
                (_p("node_type", "string"), _p("query_label", "string"), _p("top_n", "integer", False)), _search_nodes),
        Builtin("grep_nodes", "Regex lookup over long-term node labels.", (_p("pattern", "string"),), _grep_nodes),
        Builtin("update_node", "Change a long-term node's label and/or content.",
                (_p("node_id", "integer"), _p("label", "string", False), _p("content", "string", False)), _update_node),
        Builtin("delete_node", "Delete a long-term node and its edges.", (_p("node_id", "integer"),), _delete_node),
        Builtin("search_memory", "Ask the memory agent a question about past work.",
                (_p("query", "string"),), _search_memory),
        Builtin("save_memory", "Persist a finding to long-term memory (deduplicated).",
                (_p("node_type", "string"), _p("label", "string"), _p("content", "string")), _save_memory),
    ]
}


def build_kernel(config: KernelConfig, **kwargs: Any) -> Kernel:
    return Kernel(config, **kwargs)


__all__ = ["BUILTINS", "Builtin", "Kernel", "build_kernel", "AgentInstance"]

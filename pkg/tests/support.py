"""Shared fixtures: a security-toolkit registry, transcript builders, kernel factory."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from agentkernel.config import KernelConfig
from agentkernel.gateway import ModelResponse, ScriptedBackend, TranscriptStep
from agentkernel.kernel import Kernel

# Prints its JSON argument back, wrapped; used for every fixture tool.
ECHO_IMPL = """\
import json, sys
args = json.loads(sys.argv[1]) if len(sys.argv) > 1 else {}
print(json.dumps({"tool": %r, "args": args}, sort_keys=True))
"""

SLEEP_IMPL = """\
import json, sys, time
args = json.loads(sys.argv[1])
time.sleep(float(args.get("seconds", 1)))
print("slept")
"""

BIG_IMPL = """\
import json, sys
args = json.loads(sys.argv[1])
sys.stdout.write(args.get("fill", "a") * int(args["size"]))
"""

CATEGORIES = {
    "static": "Static analysis: code property graphs, call graphs, slicing",
    "static/code_analysis": "Code property graph query, call graph analysis, dataflow slicing, code search",
    "dynamic": "Dynamic analysis: fuzzing, coverage, debugging",
    "dynamic/fuzzing": "Customizable seed generation, mutation, and scoring",
    "dynamic/coverage": "Query test case coverage, generate detailed reports",
    "dynamic/debugger": "Set breakpoints, inspect program states, trace program execution",
    "util": "General utilities",
}

TOOLS: dict[str, list[tuple[str, str, list[dict[str, Any]]]]] = {
    "static/code_analysis": [
        ("query_cpg", "Run a code property graph query", [{"param_name": "query", "param_type": "string"}]),
        ("call_graph", "Callers and callees of a function", [{"param_name": "function", "param_type": "string"}]),
    ],
    "dynamic/fuzzing": [
        ("run_fuzzer", "Run a fuzzing campaign with custom seeds", [{"param_name": "target", "param_type": "string"}]),
    ],
    "dynamic/coverage": [
        ("coverage_report", "Generate a coverage report for a test case", [{"param_name": "input", "param_type": "string"}]),
    ],
    "dynamic/debugger": [
        ("set_file", "Load a binary into the debugger", [{"param_name": "path", "param_type": "string"}]),
        ("set_input_file", "Set the program input file", [{"param_name": "path", "param_type": "string"}]),
        ("set_breakpoint", "Set breakpoints at functions or lines", [{"param_name": "location", "param_type": "string"}]),
        ("step_control", "Run, continue or step the debugged program", [{"param_name": "action", "param_type": "string"}]),
    ],
}


def manifest(name: str, description: str, interface: list[dict[str, Any]], **extra: Any) -> dict[str, Any]:
    doc = {
        "name": name,
        "description": description,
        "interface": interface,
        "dependencies": [],
        "environment": None,
        "entrypoint": "main.py",
        "timeout_seconds": 30,
        "background_default": False,
    }
    doc.update(extra)
    return doc


def write_tool(cat_dir: Path, doc: dict[str, Any], impl: str) -> None:
    tool_dir = cat_dir / doc["name"]
    tool_dir.mkdir(parents=True)
    (tool_dir / "tool.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    (tool_dir / doc["entrypoint"]).write_text(impl, encoding="utf-8")
    with open(cat_dir / "INDEX.md", "a", encoding="utf-8") as fh:
        fh.write(f"- {doc['name']}: {doc['description']}\n")


def build_registry(root: Path, extra_tools: int = 0) -> Path:
    """The toolkit fixture; ``extra_tools`` adds filler tools inside existing leaf categories."""
    root.mkdir(parents=True, exist_ok=True)
    for cat, summary in CATEGORIES.items():
        (root / cat).mkdir(parents=True, exist_ok=True)
        (root / cat / "INDEX.md").write_text(summary + "\n", encoding="utf-8")
    for cat, tools in TOOLS.items():
        for name, desc, iface in tools:
            write_tool(root / cat, manifest(name, desc, iface), ECHO_IMPL % name)
    write_tool(root / "util", manifest("echo", "Echo the arguments back", [
        {"param_name": "message", "param_type": "string"},
    ]), ECHO_IMPL % "echo")
    write_tool(root / "util", manifest("sleep", "Sleep for a number of seconds", [
        {"param_name": "seconds", "param_type": "number"},
    ], timeout_seconds=60), SLEEP_IMPL)
    write_tool(root / "util", manifest("big_output", "Print a large deterministic output", [
        {"param_name": "size", "param_type": "integer"},
        {"param_name": "fill", "param_type": "string", "required": False},
    ]), BIG_IMPL)
    leaves = list(TOOLS)
    for i in range(extra_tools):
        cat = leaves[i % len(leaves)]
        name = f"filler_{i:03d}"
        write_tool(root / cat, manifest(name, f"Filler tool number {i}", []), ECHO_IMPL % name)
    return root


# -- transcripts ------------------------------------------------------------


def call(tool: str, match: str | None = None, **args: Any) -> TranscriptStep:
    return TranscriptStep(ModelResponse.of_call(tool, args), match)


def say(text: str, match: str | None = None) -> TranscriptStep:
    return TranscriptStep(ModelResponse.of_text(text), match)


def scripted(*steps: TranscriptStep) -> ScriptedBackend:
    return ScriptedBackend(list(steps))


def transcript_doc(*steps: TranscriptStep) -> dict[str, Any]:
    out = []
    for s in steps:
        entry: dict[str, Any] = {"response": s.response.to_dict()}
        if s.match is not None:
            entry["match"] = s.match
        out.append(entry)
    return {"steps": out}


# -- kernels ----------------------------------------------------------------


def make_kernel(
    tmp_path: Path,
    backends: dict[str, ScriptedBackend] | None = None,
    *,
    extra_tools: int = 0,
    install_memory_agent: bool = True,
    **config: Any,
) -> Kernel:
    registry = tmp_path / "registry"
    if not registry.exists():
        build_registry(registry, extra_tools)
    workspace = tmp_path / "workspace"
    workspace.mkdir(exist_ok=True)
    cfg = KernelConfig(
        registry_root=str(registry),
        workspace=str(workspace),
        state_dir=str(tmp_path / "state"),
        **config,
    ).validate()
    kernel = Kernel(cfg, install_memory_agent=install_memory_agent)
    for bid, backend in (backends or {}).items():
        kernel.register_backend(bid, backend)
    return kernel


ROOT_TOOLS = (
    "create_agent",
    "list_agents",
    "list_active_agents",
    "call_agent",
    "run_ensemble",
    "search_tools",
    "expand_category",
    "describe_tool",
    "create_tool",
    "run_terminal_command",
    "search_memory",
    "save_memory",
    "dynamic/debugger",
)


# -- long-term memory fixture -------------------------------------------------

# Findings an agent might persist while fixing a collection-name validation bug.
MEMORY_FIXTURE = [
    ("code_understanding", "Logic for Ansible collection validation and galaxy.yml checks",
     "### Relevant Code\n`/app/lib/ansible/galaxy/collection.py`: validate_collection_name ..."),
    ("search_result", "Search for 'validate|keyword'",
     "Search results for 'validate|keyword' in Ansible Galaxy code ..."),
    ("file", "/app/lib/ansible/galaxy/data/collections_galaxy_meta.yml",
     "This file defines the schema for Ansible Galaxy collection metadata (galaxy.yml) ..."),
    ("file", "/app/lib/ansible/galaxy/collection.py",
     "Contains validate_collection_name and build_collection."),
    ("error", "Missing PyYAML dependency for Ansible collection validation",
     "ModuleNotFoundError: No module named 'yaml' when importing validate_collection_name."),
]

RECALL_QUERY = "search the collection name validation mechanism"


def seed_memory(ltm) -> list[int]:
    return [ltm.create_node(t, label, content) for t, label, content in MEMORY_FIXTURE]


def memory_search_steps(query: str = RECALL_QUERY) -> list[TranscriptStep]:
    """Memory-agent loop over the fixture: one search per node type, then a reply and the aggregate."""
    return [
        call("search_nodes", node_type="code_understanding", query_label=query, top_n=5),
        call("search_nodes", node_type="search_result", query_label=query, top_n=5),
        call("search_nodes", node_type="file", query_label=query, top_n=5),
        call("search_nodes", node_type="error", query_label=query, top_n=5),
        say("searched every node type"),
        say("Validation lives in validate_collection_name; galaxy.yml schema constrains namespace."),
    ]


# -- summarization fixture ----------------------------------------------------


class InstructionRouter:
    """Backend that sends requests with a given system instruction to a separate responder.

    Lets a transcript drive the agent loop while summarization completions,
    whose timing depends on the threshold, are answered out of band.
    """

    def __init__(self, default: ScriptedBackend, routes: dict[str, Any]) -> None:
        self.default = default
        self.routes = routes
        self.routed: list[Any] = []

    def complete(self, request):
        responder = self.routes.get(request.system_instruction)
        if responder is None:
            return self.default.complete(request)
        self.routed.append(request)
        return ModelResponse.of_text(responder(request))


BIG_OUTPUT_BYTES = 1 << 20
SMALL_OUTPUT_BYTES = 4000


def summarization_steps(small_events: int = 10) -> list[TranscriptStep]:
    """One 1 MiB tool output followed by ``small_events`` 4 KB outputs, then a final reply."""
    steps = [call("big_output", size=BIG_OUTPUT_BYTES)]
    steps += [
        call("run_terminal_command", command=f"head -c {SMALL_OUTPUT_BYTES} /dev/zero | tr '\\0' {chr(98 + i % 20)}")
        for i in range(small_events)
    ]
    steps.append(say("finished"))
    return steps


SUMMARIZATION_TOOLS = ("run_terminal_command", "util/big_output")

"""Operator command line: run a root agent and inspect pool, registry and memory.

Every subcommand goes through :func:`dispatch`, which returns an exit code and
a report instead of exiting, so it can be driven from tests.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Any

from .config import KernelConfig, config_from_dict, load_config
from .errors import KernelError
from .gateway import ScriptedBackend
from .kernel import Kernel
from .memory_agent import MemoryQuery
from .topology import AgentSpec

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2

TRANSCRIPT_BACKEND = "transcript"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> Any:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")

    def print_help(self, file: Any = None) -> None:
        # --help lands here; surface it as a report instead of printing and exiting.
        raise _HelpShown(self.format_help())

    def exit(self, status: int = 0, message: str | None = None) -> Any:  # type: ignore[override]
        raise UsageError(message or self.format_help()) if status else _HelpShown(message or "")


class _HelpShown(Exception):
    pass


def build_parser() -> _Parser:
    # Shared flags are accepted before or after the subcommand. SUPPRESS keeps a
    # subparser from overwriting a value given at the top level.
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--registry", help="tool registry root (overrides config)")
    common.add_argument("--workspace", help="shared workspace directory (overrides config)")
    common.add_argument("--ltm", help="long-term memory JSONL file (overrides config)")
    common.add_argument("--transcript", help="scripted backend transcript")

    parser = _Parser(prog="agentkernel", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="run a root agent on a task")
    run.add_argument("--spec", required=True, help="agent spec JSON file")
    run.add_argument("--task", required=True)
    run.add_argument("--max-steps", type=int)

    agents = sub.add_parser("agents", parents=[common]).add_subparsers(dest="action", required=True)
    agents_list = agents.add_parser("list", parents=[common])
    agents_list.add_argument("--filter")

    tools = sub.add_parser("tools", parents=[common]).add_subparsers(dest="action", required=True)
    tools.add_parser("search", parents=[common]).add_argument("keyword")
    tools.add_parser("show", parents=[common]).add_argument("path")

    mem = sub.add_parser("mem", parents=[common]).add_subparsers(dest="action", required=True)
    mem.add_parser("query", parents=[common]).add_argument("text")
    export_stm = mem.add_parser("export-stm", parents=[common])
    export_stm.add_argument("run", type=int)
    export_stm.add_argument("file")
    mem.add_parser("export-ltm", parents=[common]).add_argument("file")
    return parser


def _flag(ns: argparse.Namespace, name: str) -> Any:
    return getattr(ns, name, None)


def _config(ns: argparse.Namespace) -> KernelConfig:
    overrides = {"registry_root": _flag(ns, "registry"), "workspace": _flag(ns, "workspace"), "ltm_path": _flag(ns, "ltm")}
    if _flag(ns, "config"):
        return load_config(ns.config, overrides)
    doc: dict[str, Any] = {
        "registry_root": _flag(ns, "registry") or tempfile.mkdtemp(prefix="agentkernel-registry-"),
        "workspace": _flag(ns, "workspace") or tempfile.mkdtemp(prefix="agentkernel-workspace-"),
    }
    return config_from_dict(doc, {"ltm_path": _flag(ns, "ltm")})


def _kernel(ns: argparse.Namespace) -> Kernel:
    kernel = Kernel(_config(ns))
    if _flag(ns, "transcript"):
        kernel.register_backend(TRANSCRIPT_BACKEND, ScriptedBackend.from_file(ns.transcript))
        kernel.default_backend = TRANSCRIPT_BACKEND
    return kernel


def _stm_dir(kernel: Kernel) -> Path:
    return Path(kernel.config.workspace) / ".stm"


def _cmd_run(kernel: Kernel, ns: argparse.Namespace) -> str:
    try:
        doc = json.loads(Path(ns.spec).read_text(encoding="utf-8"))
        spec = AgentSpec.from_dict(doc)
    except (OSError, json.JSONDecodeError, ValueError, AttributeError) as exc:
        raise KernelError(f"cannot load agent spec {ns.spec}: {exc}") from exc
    try:
        result = kernel.run_root(spec, ns.task, ns.max_steps)
    finally:
        # Persist the trace so later invocations can export it.
        _stm_dir(kernel).mkdir(parents=True, exist_ok=True)
        for run in kernel.stm.list_agent_runs():
            if run["parent_run"] is None:
                kernel.stm.export_jsonl(_stm_dir(kernel) / f"{run['run_id']}.jsonl", run["run_id"])
        kernel.save_ltm()
    return f"run {result.run_id} finished after {result.event_count} events\n{result.final_text}"


def _cmd_agents(kernel: Kernel, ns: argparse.Namespace) -> str:
    listing = kernel.list_agents(ns.filter)
    lines = [listing["message"]]
    lines += [f"{a['agent_name']}\t{a['description']}" for a in listing["agents"]]
    return "\n".join(lines)


def _cmd_tools(kernel: Kernel, ns: argparse.Namespace) -> str:
    if ns.action == "search":
        hits = kernel.registry.search_tools(ns.keyword)
        if not hits:
            return f"no tools match {ns.keyword!r}"
        return "\n".join(f"{tool_id}\t{desc}" for tool_id, desc in hits)
    if kernel.registry.resolve(ns.path) == [ns.path]:
        return json.dumps(kernel.registry.describe_tool(ns.path).to_dict(), indent=2, sort_keys=True)
    return json.dumps(kernel.registry.expand_category(ns.path), indent=2, sort_keys=True)


def _cmd_mem(kernel: Kernel, ns: argparse.Namespace) -> str:
    if ns.action == "query":
        if kernel.memory_agent is None or kernel.default_backend is None:
            raise KernelError("mem query needs a backend; pass --transcript or configure one")
        answer = kernel.memory_agent.handle_query(MemoryQuery(None, ns.text))
        kernel.save_ltm()
        return json.dumps(answer.to_dict(), indent=2, sort_keys=True, default=str)
    if ns.action == "export-stm":
        saved = _stm_dir(kernel) / f"{ns.run}.jsonl"
        if ns.run in {r["run_id"] for r in kernel.stm.list_agent_runs()}:
            count = kernel.stm.export_jsonl(ns.file, ns.run)
        elif saved.is_file():
            shutil.copyfile(saved, ns.file)
            count = sum(1 for _ in saved.open(encoding="utf-8"))
        else:
            raise KernelError(f"no recorded run {ns.run} in {_stm_dir(kernel)}")
        return f"wrote {count} records to {ns.file}"
    count = kernel.ltm.export_jsonl(ns.file)
    return f"wrote {count} records to {ns.file}"


_COMMANDS = {"run": _cmd_run, "agents": _cmd_agents, "tools": _cmd_tools, "mem": _cmd_mem}


def dispatch(argv: list[str]) -> tuple[int, str]:
    """Parse and execute one command line; never raises for bad input."""
    try:
        ns = build_parser().parse_args(list(argv))
    except _HelpShown as shown:
        return EXIT_OK, str(shown)
    except UsageError as exc:
        return EXIT_USAGE, str(exc)
    kernel = None
    try:
        kernel = _kernel(ns)
        return EXIT_OK, _COMMANDS[ns.command](kernel, ns)
    except KernelError as exc:
        return EXIT_DOMAIN, f"error: {exc}"
    except OSError as exc:
        return EXIT_DOMAIN, f"error: {exc}"
    finally:
        if kernel is not None:
            kernel.shutdown()


def main(argv: list[str] | None = None) -> int:
    code, report = dispatch(sys.argv[1:] if argv is None else argv)
    stream = sys.stdout if code == EXIT_OK else sys.stderr
    print(report, file=stream)
    return code


if __name__ == "__main__":
    raise SystemExit(main())

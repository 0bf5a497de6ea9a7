"""File-system tool registry.

Layout::

    <root>/INDEX.md                       optional root summary
    <root>/<category>/INDEX.md            first line = category summary,
                                          then "- name: description" entries
    <root>/<category>/<tool>/tool.json    manifest
    <root>/<category>/<tool>/<entrypoint> implementation
    <root>/.envs/<env_id>.json            environment specs referenced by tools

Only the index files are read while browsing; ``tool.json`` is read when a
tool is searched, described or invoked.
"""

from __future__ import annotations

import json
import os
import re
import shlex
import shutil
import sys
import tempfile
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import (
    ArgValidation,
    DuplicateTool,
    InvalidManifest,
    MalformedRegistry,
    UnknownCategory,
    UnknownEnvironment,
    UnknownTool,
)
from .sandbox import EnvSpec, ExecResult, InvocationHandle, SandboxRuntime

MANIFEST = "tool.json"
INDEX = "INDEX.md"
ENV_DIR = ".envs"
PARAM_TYPES = ("string", "integer", "number", "boolean", "list", "document")
MANIFEST_FIELDS = (
    "name",
    "description",
    "interface",
    "dependencies",
    "environment",
    "entrypoint",
    "timeout_seconds",
    "background_default",
)
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")
_ENTRY = re.compile(r"^\s*-\s+([^:]+?)\s*:\s*(.*)$")


@dataclass(frozen=True)
class ParamSpec:
    param_name: str
    param_type: str
    required: bool = True
    description: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "param_name": self.param_name,
            "param_type": self.param_type,
            "required": self.required,
            "description": self.description,
        }


@dataclass(frozen=True)
class ToolManifest:
    name: str
    description: str
    interface: tuple[ParamSpec, ...] = ()
    dependencies: tuple[str, ...] = ()
    environment: str | None = None
    entrypoint: str = "main.py"
    timeout_seconds: float = 30.0
    background_default: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "interface": [p.to_dict() for p in self.interface],
            "dependencies": list(self.dependencies),
            "environment": self.environment,
            "entrypoint": self.entrypoint,
            "timeout_seconds": self.timeout_seconds,
            "background_default": self.background_default,
        }

    def parameters_schema(self) -> dict[str, Any]:
        return {
            "type": "object",
            "properties": {
                p.param_name: {"type": p.param_type, "description": p.description}
                for p in self.interface
            },
            "required": [p.param_name for p in self.interface if p.required],
        }


def validate_manifest(doc: Any, tool_dir: Path | None = None, env_ids: set[str] | None = None) -> ToolManifest:
    """Check a raw manifest document and build a :class:`ToolManifest`.

    All problems are collected and raised together as :class:`InvalidManifest`.
    ``tool_dir`` enables the entrypoint-exists check; ``env_ids`` the
    environment-reference check.
    """
    diags: list[tuple[str, str]] = []
    if not isinstance(doc, dict):
        raise InvalidManifest([("manifest", "must be a JSON object")])
    for key in doc:
        if key not in MANIFEST_FIELDS:
            diags.append((key, "unknown field"))

    name = doc.get("name")
    if not isinstance(name, str) or not _IDENT.match(name):
        diags.append(("name", "must be an identifier"))
    description = doc.get("description")
    if not isinstance(description, str):
        diags.append(("description", "must be text"))

    params: list[ParamSpec] = []
    interface = doc.get("interface", [])
    if not isinstance(interface, list):
        diags.append(("interface", "must be a list"))
        interface = []
    seen: set[str] = set()
    for i, raw in enumerate(interface):
        where = f"interface[{i}]"
        if not isinstance(raw, dict):
            diags.append((where, "must be an object"))
            continue
        pname = raw.get("param_name")
        if not isinstance(pname, str) or not _IDENT.match(pname):
            diags.append((f"{where}.param_name", "must be an identifier"))
            continue
        if pname in seen:
            diags.append((pname, f"duplicate param name {pname!r}"))
        seen.add(pname)
        ptype = raw.get("param_type")
        if ptype not in PARAM_TYPES:
            diags.append((pname, f"param_type must be one of {', '.join(PARAM_TYPES)}"))
        required = raw.get("required", True)
        if not isinstance(required, bool):
            diags.append((pname, "required must be a boolean"))
        pdesc = raw.get("description", "")
        if not isinstance(pdesc, str):
            diags.append((pname, "description must be text"))
        params.append(ParamSpec(pname, str(ptype), bool(required), str(pdesc)))

    deps = doc.get("dependencies", [])
    if not isinstance(deps, list) or not all(isinstance(d, str) for d in deps):
        diags.append(("dependencies", "must be a list of text"))
        deps = []

    env = doc.get("environment")
    if env is not None:
        if not isinstance(env, str) or not _IDENT.match(env):
            diags.append(("environment", "must be an environment id or null"))
        elif env_ids is not None and env not in env_ids:
            diags.append(("environment", f"unknown environment {env!r}"))

    entry = doc.get("entrypoint")
    if not isinstance(entry, str) or not entry or os.path.isabs(entry) or ".." in Path(entry).parts:
        diags.append(("entrypoint", "must be a relative path inside the tool directory"))
    elif tool_dir is not None and not (tool_dir / entry).is_file():
        diags.append(("entrypoint", f"file {entry!r} does not exist beside the manifest"))

    timeout = doc.get("timeout_seconds")
    if isinstance(timeout, bool) or not isinstance(timeout, (int, float)) or not timeout > 0:
        diags.append(("timeout_seconds", "must be a positive number"))
    background = doc.get("background_default", False)
    if not isinstance(background, bool):
        diags.append(("background_default", "must be a boolean"))

    if diags:
        raise InvalidManifest(diags)
    return ToolManifest(
        name=name,
        description=description,
        interface=tuple(params),
        dependencies=tuple(deps),
        environment=env,
        entrypoint=entry,
        timeout_seconds=float(timeout) if isinstance(timeout, float) else timeout,
        background_default=background,
    )


_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
    "document": lambda v: isinstance(v, dict),
}


def check_args(
    manifest: ToolManifest | tuple[ParamSpec, ...], args: dict[str, Any]
) -> list[tuple[str, str]]:
    """Structural argument check: required params present, declared types match."""
    params = manifest.interface if isinstance(manifest, ToolManifest) else manifest
    diags = []
    if not isinstance(args, dict):
        return [("args", "must be a document")]
    declared = {p.param_name: p for p in params}
    for p in params:
        if p.param_name not in args:
            if p.required:
                diags.append((p.param_name, "missing required parameter"))
        elif not _TYPE_CHECKS[p.param_type](args[p.param_name]):
            diags.append((p.param_name, f"expected {p.param_type}"))
    for key in args:
        if key not in declared:
            diags.append((key, "unexpected parameter"))
    return diags


@dataclass(frozen=True)
class CategoryIndex:
    path: str
    summary: str
    child_categories: tuple[str, ...] = ()
    tool_names: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "summary": self.summary,
            "child_categories": list(self.child_categories),
            "tool_names": list(self.tool_names),
        }


def render_root_index(categories: list[CategoryIndex]) -> str:
    """Compact text form of the top-level index, as shown to an agent."""
    return "\n".join(
        f"{c.path}/: {c.summary} [subcategories: {', '.join(c.child_categories) or '-'}]"
        for c in categories
    )


@dataclass
class RegistryStats:
    manifests_read: int = 0
    index_reads: int = 0


@dataclass
class _Entries:
    summary: str
    entries: dict[str, str] = field(default_factory=dict)


class ToolRegistry:
    """Browse, search, validate and mutate a registry directory."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        if not self.root.is_dir():
            raise MalformedRegistry(f"registry root {self.root} is not a directory")
        self.stats = RegistryStats()
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    # -- path helpers -------------------------------------------------

    def _abs(self, rel: str) -> Path:
        rel = rel.strip("/")
        parts = Path(rel).parts if rel else ()
        if any(p in ("..", ".") or p.startswith(".") for p in parts):
            raise UnknownCategory(f"bad registry path {rel!r}")
        return self.root.joinpath(*parts)

    def _rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    @staticmethod
    def _is_tool_dir(path: Path) -> bool:
        return (path / MANIFEST).is_file()

    def _children(self, path: Path) -> list[Path]:
        return sorted(p for p in path.iterdir() if p.is_dir() and not p.name.startswith((".", "_")))

    def _read_index(self, path: Path) -> _Entries:
        index = path / INDEX
        if not index.is_file():
            raise MalformedRegistry(f"directory {self._rel(path) or '.'} has no {INDEX} summary")
        self.stats.index_reads += 1
        lines = index.read_text(encoding="utf-8").splitlines()
        summary = lines[0].lstrip("# ").strip() if lines else ""
        if not summary:
            raise MalformedRegistry(f"{self._rel(index)} has an empty summary line")
        entries = {}
        for line in lines[1:]:
            m = _ENTRY.match(line)
            if m:
                entries[m.group(1)] = m.group(2).strip()
        return _Entries(summary, entries)

    def _read_manifest(self, tool_dir: Path) -> Any:
        self.stats.manifests_read += 1
        try:
            return json.loads((tool_dir / MANIFEST).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InvalidManifest([("manifest", f"not valid JSON: {exc}")]) from exc

    def _category_index(self, path: Path) -> CategoryIndex:
        entries = self._read_index(path)
        cats, tools = [], []
        for child in self._children(path):
            (tools if self._is_tool_dir(child) else cats).append(child.name)
        return CategoryIndex(self._rel(path), entries.summary, tuple(cats), tuple(tools))

    # -- browsing -----------------------------------------------------

    def load_root_index(self) -> list[CategoryIndex]:
        """Top-level categories only; no manifest is read."""
        out = []
        for child in self._children(self.root):
            if self._is_tool_dir(child):
                raise MalformedRegistry(f"tool {child.name!r} sits at the registry root")
            out.append(self._category_index(child))
        return out

    def expand_category(self, path: str) -> dict[str, Any]:
        target = self._abs(path)
        if not path.strip("/") or not target.is_dir() or self._is_tool_dir(target):
            raise UnknownCategory(f"no category {path!r}")
        entries = self._read_index(target)
        cats, tools = [], []
        for child in self._children(target):
            if self._is_tool_dir(child):
                tools.append({"name": child.name, "description": entries.entries.get(child.name, "")})
            else:
                cats.append({"name": child.name, "summary": self._read_index(child).summary})
        return {
            "path": self._rel(target),
            "summary": entries.summary,
            "child_categories": cats,
            "tool_summaries": tools,
        }

    def walk_tools(self) -> list[str]:
        """Every tool id in the registry, sorted."""
        out = []
        for dirpath, dirnames, _ in os.walk(self.root):
            dirnames[:] = sorted(d for d in dirnames if not d.startswith((".", "_")))
            here = Path(dirpath)
            if here != self.root and self._is_tool_dir(here):
                out.append(self._rel(here))
                dirnames[:] = []
        return sorted(out)

    def search_tools(self, keyword: str) -> list[tuple[str, str]]:
        """Case-insensitive substring search over names, descriptions and category summaries."""
        kw = keyword.lower()
        summaries: dict[Path, str] = {}
        hits = []
        for tool_id in self.walk_tools():
            tool_dir = self._abs(tool_id)
            doc = self._read_manifest(tool_dir)
            desc = doc.get("description", "") if isinstance(doc, dict) else ""
            name = doc.get("name", tool_dir.name) if isinstance(doc, dict) else tool_dir.name
            haystack = [tool_id, str(name), str(desc)]
            parent = tool_dir.parent
            while parent != self.root:
                if parent not in summaries:
                    try:
                        summaries[parent] = self._read_index(parent).summary
                    except MalformedRegistry:
                        summaries[parent] = ""
                haystack.append(summaries[parent])
                parent = parent.parent
            if any(kw in h.lower() for h in haystack):
                hits.append((tool_id, str(desc)))
        return hits

    def resolve(self, ref: str) -> list[str]:
        """Tool ids named by ``ref``: a tool path, a category path (all tools beneath) or a bare unique name."""
        ref = ref.strip("/")
        try:
            target = self._abs(ref)
        except UnknownCategory:
            return []
        if ref and target.is_dir():
            if self._is_tool_dir(target):
                return [ref]
            prefix = ref + "/"
            return [t for t in self.walk_tools() if t.startswith(prefix)]
        named = [t for t in self.walk_tools() if t.rsplit("/", 1)[-1] == ref]
        return named if len(named) == 1 else []

    def env_ids(self) -> set[str]:
        env_dir = self.root / ENV_DIR
        if not env_dir.is_dir():
            return set()
        return {p.stem for p in env_dir.glob("*.json")}

    def environment(self, env_id: str) -> EnvSpec:
        path = self.root / ENV_DIR / f"{env_id}.json"
        if not path.is_file():
            raise UnknownEnvironment(f"no environment {env_id!r} in the registry")
        return EnvSpec.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def describe_tool(self, tool_id: str) -> ToolManifest:
        try:
            tool_dir = self._abs(tool_id)
        except UnknownCategory:
            raise UnknownTool(f"no tool {tool_id!r}") from None
        if not tool_id.strip("/") or not self._is_tool_dir(tool_dir):
            raise UnknownTool(f"no tool {tool_id!r}")
        manifest = validate_manifest(self._read_manifest(tool_dir), tool_dir, self.env_ids())
        if manifest.name != tool_dir.name:
            raise InvalidManifest([("name", f"{manifest.name!r} does not match directory {tool_dir.name!r}")])
        return manifest

    def entrypoint_path(self, tool_id: str) -> Path:
        manifest = self.describe_tool(tool_id)
        return self._abs(tool_id) / manifest.entrypoint

    # -- mutation -----------------------------------------------------

    def _category_lock(self, path: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks[path]

    def create_tool(
        self, target_category: str, manifest: ToolManifest | dict[str, Any], implementation: str
    ) -> str:
        """Write implementation + manifest under ``target_category`` and index the tool.

        Validation happens before anything touches the directory; the tool
        directory is staged and renamed into place so a failure leaves the
        registry unchanged.
        """
        category = target_category.strip("/")
        cat_dir = self._abs(category)
        if not category or not cat_dir.is_dir() or self._is_tool_dir(cat_dir):
            raise UnknownCategory(f"no category {target_category!r}")
        doc = manifest.to_dict() if isinstance(manifest, ToolManifest) else manifest
        parsed = validate_manifest(doc, None, self.env_ids())
        with self._category_lock(category):
            tool_dir = cat_dir / parsed.name
            if tool_dir.exists():
                raise DuplicateTool(f"tool {parsed.name!r} already exists in {category!r}")
            index_path = cat_dir / INDEX
            self._read_index(cat_dir)
            staging = Path(tempfile.mkdtemp(prefix=f".{parsed.name}-", dir=cat_dir))
            try:
                entry = staging / parsed.entrypoint
                entry.parent.mkdir(parents=True, exist_ok=True)
                entry.write_text(implementation, encoding="utf-8")
                entry.chmod(0o755)
                (staging / MANIFEST).write_text(json.dumps(parsed.to_dict(), indent=2) + "\n", encoding="utf-8")
                staging.rename(tool_dir)
            except BaseException:
                shutil.rmtree(staging, ignore_errors=True)
                raise
            text = index_path.read_text(encoding="utf-8")
            if text and not text.endswith("\n"):
                text += "\n"
            _atomic_write(index_path, text + f"- {parsed.name}: {parsed.description}\n")
        return f"{category}/{parsed.name}"

    def modify_tool(
        self,
        tool_id: str,
        new_manifest: ToolManifest | dict[str, Any] | None = None,
        new_implementation: str | None = None,
    ) -> None:
        """Replace manifest and/or implementation, keeping numbered backups of what changed."""
        if new_manifest is None and new_implementation is None:
            raise ValueError("modify_tool needs a new manifest or a new implementation")
        current = self.describe_tool(tool_id)
        tool_dir = self._abs(tool_id)
        doc = current.to_dict()
        if new_manifest is not None:
            doc = new_manifest.to_dict() if isinstance(new_manifest, ToolManifest) else dict(new_manifest)
        parsed = validate_manifest(doc, None, self.env_ids())
        if parsed.name != current.name:
            raise InvalidManifest([("name", "a tool cannot be renamed")])
        if new_implementation is None and not (tool_dir / parsed.entrypoint).is_file():
            raise InvalidManifest([("entrypoint", f"file {parsed.entrypoint!r} does not exist beside the manifest")])
        category = self._rel(tool_dir.parent)
        with self._category_lock(category):
            version = _next_backup_version(tool_dir)
            if new_manifest is not None:
                shutil.copy2(tool_dir / MANIFEST, tool_dir / f"{MANIFEST}.v{version}.bak")
            if new_implementation is not None:
                old_entry = tool_dir / current.entrypoint
                if old_entry.is_file():
                    shutil.copy2(old_entry, tool_dir / f"{current.entrypoint}.v{version}.bak")
                entry = tool_dir / parsed.entrypoint
                entry.parent.mkdir(parents=True, exist_ok=True)
                _atomic_write(entry, new_implementation)
                entry.chmod(0o755)
            if new_manifest is not None:
                _atomic_write(tool_dir / MANIFEST, json.dumps(parsed.to_dict(), indent=2) + "\n")
                if parsed.description != current.description:
                    self._update_index_entry(tool_dir.parent, parsed.name, parsed.description)

    def _update_index_entry(self, cat_dir: Path, name: str, description: str) -> None:
        index_path = cat_dir / INDEX
        lines = index_path.read_text(encoding="utf-8").splitlines()
        replaced = False
        for i, line in enumerate(lines[1:], start=1):
            m = _ENTRY.match(line)
            if m and m.group(1) == name:
                lines[i] = f"- {name}: {description}"
                replaced = True
        if not replaced:
            lines.append(f"- {name}: {description}")
        _atomic_write(index_path, "\n".join(lines) + "\n")

    def backups(self, tool_id: str) -> list[Path]:
        return sorted(self._abs(tool_id).glob("*.bak"))


def _next_backup_version(tool_dir: Path) -> int:
    versions = [0]
    for p in tool_dir.glob("*.bak"):
        m = re.search(r"\.v(\d+)\.bak$", p.name)
        if m:
            versions.append(int(m.group(1)))
    return max(versions) + 1


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ToolResult:
    exit_status: int
    output: str
    stderr: str = ""
    truncated: bool = False
    raw: bytes = field(default=b"", repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "exit_status": self.exit_status,
            "output": self.output,
            "stderr": self.stderr,
            "truncated": self.truncated,
        }

    @classmethod
    def from_exec(cls, result: ExecResult, limit: int) -> ToolResult:
        truncated = len(result.stdout) > limit
        head = result.stdout[:limit] if truncated else result.stdout
        return cls(
            exit_status=result.exit_status,
            output=head.decode("utf-8", errors="replace"),
            stderr=result.stderr[:limit].decode("utf-8", errors="replace"),
            truncated=truncated,
            raw=result.stdout,
        )


DEFAULT_ENV = EnvSpec("default")


class ToolExecutor:
    """Runs registry tools inside the sandbox of their environment.

    One sandbox is provisioned lazily per environment id and reused, so
    tools sharing an environment share its state while tools with different
    environments never see each other's files outside the workspace.
    """

    def __init__(self, registry: ToolRegistry, sandboxes: SandboxRuntime, truncation_limit: int) -> None:
        self.registry = registry
        self.sandboxes = sandboxes
        self.truncation_limit = truncation_limit
        self._env_sandboxes: dict[str, str] = {}
        self._lock = threading.Lock()

    def sandbox_for(self, env_id: str | None) -> str:
        with self._lock:
            key = env_id or DEFAULT_ENV.env_id
            sid = self._env_sandboxes.get(key)
            if sid is None:
                spec = DEFAULT_ENV if env_id is None else self.registry.environment(env_id)
                sid = self.sandboxes.provision(spec)
                self._env_sandboxes[key] = sid
            return sid

    def command_for(self, entry: Path, args: dict[str, Any]) -> str:
        payload = shlex.quote(json.dumps(args))
        if entry.suffix == ".py":
            return f"{shlex.quote(sys.executable)} {shlex.quote(str(entry))} {payload}"
        if entry.suffix == ".sh":
            return f"bash {shlex.quote(str(entry))} {payload}"
        return f"{shlex.quote(str(entry))} {payload}"

    def invoke(self, tool_id: str, args: dict[str, Any], mode: str = "sync") -> ToolResult | InvocationHandle:
        manifest = self.registry.describe_tool(tool_id)
        diags = check_args(manifest, args)
        if diags:
            raise ArgValidation(diags)
        sid = self.sandbox_for(manifest.environment)
        command = self.command_for(self.registry.entrypoint_path(tool_id), args)
        if manifest.background_default:
            mode = "background"
        out = self.sandboxes.exec(sid, command, timeout_seconds=manifest.timeout_seconds, mode=mode)
        if isinstance(out, InvocationHandle):
            return out
        return ToolResult.from_exec(out, self.truncation_limit)

    def run_command(
        self, command: str, timeout_seconds: float | None = None, mode: str = "sync"
    ) -> ToolResult | InvocationHandle:
        out = self.sandboxes.exec(self.sandbox_for(None), command, timeout_seconds=timeout_seconds, mode=mode)
        if isinstance(out, InvocationHandle):
            return out
        return ToolResult.from_exec(out, self.truncation_limit)

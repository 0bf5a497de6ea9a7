from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentkernel.errors import (
    ArgValidation,
    DuplicateTool,
    InvalidManifest,
    MalformedRegistry,
    UnknownCategory,
    UnknownTool,
)
from agentkernel.gateway import estimate_tokens
from agentkernel.registry import (
    ParamSpec,
    ToolExecutor,
    ToolRegistry,
    check_args,
    render_root_index,
    validate_manifest,
)
from agentkernel.sandbox import LocalDriver, SandboxRuntime
from support import ECHO_IMPL, build_registry, manifest


def tree_digest(root: Path) -> str:
    """Hash of every path and file body under ``root``."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        h.update(p.relative_to(root).as_posix().encode())
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def registry(tmp_path):
    return ToolRegistry(build_registry(tmp_path / "reg"))


@pytest.fixture
def executor(tmp_path, registry):
    ws = tmp_path / "ws"
    ws.mkdir()
    runtime = SandboxRuntime(LocalDriver(tmp_path / "state"), ws)
    yield ToolExecutor(registry, runtime, 1024)
    runtime.shutdown()


def test_root_index_lists_top_levels_without_reading_manifests(registry):
    cats = registry.load_root_index()
    assert [c.path for c in cats] == ["dynamic", "static", "util"]
    dynamic = cats[0]
    assert dynamic.child_categories == ("coverage", "debugger", "fuzzing")
    assert registry.stats.manifests_read == 0


def test_expand_category_reads_only_index_files(registry):
    out = registry.expand_category("dynamic/debugger")
    assert out["summary"].startswith("Set breakpoints")
    names = [t["name"] for t in out["tool_summaries"]]
    assert names == ["set_breakpoint", "set_file", "set_input_file", "step_control"]
    assert registry.stats.manifests_read == 0
    with pytest.raises(UnknownCategory):
        registry.expand_category("dynamic/nope")
    with pytest.raises(UnknownCategory):
        registry.expand_category("dynamic/debugger/set_file")


def test_search_finds_debugger_by_category_summary(registry):
    hits = dict(registry.search_tools("breakpoint"))
    assert "dynamic/debugger/set_breakpoint" in hits
    # category text matches too: every debugger tool is found
    assert {t for t in hits if t.startswith("dynamic/debugger/")} == {
        "dynamic/debugger/set_breakpoint",
        "dynamic/debugger/set_file",
        "dynamic/debugger/set_input_file",
        "dynamic/debugger/step_control",
    }
    assert registry.search_tools("no-such-keyword-xyz") == []


def test_resolve_tool_category_and_bare_name(registry):
    assert registry.resolve("dynamic/debugger/set_file") == ["dynamic/debugger/set_file"]
    assert len(registry.resolve("dynamic/debugger")) == 4
    assert len(registry.resolve("dynamic")) == 6
    assert registry.resolve("set_file") == ["dynamic/debugger/set_file"]
    assert registry.resolve("applypatch") == []
    assert registry.resolve("../etc") == []


def test_describe_tool(registry):
    m = registry.describe_tool("util/echo")
    assert m.name == "echo"
    assert m.interface == (ParamSpec("message", "string"),)
    with pytest.raises(UnknownTool):
        registry.describe_tool("util/missing")


def test_validate_manifest_collects_field_diagnostics():
    with pytest.raises(InvalidManifest) as exc:
        validate_manifest({"name": "bad name", "description": 3, "entrypoint": "/abs", "timeout_seconds": 0})
    fields = {f for f, _ in exc.value.diagnostics}
    assert {"name", "description", "entrypoint", "timeout_seconds"} <= fields


def test_validate_manifest_rejects_unknown_environment():
    doc = manifest("t", "d", [], environment="gpu")
    with pytest.raises(InvalidManifest) as exc:
        validate_manifest(doc, env_ids={"cpu"})
    assert exc.value.diagnostics == [("environment", "unknown environment 'gpu'")]


def test_check_args():
    params = (ParamSpec("a", "integer"), ParamSpec("b", "string", required=False))
    assert check_args(params, {"a": 1}) == []
    assert check_args(params, {"a": True}) == [("a", "expected integer")]
    assert check_args(params, {}) == [("a", "missing required parameter")]
    assert check_args(params, {"a": 1, "c": 2}) == [("c", "unexpected parameter")]
    assert check_args(params, [1]) == [("args", "must be a document")]


_VALUES = {
    "string": st.text(max_size=5),
    "integer": st.integers(),
    "number": st.floats(allow_nan=False),
    "boolean": st.booleans(),
    "list": st.lists(st.integers(), max_size=3),
    "document": st.dictionaries(st.text(max_size=3), st.integers(), max_size=3),
}


@given(st.sampled_from(sorted(_VALUES)), st.data())
def test_check_args_accepts_every_well_typed_value(ptype, data):
    value = data.draw(_VALUES[ptype])
    assert check_args((ParamSpec("p", ptype),), {"p": value}) == []


def test_create_tool_is_searchable_describable_invocable(registry, executor):
    doc = manifest("hexdump", "Dump bytes as hex", [{"param_name": "message", "param_type": "string"}])
    tool_id = registry.create_tool("util", doc, ECHO_IMPL % "hexdump")
    assert tool_id == "util/hexdump"
    assert ("util/hexdump", "Dump bytes as hex") in registry.search_tools("hexdump")
    assert registry.describe_tool(tool_id).description == "Dump bytes as hex"
    result = executor.invoke(tool_id, {"message": "hi"})
    assert result.exit_status == 0
    assert json.loads(result.output) == {"tool": "hexdump", "args": {"message": "hi"}}
    names = [t["name"] for t in registry.expand_category("util")["tool_summaries"]]
    assert "hexdump" in names


@pytest.mark.parametrize(
    "doc, category, error",
    [
        (manifest("echo", "dup", []), "util", DuplicateTool),
        (manifest("x", "d", [], timeout_seconds=-1), "util", InvalidManifest),
        (manifest("x", "d", [{"param_name": "p", "param_type": "tensor"}]), "util", InvalidManifest),
        (manifest("x", "d", []), "nowhere", UnknownCategory),
    ],
)
def test_failed_create_leaves_registry_byte_identical(registry, doc, category, error):
    before = tree_digest(registry.root)
    with pytest.raises(error):
        registry.create_tool(category, doc, "print(1)\n")
    assert tree_digest(registry.root) == before


def test_modify_tool_keeps_numbered_backups(registry):
    registry.modify_tool("util/echo", new_implementation="print('v2')\n")
    doc = registry.describe_tool("util/echo").to_dict()
    doc["description"] = "Echo, revised"
    registry.modify_tool("util/echo", new_manifest=doc)
    names = sorted(p.name for p in registry.backups("util/echo"))
    assert names == ["main.py.v1.bak", "tool.json.v2.bak"]
    assert registry.describe_tool("util/echo").description == "Echo, revised"
    index = (registry.root / "util" / "INDEX.md").read_text()
    assert "- echo: Echo, revised" in index
    with pytest.raises(InvalidManifest):
        registry.modify_tool("util/echo", new_manifest={**doc, "name": "renamed"})


def test_invoke_validates_arguments(executor):
    with pytest.raises(ArgValidation) as exc:
        executor.invoke("util/echo", {"message": 5})
    assert exc.value.diagnostics == [("message", "expected string")]


def test_invoke_truncates_but_keeps_raw(executor):
    result = executor.invoke("util/big_output", {"size": 5000})
    assert result.truncated and len(result.output) == 1024
    assert result.raw == b"a" * 5000


def test_missing_index_is_malformed(tmp_path):
    (tmp_path / "cat").mkdir()
    with pytest.raises(MalformedRegistry):
        ToolRegistry(tmp_path).load_root_index()


@settings(max_examples=10, deadline=None)
@given(st.integers(min_value=0, max_value=150))
def test_root_index_size_is_independent_of_tool_count(tmp_path_factory, extra):
    base = ToolRegistry(build_registry(tmp_path_factory.mktemp("a")))
    grown = ToolRegistry(build_registry(tmp_path_factory.mktemp("b"), extra_tools=extra))
    a = render_root_index(base.load_root_index())
    b = render_root_index(grown.load_root_index())
    assert estimate_tokens(a) == estimate_tokens(b)
    assert grown.stats.manifests_read == 0

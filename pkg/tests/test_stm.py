from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentkernel.errors import (
    InvalidParent,
    MalformedPattern,
    NoRawAttachment,
    NothingToSummarize,
    RunClosed,
    UnknownRun,
)
from agentkernel.gateway import estimate_tokens, render_history
from agentkernel.stm import ShortTermMemory


def call_event(stm: ShortTermMemory, run: int, tool: str = "echo", **extra) -> int:
    return stm.append_event(run, {"kind": "tool_call", "tool_name": tool, "args": extra})


def test_events_get_dense_indices_and_emits_edges():
    stm = ShortTermMemory()
    run = stm.open_agent_run(None, {"agent_name": "root"}, task="t")
    ids = [stm.append_event(run, {"text": f"e{i}"}) for i in range(5)]
    assert [e["index"] for e in stm.inspect_events(run)] == [1, 2, 3, 4, 5]
    assert stm.counts()["emits"] == 5
    assert [stm.event_id(run, i) for i in range(1, 6)] == ids
    assert [e["text"] for e in stm.inspect_events(run, 2, 3)] == ["e1", "e2"]


def test_spawns_edge_needs_a_spawning_call_event():
    stm = ShortTermMemory()
    root = stm.open_agent_run(None, {"agent_name": "root"})
    plain = stm.append_event(root, {"text": "hi"})
    with pytest.raises(InvalidParent):
        stm.open_agent_run(plain, {"agent_name": "x"})
    with pytest.raises(InvalidParent):
        stm.open_agent_run(root, {"agent_name": "x"})
    ev = call_event(stm, root, "call_agent")
    child = stm.open_agent_run(ev, {"agent_name": "child"})
    assert stm.counts()["spawns"] == 1
    runs = {r["run_id"]: r for r in stm.list_agent_runs()}
    assert runs[child]["parent_run"] == root and runs[child]["parent_event"] == ev


def test_closed_run_rejects_events():
    stm = ShortTermMemory()
    run = stm.open_agent_run(None, {"agent_name": "a"})
    stm.close_run(run, "done")
    with pytest.raises(RunClosed):
        stm.append_event(run, {"text": "late"})
    with pytest.raises(UnknownRun):
        stm.inspect_events(999)
    assert stm.list_agent_runs(status="done")[0]["run_id"] == run


def test_large_output_is_truncated_with_raw_attachment():
    stm = ShortTermMemory(truncation_limit=100)
    run = stm.open_agent_run(None, {"agent_name": "a"})
    big = bytes(range(256)) * 4
    ev = call_event(stm, run)
    stm.attach_response(ev, {"exit_status": 0}, big)
    payload = stm.inspect_events(run)[0]
    assert payload["truncated"] and payload["raw_size"] == len(big)
    assert stm.recover_raw(ev) == big
    small = call_event(stm, run)
    stm.attach_response(small, {"exit_status": 0}, b"tiny")
    with pytest.raises(NoRawAttachment):
        stm.recover_raw(small)


def test_summarize_covers_older_events_and_shrinks_history():
    stm = ShortTermMemory()
    run = stm.open_agent_run(None, {"agent_name": "a"})
    for i in range(10):
        stm.append_event(run, {"text": f"event {i} " + "x" * 400})
    before = stm.history_tokens(run)
    seen = []
    summary = stm.summarize_history(run, 3, lambda payloads: seen.append(payloads) or "short summary")
    assert [p["index"] for p in seen[0]] == list(range(1, 8))
    assert stm.summary_count(run) == 1
    assert stm.history_tokens(run) < before
    history = stm.assemble_history(run)
    assert history[0].kind == "summary" and history[0].text == "short summary"
    assert len(history) == 4
    assert stm.node(summary).payload["covered"] == [1, 7]
    # covered events remain in the graph
    assert len(stm.inspect_events(run)) == 10
    with pytest.raises(NothingToSummarize):
        stm.summarize_history(run, 3, lambda _: "again")


@settings(max_examples=50)
@given(st.lists(st.integers(min_value=0, max_value=300), min_size=1, max_size=25), st.integers(0, 10))
def test_history_token_estimate_matches_rendered_history(sizes, keep):
    stm = ShortTermMemory()
    run = stm.open_agent_run(None, {"agent_name": "a"})
    for n in sizes:
        stm.append_event(run, {"text": "y" * n})
    try:
        stm.summarize_history(run, keep, lambda _: "s")
    except NothingToSummarize:
        assert keep >= len(sizes)
    assert stm.history_tokens(run) == estimate_tokens(render_history(stm.assemble_history(run)))
    # every event is either covered by exactly one summary or present in history
    covered = stm.counts()["summarizes"]
    events_in_history = sum(1 for t in stm.assemble_history(run) if t.kind != "summary")
    assert covered + events_in_history == len(sizes)


def _chain(stm: ShortTermMemory) -> tuple[int, int, int]:
    root = stm.open_agent_run(None, {"agent_name": "root"})
    e1 = call_event(stm, root, "create_agent")
    e2 = call_event(stm, root, "call_agent")
    child = stm.open_agent_run(e2, {"agent_name": "helper"})
    e3 = call_event(stm, child, "call_agent")
    grandchild = stm.open_agent_run(e3, {"agent_name": "inner"})
    stm.append_event(grandchild, {"text": "done"})
    del e1
    return root, child, grandchild


def test_graph_query_finds_depth_two_spawn_chain():
    stm = ShortTermMemory()
    root, child, grandchild = _chain(stm)
    pattern = {
        "match": {"kind": "AgentRun", "where": {"parent_run": None}},
        "walk": [
            {"edge": "emits", "kind": "Event"},
            {"edge": "spawns", "kind": "AgentRun"},
            {"edge": "emits", "kind": "Event"},
            {"edge": "spawns", "kind": "AgentRun"},
        ],
    }
    (binding,) = stm.graph_query(pattern)
    assert binding["nodes"][0] == root and binding["nodes"][2] == child and binding["nodes"][4] == grandchild


def test_graph_query_predicates_and_reverse_walk():
    stm = ShortTermMemory()
    root, child, _ = _chain(stm)
    found = stm.graph_query({"match": {"kind": "Event", "where": {"tool_name": {"in": ["create_agent"]}}}})
    assert len(found) == 1
    up = stm.graph_query(
        {"match": {"kind": "AgentRun", "where": {"agent_name": "helper"}},
         "walk": [{"edge": "spawns", "direction": "in"}, {"edge": "emits", "direction": "in"}]}
    )
    assert up == [{"nodes": [child, up[0]["nodes"][1], root]}]
    assert stm.graph_query({"match": {"where": {"agent_name": {"contains": "elp"}}}})[0]["nodes"] == [child]
    assert stm.graph_query({"match": {"where": {"truncated": {"exists": True}}}}) == []


@pytest.mark.parametrize(
    "pattern",
    [
        [],
        {"walk": []},
        {"match": {"kind": "Event", "bogus": 1}},
        {"match": {}, "walk": [{"direction": "out"}]},
        {"match": {}, "walk": [{"edge": "emits", "direction": "sideways"}]},
        {"match": {"where": {"a": {"regex": "x"}}}},
        {"match": {}, "walk": [{"edge": "emits", "repeat": 0}]},
    ],
)
def test_malformed_patterns(pattern):
    with pytest.raises(MalformedPattern):
        ShortTermMemory().graph_query(pattern)


def test_export_restricted_to_run_subtree(tmp_path):
    stm = ShortTermMemory()
    root, child, grandchild = _chain(stm)
    other = stm.open_agent_run(None, {"agent_name": "other"})
    path = tmp_path / "stm.jsonl"
    count = stm.export_jsonl(path, child)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == count
    node_ids = {r["node_id"] for r in records if "node_id" in r}
    assert child in node_ids and grandchild in node_ids
    assert root not in node_ids and other not in node_ids
    # nodes come before edges
    kinds = ["node" if "node_id" in r else "edge" for r in records]
    assert kinds == sorted(kinds, key=lambda k: k != "node")

"""Long-term memory: a typed knowledge graph with embedded labels.

Nodes carry ``(node_type, label, content)`` and an L2-normalized embedding of
the label. Retrieval is cosine top-N within one node type, returned together
with each hit's one-hop neighbourhood, plus regex lookup over labels.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .errors import (
    DuplicateEdge,
    EmptyLabel,
    MalformedPattern,
    ProviderFailure,
    UnknownNode,
    UnknownNodeType,
)

SEED_NODE_TYPES = (
    "file",
    "function",
    "class",
    "module",
    "code_understanding",
    "search_result",
    "error",
    "query_answer",
    "concept",
)
SEED_EDGE_TYPES = ("contains", "calls", "imports", "relates_to", "answers", "caused_by")

# scores equal to this many decimals count as ties
SCORE_DECIMALS = 12

_WORD = re.compile(r"\w+")


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic bag-of-words embedder.

    Lower-cased word tokens are hashed into ``dimension`` buckets and the
    count vector is L2-normalized. Text with no word characters is treated
    as a single token so the vector is never zero.
    """

    def __init__(self, dimension: int = 64) -> None:
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = dimension

    def bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dimension

    def tokens(self, text: str) -> list[str]:
        toks = _WORD.findall(text.lower())
        return toks or [text.strip().lower()]

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for tok in self.tokens(text):
            vec[self.bucket(tok)] += 1.0
        return vec


@dataclass
class LtmNode:
    node_id: int
    node_type: str
    label: str
    content: str
    embedding: np.ndarray

    def to_dict(self, with_embedding: bool = False) -> dict[str, Any]:
        out: dict[str, Any] = {
            "node_id": self.node_id,
            "node_type": self.node_type,
            "label": self.label,
            "content": self.content,
        }
        if with_embedding:
            out["embedding"] = [float(x) for x in self.embedding]
        return out


@dataclass(frozen=True)
class LtmEdge:
    edge_id: int
    src: int
    dst: int
    edge_type: str

    def to_dict(self) -> dict[str, Any]:
        return {"edge_id": self.edge_id, "src": self.src, "dst": self.dst, "edge_type": self.edge_type}


@dataclass(frozen=True)
class SchemaCatalog:
    node_types: tuple[str, ...]
    edge_types: tuple[str, ...]

    def to_dict(self) -> dict[str, list[str]]:
        return {"node_types": list(self.node_types), "edge_types": list(self.edge_types)}


@dataclass(frozen=True)
class RetrievalQuery:
    node_type: str
    query_label: str
    top_n: int = 5

    def __post_init__(self) -> None:
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if not np.isfinite(norm) or norm == 0.0:
        raise ProviderFailure("embedding provider returned a zero or non-finite vector")
    return vec / norm


class LongTermMemory:
    """Store-wide lock serializes writes; reads take the same lock briefly."""

    def __init__(self, provider: EmbeddingProvider | None = None) -> None:
        self.provider = provider or HashingEmbedder()
        self._nodes: dict[int, LtmNode] = {}
        self._edges: dict[int, LtmEdge] = {}
        self._node_types: set[str] = set(SEED_NODE_TYPES)
        self._edge_types: set[str] = set(SEED_EDGE_TYPES)
        self._next_node = 1
        self._next_edge = 1
        self._lock = threading.RLock()

    def embed(self, text: str) -> np.ndarray:
        try:
            vec = np.asarray(self.provider.embed(text), dtype=np.float64)
        except Exception as exc:  # noqa: BLE001
            raise ProviderFailure(f"embedding failed: {exc}") from exc
        if vec.shape != (self.provider.dimension,):
            raise ProviderFailure(
                f"embedding has shape {vec.shape}, expected ({self.provider.dimension},)"
            )
        return _normalize(vec)

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    @property
    def edge_count(self) -> int:
        return len(self._edges)

    def get_node(self, node_id: int) -> LtmNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no long-term node {node_id}") from None

    def nodes(self, node_type: str | None = None) -> list[LtmNode]:
        with self._lock:
            return [n for n in self._nodes.values() if node_type is None or n.node_type == node_type]

    def edges(self) -> list[LtmEdge]:
        with self._lock:
            return list(self._edges.values())

    # -- writes -------------------------------------------------------

    def create_node(self, node_type: str, label: str, content: str) -> int:
        if not label or not label.strip():
            raise EmptyLabel("label must be non-empty")
        embedding = self.embed(label)
        with self._lock:
            node_id = self._next_node
            self._next_node += 1
            self._nodes[node_id] = LtmNode(node_id, node_type, label, content, embedding)
            self._node_types.add(node_type)
            return node_id

    def create_edge(self, src: int, dst: int, edge_type: str) -> int:
        with self._lock:
            for nid in (src, dst):
                if nid not in self._nodes:
                    raise UnknownNode(f"no long-term node {nid}")
            for e in self._edges.values():
                if (e.src, e.dst, e.edge_type) == (src, dst, edge_type):
                    raise DuplicateEdge(f"edge {src} -{edge_type}-> {dst} already exists")
            edge_id = self._next_edge
            self._next_edge += 1
            self._edges[edge_id] = LtmEdge(edge_id, src, dst, edge_type)
            self._edge_types.add(edge_type)
            return edge_id

    def update_node(
        self, node_id: int, new_label: str | None = None, new_content: str | None = None
    ) -> None:
        if new_label is None and new_content is None:
            raise ValueError("update_node needs a new label or new content")
        if new_label is not None and not new_label.strip():
            raise EmptyLabel("label must be non-empty")
        with self._lock:
            node = self.get_node(node_id)
            if new_label is not None and new_label != node.label:
                node.embedding = self.embed(new_label)
                node.label = new_label
            if new_content is not None:
                node.content = new_content

    def delete_node(self, node_id: int) -> int:
        """Remove a node and its incident edges; returns how many edges went with it."""
        with self._lock:
            self.get_node(node_id)
            del self._nodes[node_id]
            doomed = [eid for eid, e in self._edges.items() if node_id in (e.src, e.dst)]
            for eid in doomed:
                del self._edges[eid]
            return len(doomed)

    def delete_edge(self, edge_id: int) -> None:
        with self._lock:
            if self._edges.pop(edge_id, None) is None:
                raise UnknownNode(f"no long-term edge {edge_id}")

    # -- reads --------------------------------------------------------

    def list_schema(self) -> SchemaCatalog:
        with self._lock:
            return SchemaCatalog(tuple(sorted(self._node_types)), tuple(sorted(self._edge_types)))

    def one_hop(self, node_id: int) -> dict[str, Any]:
        with self._lock:
            edges = [e for e in self._edges.values() if node_id in (e.src, e.dst)]
            neighbor_ids = sorted({e.dst if e.src == node_id else e.src for e in edges})
            return {
                "neighbors": [self._nodes[n].to_dict() for n in neighbor_ids],
                "edges": [e.to_dict() for e in sorted(edges, key=lambda e: e.edge_id)],
            }

    def search_nodes(self, query: RetrievalQuery) -> list[dict[str, Any]]:
        """Top-N nodes of ``query.node_type`` by cosine similarity to the query label.

        Ties (scores equal to ``SCORE_DECIMALS`` places) break by label, then node id.
        """
        with self._lock:
            if query.node_type not in self._node_types:
                raise UnknownNodeType(f"node type {query.node_type!r} is not in the catalog")
            candidates = [n for n in self._nodes.values() if n.node_type == query.node_type]
            if not candidates:
                return []
            q = self.embed(query.query_label)
            matrix = np.stack([n.embedding for n in candidates])
            scores = np.round(matrix @ q, SCORE_DECIMALS)
            order = sorted(
                range(len(candidates)),
                key=lambda i: (-scores[i], candidates[i].label, candidates[i].node_id),
            )
            return [
                {
                    "node": candidates[i].to_dict(),
                    "one_hop": self.one_hop(candidates[i].node_id),
                    "score": float(scores[i]),
                }
                for i in order[: query.top_n]
            ]

    def grep_nodes(self, pattern: str) -> list[LtmNode]:
        """Nodes whose label matches ``pattern`` (case-sensitive regex search)."""
        try:
            rx = re.compile(pattern)
        except re.error as exc:
            raise MalformedPattern(f"bad pattern {pattern!r}: {exc}") from exc
        with self._lock:
            return [n for n in sorted(self._nodes.values(), key=lambda n: n.node_id) if rx.search(n.label)]

    # -- persistence --------------------------------------------------

    def export_records(self) -> list[dict[str, Any]]:
        with self._lock:
            records: list[dict[str, Any]] = []
            for n in sorted(self._nodes.values(), key=lambda n: n.node_id):
                records.append({"record": "node", **n.to_dict(with_embedding=True)})
            for e in sorted(self._edges.values(), key=lambda e: e.edge_id):
                records.append({"record": "edge", **e.to_dict()})
            records.append({"record": "catalog", **self.list_schema().to_dict()})
            return records

    def export_jsonl(self, path: str | Path) -> int:
        records = self.export_records()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        tmp.replace(path)
        return len(records)

    @classmethod
    def load_jsonl(cls, path: str | Path, provider: EmbeddingProvider | None = None) -> LongTermMemory:
        store = cls(provider)
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                kind = rec.get("record")
                if kind == "node":
                    emb = np.asarray(rec["embedding"], dtype=np.float64)
                    nid = int(rec["node_id"])
                    store._nodes[nid] = LtmNode(nid, rec["node_type"], rec["label"], rec["content"], emb)
                    store._node_types.add(rec["node_type"])
                    store._next_node = max(store._next_node, nid + 1)
                elif kind == "edge":
                    eid = int(rec["edge_id"])
                    store._edges[eid] = LtmEdge(eid, int(rec["src"]), int(rec["dst"]), rec["edge_type"])
                    store._edge_types.add(rec["edge_type"])
                    store._next_edge = max(store._next_edge, eid + 1)
                elif kind == "catalog":
                    store._node_types.update(rec.get("node_types", []))
                    store._edge_types.update(rec.get("edge_types", []))
        return store

"""AST graphs: node records, levels, root-to-leaf paths, adjacency, triplets.

Node ids are ``0..N-1``. Levels and paths are always derived from the parent
links; they are never read from input.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

MAX_DEPTH = 30
MAX_PATHS = 200
MAX_NODES = 1000


class AstError(ValueError):
    """Malformed tree or interchange record."""


class CapError(AstError):
    """A tree exceeds one of the size caps."""

    def __init__(self, cap: str, limit: int, actual: int):
        super().__init__(f"{cap} cap exceeded: {actual} > {limit}")
        self.cap = cap
        self.limit = limit
        self.actual = actual


@dataclass
class AstNode:
    id: int
    node_type: str
    text: str
    start_line: int
    end_line: int
    parent: int | None
    children: list[int] = field(default_factory=list)

    def label(self) -> str:
        """String fed to the text embedder: ``type|text|start:end``."""
        return f"{self.node_type}|{self.text}|{self.start_line}:{self.end_line}"


@dataclass
class AstGraph:
    nodes: list[AstNode]
    root: int
    levels: list[int]
    paths: list[list[int]]
    truncated_paths: int = 0

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        return max(self.levels)

    def leaves(self) -> list[int]:
        return [nd.id for nd in self.nodes if not nd.children]

    @classmethod
    def from_nodes(cls, nodes: list[AstNode], max_depth: int = MAX_DEPTH,
                   max_nodes: int = MAX_NODES, max_paths: int = MAX_PATHS) -> "AstGraph":
        """Validate parent/child links and derive levels and paths."""
        n = len(nodes)
        if n == 0:
            raise AstError("tree has no nodes")
        if n > max_nodes:
            raise CapError("max_nodes", max_nodes, n)
        for i, nd in enumerate(nodes):
            if nd.id != i:
                raise AstError(f"node ids must be 0..N-1; position {i} holds id {nd.id}")
        roots = [nd.id for nd in nodes if nd.parent is None]
        if len(roots) != 1:
            raise AstError(f"expected exactly one root, found {len(roots)}")
        for nd in nodes:
            if nd.start_line < 1 or nd.end_line < nd.start_line:
                raise AstError(f"node {nd.id}: bad line span {nd.start_line}:{nd.end_line}")
            if len(set(nd.children)) != len(nd.children):
                raise AstError(f"node {nd.id}: duplicate children")
            for c in nd.children:
                if not 0 <= c < n or nodes[c].parent != nd.id:
                    raise AstError(f"node {nd.id}: child {c} does not point back")
            if nd.parent is not None and nd.id not in nodes[nd.parent].children:
                raise AstError(f"node {nd.id}: missing from parent {nd.parent}'s children")
        graph = cls(nodes=nodes, root=roots[0], levels=[], paths=[])
        graph.levels = compute_levels(graph)
        if graph.depth > max_depth:
            raise CapError("max_depth", max_depth, graph.depth)
        graph.paths, graph.truncated_paths = _paths(graph, max_paths)
        return graph


def compute_levels(graph: AstGraph) -> list[int]:
    """Edge distance of each node from the root, by depth-first traversal."""
    levels = [-1] * graph.n
    levels[graph.root] = 0
    stack = [graph.root]
    while stack:
        v = stack.pop()
        for c in graph.nodes[v].children:
            if levels[c] != -1:
                raise AstError(f"cycle or shared child at node {c}")
            levels[c] = levels[v] + 1
            stack.append(c)
    if -1 in levels:
        raise AstError(f"cycle detected: node {levels.index(-1)} is unreachable from the root")
    return levels


def _paths(graph: AstGraph, max_paths: int) -> tuple[list[list[int]], int]:
    paths: list[list[int]] = []
    dropped = 0
    stack: list[tuple[int, list[int]]] = [(graph.root, [graph.root])]
    while stack:
        v, prefix = stack.pop()
        kids = graph.nodes[v].children
        if not kids:
            if len(paths) < max_paths:
                paths.append(prefix)
            else:
                dropped += 1
            continue
        for c in reversed(kids):
            stack.append((c, prefix + [c]))
    return paths, dropped


def extract_paths(graph: AstGraph, max_paths: int = MAX_PATHS) -> list[list[int]]:
    """Root-first node-id paths, one per leaf in left-to-right discovery order.

    Leaves beyond ``max_paths`` are dropped; the count lands in
    ``graph.truncated_paths`` when built through ``AstGraph.from_nodes``.
    """
    return _paths(graph, max_paths)[0]


# --- adjacency --------------------------------------------------------------


@dataclass
class AdjacencyPack:
    a_tilde: np.ndarray
    d_tilde_inv: np.ndarray

    @property
    def propagator(self) -> np.ndarray:
        """Row-normalized ``D^-1 (A + I)``."""
        return self.d_tilde_inv[:, None] * self.a_tilde


def build_adjacency(graph: AstGraph) -> AdjacencyPack:
    """``A[j, i] = 1`` iff node i is the parent of node j, plus self loops."""
    n = graph.n
    a = np.eye(n)
    for nd in graph.nodes:
        if nd.parent is not None:
            a[nd.id, nd.parent] = 1.0
    return AdjacencyPack(a_tilde=a, d_tilde_inv=1.0 / a.sum(axis=1))


# --- triplets ---------------------------------------------------------------


@dataclass
class TripletBatch:
    triples: list[tuple[int, int, int]]
    delta_l: list[int]
    warning: str | None = None

    def __len__(self) -> int:
        return len(self.triples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        t = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        return t[:, 0], t[:, 1], t[:, 2], np.asarray(self.delta_l, dtype=np.float64)


def sample_triplets(graph: AstGraph, count: int, rng_seed) -> TripletBatch:
    """Draw ``count`` (anchor, positive, negative) triples.

    Anchors are uniform over nodes that have a same-level peer and at least one
    node on another level; the positive is uniform over the anchor's peers and
    the negative uniform over all other-level nodes. ``rng_seed`` may be an int
    or a ``numpy.random.Generator``.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    levels = np.asarray(graph.levels)
    by_level: dict[int, np.ndarray] = {}
    for lv in np.unique(levels):
        by_level[int(lv)] = np.flatnonzero(levels == lv)
    anchors = [v for v in range(graph.n)
               if len(by_level[levels[v]]) >= 2 and len(by_level[levels[v]]) < graph.n]
    if not anchors:
        return TripletBatch([], [], warning="no node has both a same-level peer and another level")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    triples, deltas = [], []
    for _ in range(count):
        a = anchors[rng.integers(len(anchors))]
        peers = by_level[levels[a]]
        peers = peers[peers != a]
        p = int(peers[rng.integers(len(peers))])
        others = np.flatnonzero(levels != levels[a])
        neg = int(others[rng.integers(len(others))])
        triples.append((a, p, neg))
        deltas.append(abs(int(levels[neg]) - int(levels[a])))
    return TripletBatch(triples, deltas)


# --- interchange format -----------------------------------------------------


def dump_ast_json(graph: AstGraph, stream: IO[str]) -> None:
    """One JSON object per node per line, in id order."""
    for nd in graph.nodes:
        rec = {"id": nd.id, "type": nd.node_type, "text": nd.text,
               "start_line": nd.start_line, "end_line": nd.end_line, "parent": nd.parent}
        stream.write(json.dumps(rec, ensure_ascii=False) + "\n")


def dumps_ast_json(graph: AstGraph) -> str:
    buf = io.StringIO()
    dump_ast_json(graph, buf)
    return buf.getvalue()


_REQUIRED = ("id", "type", "text", "start_line", "end_line", "parent")


def _records(stream) -> Iterable[dict]:
    for lineno, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise AstError(f"line {lineno}: malformed record ({e.msg})") from None
        if not isinstance(rec, dict):
            raise AstError(f"line {lineno}: record is not an object")
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise AstError(f"line {lineno}: malformed record, missing {', '.join(missing)}")
        yield rec


def load_ast_json(stream, max_depth: int = MAX_DEPTH, max_nodes: int = MAX_NODES,
                  max_paths: int = MAX_PATHS) -> AstGraph:
    """Read the line-delimited interchange format (bytes or text stream).

    Children are ordered by their position in the file.
    """
    recs = list(_records(stream))
    ids = [r["id"] for r in recs]
    if not all(isinstance(i, int) and not isinstance(i, bool) for i in ids):
        raise AstError("malformed record: non-integer id")
    if sorted(ids) != list(range(len(ids))):
        raise AstError("malformed record: ids must be exactly 0..N-1")
    nodes: list[AstNode | None] = [None] * len(recs)
    for r in recs:
        parent = r["parent"]
        if parent is not None:
            if not isinstance(parent, int) or isinstance(parent, bool):
                raise AstError(f"node {r['id']}: malformed parent {parent!r}")
            if parent == r["id"]:
                raise AstError(f"node {r['id']}: cycle detected (node is its own parent)")
            if not 0 <= parent < len(recs):
                raise AstError(f"node {r['id']}: dangling parent id {parent}")
        nodes[r["id"]] = AstNode(id=r["id"], node_type=str(r["type"]), text=str(r["text"]),
                                 start_line=int(r["start_line"]), end_line=int(r["end_line"]),
                                 parent=parent)
    for r in recs:
        if r["parent"] is not None:
            nodes[r["parent"]].children.append(r["id"])
    if recs and all(nd.parent is not None for nd in nodes):
        raise AstError("cycle detected: every node has a parent")
    return AstGraph.from_nodes(nodes, max_depth=max_depth, max_nodes=max_nodes,
                               max_paths=max_paths)


def loads_ast_json(text: str, **caps) -> AstGraph:
    return load_ast_json(io.StringIO(text), **caps)


def relabel(graph: AstGraph, perm: list[int]) -> AstGraph:
    """Renumber nodes so old id ``i`` becomes ``perm[i]``; children keep their order."""
    n = graph.n
    nodes: list[AstNode | None] = [None] * n
    for nd in graph.nodes:
        nodes[perm[nd.id]] = AstNode(
            id=perm[nd.id], node_type=nd.node_type, text=nd.text,
            start_line=nd.start_line, end_line=nd.end_line,
            parent=None if nd.parent is None else perm[nd.parent],
            children=[perm[c] for c in nd.children])
    return AstGraph.from_nodes(nodes, max_depth=max(graph.depth, MAX_DEPTH),
                               max_nodes=max(n, MAX_NODES))

"""Causal DAGs, node column layouts and the self-looped adjacency used by VACA."""

from __future__ import annotations

import hashlib
import heapq
import json
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graphs: cycles, unknown nodes, bad indices."""


@dataclass(frozen=True)
class ColumnKind:
    """Statistical type of a single observed column.

    Categorical columns hold integer codes in ``[0, cardinality)``.
    """

    family: str = "continuous"
    cardinality: int = 2

    def __post_init__(self):
        if self.family not in ("continuous", "binary", "categorical"):
            raise GraphError(f"unknown column kind {self.family!r}")
        if self.family == "categorical" and self.cardinality < 2:
            raise GraphError("categorical columns need cardinality >= 2")

    @property
    def is_continuous(self) -> bool:
        return self.family == "continuous"

    @property
    def n_params(self) -> int:
        """Width of the likelihood parameter vector for this column."""
        return self.cardinality if self.family == "categorical" else 1

    @property
    def in_width(self) -> int:
        """Width of the encoder-side encoding (one-hot for categoricals)."""
        return self.cardinality if self.family == "categorical" else 1

    def __str__(self) -> str:
        if self.family == "categorical":
            return f"categorical({self.cardinality})"
        return self.family

    @classmethod
    def parse(cls, text: str) -> "ColumnKind":
        text = text.strip().lower()
        m = re.fullmatch(r"categorical\((\d+)\)", text)
        if m:
            return cls("categorical", int(m.group(1)))
        if text in ("continuous", "binary"):
            return cls(text)
        raise GraphError(f"cannot parse column kind {text!r}")


CONTINUOUS = ColumnKind("continuous")
BINARY = ColumnKind("binary")


def categorical(k: int) -> ColumnKind:
    return ColumnKind("categorical", k)


@dataclass(frozen=True)
class CausalGraph:
    """A DAG over named nodes; ``(j, i)`` in ``edges`` means j is a parent of i.

    Every node may own several observed columns (a heterogeneous node), described
    by ``kinds``. Graphs are immutable; derived quantities are cached at
    construction.
    """

    names: tuple[str, ...]
    edges: frozenset[tuple[int, int]]
    kinds: tuple[tuple[ColumnKind, ...], ...] = ()
    _order: tuple[int, ...] = field(default=(), init=False, repr=False, compare=False)
    _parents: tuple[tuple[int, ...], ...] = field(default=(), init=False, repr=False, compare=False)
    _children: tuple[tuple[int, ...], ...] = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        d = len(self.names)
        if d == 0:
            raise GraphError("a graph needs at least one node")
        if len(set(self.names)) != d:
            raise GraphError(f"duplicate node names in {self.names}")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "edges", frozenset((int(a), int(b)) for a, b in self.edges))
        for j, i in self.edges:
            if not (0 <= j < d and 0 <= i < d):
                raise GraphError(f"edge ({j}, {i}) references a node outside [0, {d})")
            if j == i:
                raise GraphError(f"self-edge on node {self.names[i]!r}")
        kinds = tuple(tuple(k) for k in self.kinds) if self.kinds else tuple((CONTINUOUS,) for _ in range(d))
        if len(kinds) != d or any(len(k) == 0 for k in kinds):
            raise GraphError("kinds must list at least one column kind per node")
        object.__setattr__(self, "kinds", kinds)
        parents = [[] for _ in range(d)]
        children = [[] for _ in range(d)]
        for j, i in sorted(self.edges):
            parents[i].append(j)
            children[j].append(i)
        object.__setattr__(self, "_parents", tuple(tuple(p) for p in parents))
        object.__setattr__(self, "_children", tuple(tuple(c) for c in children))
        object.__setattr__(self, "_order", self._kahn())

    @classmethod
    def from_names(
        cls,
        names: Sequence[str],
        edges: Iterable[tuple[str, str]],
        kinds: Sequence[Sequence[ColumnKind]] | None = None,
    ) -> "CausalGraph":
        index = {n: k for k, n in enumerate(names)}
        pairs = []
        for a, b in edges:
            if a not in index or b not in index:
                raise GraphError(f"edge {a}->{b} references an unknown node")
            pairs.append((index[a], index[b]))
        if len(pairs) != len(set(pairs)):
            raise GraphError("duplicate edges")
        return cls(tuple(names), frozenset(pairs), tuple(tuple(k) for k in kinds) if kinds else ())

    # -- basic structure -------------------------------------------------

    @property
    def d(self) -> int:
        return len(self.names)

    def index(self, node: str | int) -> int:
        if isinstance(node, (int, np.integer)):
            node = int(node)
            if not 0 <= node < self.d:
                raise GraphError(f"node index {node} out of range for d={self.d}")
            return node
        try:
            return self.names.index(node)
        except ValueError:
            raise GraphError(f"unknown node {node!r}") from None

    def parents(self, i: int) -> tuple[int, ...]:
        return self._parents[self.index(i)]

    def children(self, i: int) -> tuple[int, ...]:
        return self._children[self.index(i)]

    def is_leaf(self, i: int) -> bool:
        return not self._children[self.index(i)]

    def _kahn(self) -> tuple[int, ...]:
        indeg = [len(p) for p in self._parents]
        ready = [i for i in range(self.d) if indeg[i] == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            j = heapq.heappop(ready)
            order.append(j)
            for i in self._children[j]:
                indeg[i] -= 1
                if indeg[i] == 0:
                    heapq.heappush(ready, i)
        if len(order) != self.d:
            stuck = [self.names[i] for i in range(self.d) if indeg[i] > 0]
            raise GraphError(f"graph has a directed cycle through {stuck}")
        return tuple(order)

    def topological_order(self) -> list[int]:
        """Parents before children; ties go to the smaller node index."""
        return list(self._order)

    def _reach(self, start: int, step) -> set[int]:
        seen: set[int] = set()
        stack = list(step[start])
        while stack:
            k = stack.pop()
            if k not in seen:
                seen.add(k)
                stack.extend(step[k])
        return seen

    def ancestors(self, i: int | str) -> set[int]:
        return self._reach(self.index(i), self._parents)

    def descendants(self, i: int | str) -> set[int]:
        return self._reach(self.index(i), self._children)

    # -- path statistics -------------------------------------------------

    def _shortest_from(self, s: int) -> dict[int, int]:
        dist = {s: 0}
        queue = deque([s])
        while queue:
            j = queue.popleft()
            for i in self._children[j]:
                if i not in dist:
                    dist[i] = dist[j] + 1
                    queue.append(i)
        return dist

    def diameter(self) -> int:
        """Longest shortest directed path over connected ordered pairs."""
        best = 0
        for s in range(self.d):
            best = max(best, max(self._shortest_from(s).values()))
        return best

    def longest_path(self) -> int:
        """Length (in edges) of the longest directed path."""
        depth = [0] * self.d
        for i in self._order:
            for j in self._parents[i]:
                depth[i] = max(depth[i], depth[j] + 1)
        return max(depth)

    # -- VACA adjacency --------------------------------------------------

    def vaca_adjacency(self, intervened: Iterable[int | str] = ()) -> "VacaAdjacency":
        return VacaAdjacency.build(self, intervened)

    # -- column layout ---------------------------------------------------

    @property
    def node_dims(self) -> tuple[int, ...]:
        return tuple(len(k) for k in self.kinds)

    @property
    def n_columns(self) -> int:
        return sum(self.node_dims)

    @property
    def node_slices(self) -> tuple[slice, ...]:
        out, start = [], 0
        for k in self.node_dims:
            out.append(slice(start, start + k))
            start += k
        return tuple(out)

    @property
    def column_kinds(self) -> tuple[ColumnKind, ...]:
        return tuple(k for node in self.kinds for k in node)

    def columns_of(self, nodes: Iterable[int]) -> list[int]:
        cols = []
        for i in sorted(set(nodes)):
            s = self.node_slices[i]
            cols.extend(range(s.start, s.stop))
        return cols

    def column_names(self) -> list[str]:
        names = []
        for n, dim in zip(self.names, self.node_dims):
            names.extend([n] if dim == 1 else [f"{n}_{k}" for k in range(dim)])
        return names

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {"name": n, "kinds": [str(k) for k in ks]} for n, ks in zip(self.names, self.kinds)
            ],
            "edges": [[self.names[j], self.names[i]] for j, i in sorted(self.edges)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CausalGraph":
        names = [n["name"] for n in data["nodes"]]
        kinds = [[ColumnKind.parse(k) for k in n["kinds"]] for n in data["nodes"]]
        return cls.from_names(names, [tuple(e) for e in data["edges"]], kinds)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def describe(self) -> str:
        edges = ", ".join(f"{self.names[j]}->{self.names[i]}" for j, i in sorted(self.edges))
        return f"nodes=[{', '.join(self.names)}] edges=[{edges}]"


@dataclass(frozen=True)
class VacaAdjacency:
    """d x d binary matrix with ``A[i, j] = 1`` iff j == i or j is a parent of i.

    Rows of intervened nodes keep only their diagonal entry.
    """

    matrix: np.ndarray
    intervened: frozenset[int] = frozenset()

    @classmethod
    def build(cls, graph: CausalGraph, intervened: Iterable[int | str] = ()) -> "VacaAdjacency":
        idx = frozenset(graph.index(i) for i in intervened)
        a = np.eye(graph.d, dtype=np.int8)
        for j, i in graph.edges:
            if i not in idx:
                a[i, j] = 1
        a.setflags(write=False)
        return cls(a, idx)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, VacaAdjacency)
            and self.intervened == other.intervened
            and np.array_equal(self.matrix, other.matrix)
        )

    def __hash__(self):
        return hash((self.matrix.tobytes(), self.intervened))


_NODE_RE = re.compile(r"^\s*([A-Za-z_][\w]*)\s*:\s*(\d+)\s*:\s*(.+?)\s*$")


def _split_list(text: str) -> list[str]:
    text = text.strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise GraphError(f"expected a bracketed list, got {text!r}")
    body = text[1:-1]
    items, depth, cur = [], 0, []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            items.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    items.append("".join(cur))
    return [s.strip() for s in items if s.strip()]


def parse_graph_block(nodes: str, edges: str) -> CausalGraph:
    """Parse ``nodes = [name:dim:kind, ...]`` and ``edges = [a->b, ...]``.

    ``kind`` is one kind for every column of the node, or one kind per column
    separated by ``|`` (e.g. ``R:2:continuous|categorical(4)``).
    """
    names, kinds = [], []
    for item in _split_list(nodes):
        m = _NODE_RE.match(item)
        if not m:
            raise GraphError(f"bad node spec {item!r}; expected name:dim:kind")
        name, dim, kind_text = m.group(1), int(m.group(2)), m.group(3)
        if dim < 1:
            raise GraphError(f"node {name!r} needs dim >= 1")
        parts = [ColumnKind.parse(p) for p in kind_text.split("|")]
        if len(parts) == 1:
            parts = parts * dim
        if len(parts) != dim:
            raise GraphError(f"node {name!r}: {len(parts)} kinds for dim {dim}")
        names.append(name)
        kinds.append(parts)
    pairs = []
    for item in _split_list(edges):
        if "->" not in item:
            raise GraphError(f"bad edge {item!r}; expected a->b")
        a, b = (s.strip() for s in item.split("->", 1))
        pairs.append((a, b))
    return CausalGraph.from_names(names, pairs, kinds)


def format_graph_block(graph: CausalGraph) -> tuple[str, str]:
    nodes = []
    for n, ks in zip(graph.names, graph.kinds):
        uniq = {str(k) for k in ks}
        kind = str(ks[0]) if len(uniq) == 1 else "|".join(str(k) for k in ks)
        nodes.append(f"{n}:{len(ks)}:{kind}")
    edges = [f"{graph.names[j]}->{graph.names[i]}" for j, i in sorted(graph.edges)]
    return "[" + ", ".join(nodes) + "]", "[" + ", ".join(edges) + "]"

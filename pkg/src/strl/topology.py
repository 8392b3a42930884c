"""Network graph: loading, neighbour queries and link mutations.

Nodes are ordered lexicographically by name when a topology is loaded, and
that order fixes the row order of every matrix and state tensor downstream.
"""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TopologyFormatError(ValueError):
    """Unparseable topology document."""


class TopologyValidationError(ValueError):
    """Structurally invalid graph or mutation."""


@dataclass(frozen=True)
class Node:
    id: int
    name: str


@dataclass(frozen=True)
class TopologyMutation:
    added_edges: tuple[tuple[str, str], ...] = ()
    removed_edges: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_json(cls, source: str | Path) -> "TopologyMutation":
        """Parse a list of ``{"add": [a, b]}`` / ``{"remove": [a, b]}`` entries."""
        text = Path(source).read_text(encoding="utf-8") if isinstance(source, Path) else source
        try:
            entries = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TopologyFormatError(f"mutation file: {exc}") from exc
        added, removed = [], []
        for pos, entry in enumerate(entries):
            if not isinstance(entry, dict) or len(entry) != 1:
                raise TopologyFormatError(f"mutation entry {pos}: expected one of add/remove")
            (verb, pair), = entry.items()
            if verb not in ("add", "remove") or len(pair) != 2:
                raise TopologyFormatError(f"mutation entry {pos}: bad entry {entry!r}")
            (added if verb == "add" else removed).append((str(pair[0]), str(pair[1])))
        return cls(tuple(added), tuple(removed))

    def is_empty(self) -> bool:
        return not self.added_edges and not self.removed_edges


@dataclass(frozen=True, eq=False)
class Topology:
    """Immutable undirected simple graph.

    ``edges`` holds index pairs ``(i, j)`` with ``i < j``; ``adjacency`` is the
    matching symmetric 0/1 matrix with a zero diagonal.
    """

    nodes: tuple[Node, ...]
    edges: frozenset[tuple[int, int]]
    adjacency: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.adjacency.setflags(write=False)

    @classmethod
    def from_edges(cls, names: Iterable[str], edges: Iterable[tuple[str, str]]) -> "Topology":
        edges = list(edges)
        names = sorted(set(names).union(*[set(e) for e in edges]))
        if any(not n for n in names):
            raise TopologyValidationError("empty node name")
        index = {n: i for i, n in enumerate(names)}
        pairs: set[tuple[int, int]] = set()
        for a, b in edges:
            if a == b:
                raise TopologyValidationError(f"self-loop on {a!r}")
            key = (min(index[a], index[b]), max(index[a], index[b]))
            if key in pairs:
                raise TopologyValidationError(f"duplicate edge {a!r}-{b!r}")
            pairs.add(key)
        adj = np.zeros((len(names), len(names)), dtype=np.int8)
        for i, j in pairs:
            adj[i, j] = adj[j, i] = 1
        return cls(tuple(Node(i, n) for i, n in enumerate(names)), frozenset(pairs), adj)

    # -- queries ---------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def names(self) -> list[str]:
        return [node.name for node in self.nodes]

    def index(self, name: str) -> int:
        for node in self.nodes:
            if node.name == name:
                return node.id
        raise KeyError(f"unknown node {name!r}")

    def neighbors(self, node: int) -> list[int]:
        if not 0 <= node < self.n:
            raise IndexError(f"node index {node} out of range 0..{self.n - 1}")
        return [int(j) for j in np.flatnonzero(self.adjacency[node])]

    def degree(self, node: int) -> int:
        return len(self.neighbors(node))

    def max_degree(self) -> int:
        return int(self.adjacency.sum(axis=1).max()) if self.n else 0

    def has_edge(self, i: int, j: int) -> bool:
        return bool(self.adjacency[i, j])

    def components(self) -> list[list[int]]:
        """Connected components, each sorted, ordered by smallest member."""
        seen = [False] * self.n
        out = []
        for start in range(self.n):
            if seen[start]:
                continue
            seen[start] = True
            stack, comp = [start], []
            while stack:
                u = stack.pop()
                comp.append(u)
                for v in self.neighbors(u):
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            out.append(sorted(comp))
        return out

    def reachable(self, src: int, dst: int) -> bool:
        return any(src in c and dst in c for c in self.components())

    def edge_names(self) -> list[tuple[str, str]]:
        return [(self.nodes[i].name, self.nodes[j].name) for i, j in sorted(self.edges)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return self.names == other.names and np.array_equal(self.adjacency, other.adjacency)

    def __hash__(self) -> int:
        return hash((tuple(self.names), self.edges))

    # -- serialization ---------------------------------------------------

    def to_edge_list(self) -> str:
        lines = [f"{a} {b}" for a, b in self.edge_names()]
        touched = {i for e in self.edges for i in e}
        lines += [node.name for node in self.nodes if node.id not in touched]
        return "\n".join(lines) + "\n"


def parse_edge_list(text: str) -> Topology:
    """Parse ``<name> <name>`` lines; a lone name declares an isolated node."""
    names: list[str] = []
    edges: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 1:
            names.append(parts[0])
        elif len(parts) == 2:
            edges.append((parts[0], parts[1]))
        else:
            raise TopologyFormatError(f"line {lineno}: expected '<name> <name>', got {raw!r}")
    if not names and not edges:
        raise TopologyFormatError("no nodes in edge list")
    return Topology.from_edges(names, edges)


def parse_graphml(text: str) -> Topology:
    """Read node ids/labels and edge endpoints; every other attribute is ignored."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise TopologyFormatError(f"GraphML line {line}, column {col}: {exc}") from exc
    ns = root.tag[: root.tag.index("}") + 1] if root.tag.startswith("{") else ""
    label_keys = {
        k.get("id")
        for k in root.iter(f"{ns}key")
        if k.get("for") == "node" and k.get("attr.name") == "label"
    }
    labels: dict[str, str] = {}
    for node in root.iter(f"{ns}node"):
        nid = node.get("id")
        if nid is None:
            raise TopologyFormatError("GraphML node without id")
        label = next((d.text for d in node.iter(f"{ns}data") if d.get("key") in label_keys), None)
        labels[nid] = (label or nid).strip().replace(" ", "")
    if len(set(labels.values())) != len(labels):
        raise TopologyValidationError("GraphML node labels are not unique")
    edges = []
    for edge in root.iter(f"{ns}edge"):
        s, t = edge.get("source"), edge.get("target")
        if s not in labels or t not in labels:
            raise TopologyFormatError(f"GraphML edge references unknown node {s!r}/{t!r}")
        edges.append((labels[s], labels[t]))
    return Topology.from_edges(labels.values(), edges)


def load_topology(source: str | Path) -> Topology:
    """Load an edge-list or GraphML file (by ``.graphml`` suffix or XML content)."""
    path = Path(source)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".graphml" or text.lstrip().startswith("<"):
        return parse_graphml(text)
    return parse_edge_list(text)


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("strl") / "data" / name))


def aarnet() -> Topology:
    """The 17-node, 27-link AARNet used by default."""
    return load_topology(bundled_path("aarnet.edges"))


def armidale_mutation() -> TopologyMutation:
    return TopologyMutation.from_json(bundled_path("armidale.json"))


def apply_mutation(
    topology: Topology,
    mutation: TopologyMutation,
    od_pairs: Sequence[tuple[int, int]] | None = None,
) -> Topology:
    """Return a new topology with the mutation applied.

    Node set and ordering are unchanged.  ``od_pairs`` (index pairs) that are
    connected before the mutation must stay connected after it.
    """
    current = set(topology.edges)
    for a, b in mutation.removed_edges:
        i, j = topology.index(a), topology.index(b)
        key = (min(i, j), max(i, j))
        if key not in current:
            raise TopologyValidationError(f"cannot remove missing edge {a!r}-{b!r}")
        current.remove(key)
    for a, b in mutation.added_edges:
        i, j = topology.index(a), topology.index(b)
        if i == j:
            raise TopologyValidationError(f"self-loop on {a!r}")
        key = (min(i, j), max(i, j))
        if key in current:
            raise TopologyValidationError(f"edge {a!r}-{b!r} already exists")
        current.add(key)
    names = topology.names
    result = Topology.from_edges(names, [(names[i], names[j]) for i, j in current])
    if od_pairs is not None:
        for s, d in od_pairs:
            if topology.reachable(s, d) and not result.reachable(s, d):
                raise TopologyValidationError(
                    f"mutation disconnects OD pair {names[s]!r}->{names[d]!r}"
                )
    return result

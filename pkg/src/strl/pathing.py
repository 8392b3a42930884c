"""Turn node scores into routing plans.

A path's score is the sum of the scores of every node on it, endpoints
included.  Paths are ranked by ``(score desc, hop count asc, node sequence
lexicographic)``; scores are summed with :func:`math.fsum` so the ranking does
not depend on summation order.

Maximising a node-score sum over simple paths is a longest-path problem, so a
shortest-path search over transformed edge costs cannot rank paths of
different lengths correctly.  :func:`top_k_paths` keeps Yen's deviation
scheme but solves each spur sub-problem exactly with a bounded depth-first
search.
"""
from __future__ import annotations

import functools
import heapq
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .topology import Topology


class PathValidationError(ValueError):
    pass


class RoutingError(RuntimeError):
    pass


class GraphTooLargeError(ValueError):
    pass


BRUTE_FORCE_MAX_NODES = 12


@dataclass(frozen=True)
class ScoredPath:
    nodes: tuple[int, ...]
    score: float

    def key(self) -> tuple:
        return rank_key(self.nodes, self.score)


def rank_key(nodes: Sequence[int], score: float) -> tuple:
    return (-score, len(nodes), tuple(nodes))


def validate_path(topology: Topology, path: Sequence[int]) -> None:
    if len(path) < 1:
        raise PathValidationError("empty path")
    if len(set(path)) != len(path):
        raise PathValidationError(f"path {list(path)} repeats a node")
    for i in path:
        if not 0 <= i < topology.n:
            raise PathValidationError(f"node {i} out of range")
    for u, v in zip(path, path[1:]):
        if not topology.adjacency[u, v]:
            raise PathValidationError(f"path {list(path)} uses missing edge ({u}, {v})")


def path_score(path: Sequence[int], action, topology: Topology | None = None) -> float:
    if topology is not None:
        validate_path(topology, path)
    a = np.asarray(action, dtype=float)
    return math.fsum(float(a[i]) for i in path)


def all_simple_paths(topology: Topology, src: int, dst: int) -> list[tuple[int, ...]]:
    """Every simple src->dst path (iterative DFS, neighbours ascending)."""
    if src == dst:
        return []
    nbrs = [topology.neighbors(i) for i in range(topology.n)]
    out: list[tuple[int, ...]] = []
    path = [src]
    on_path = {src}
    stack = [iter(nbrs[src])]
    while stack:
        nxt = next(stack[-1], None)
        if nxt is None:
            stack.pop()
            on_path.discard(path.pop())
            continue
        if nxt in on_path:
            continue
        if nxt == dst:
            out.append(tuple(path) + (dst,))
            continue
        path.append(nxt)
        on_path.add(nxt)
        stack.append(iter(nbrs[nxt]))
    return out


def brute_force_top_k(topology: Topology, action, src: int, dst: int, k: int) -> list[ScoredPath]:
    """Ground truth: enumerate all simple paths and sort."""
    if topology.n > BRUTE_FORCE_MAX_NODES:
        raise GraphTooLargeError(f"brute force limited to {BRUTE_FORCE_MAX_NODES} nodes, got {topology.n}")
    scored = [ScoredPath(p, path_score(p, action)) for p in all_simple_paths(topology, src, dst)]
    scored.sort(key=ScoredPath.key)
    return scored[:k]


def _best_spur(
    nbrs: list[list[int]],
    a: list[float],
    root: tuple[int, ...],
    dst: int,
    blocked_nodes: set[int],
    blocked_edges: set[tuple[int, int]],
):
    """Best-ranked completion of ``root`` to ``dst`` under the blocking sets.

    Branch and bound: a partial path can still gain at most the positive
    scores of the nodes it has not visited yet.
    """
    spur = root[-1]
    positive = [max(0.0, x) for x in a]
    base_visited = set(root) | blocked_nodes
    best: list = [None, None]  # key, nodes

    path = list(root)
    visited = set(base_visited)

    def bound_gain() -> float:
        return math.fsum(positive[i] for i in range(len(a)) if i not in visited)

    def dfs(u: int) -> None:
        for v in nbrs[u]:
            if v in visited or (u, v) in blocked_edges:
                continue
            if v == dst:
                cand = path + [v]
                key = rank_key(cand, math.fsum(a[i] for i in cand))
                if best[0] is None or key < best[0]:
                    best[0], best[1] = key, cand
                continue
            path.append(v)
            visited.add(v)
            if best[0] is None or math.fsum(a[i] for i in path) + bound_gain() >= -best[0][0]:
                dfs(v)
            visited.discard(v)
            path.pop()

    if spur == dst:
        return None
    visited.discard(dst)
    dfs(spur)
    return best[1]


def top_k_paths(topology: Topology, action, src: int, dst: int, k: int) -> list[ScoredPath]:
    """The ``k`` best simple paths by node-score sum (Yen deviation scheme).

    Returns fewer than ``k`` paths when fewer exist, and an empty list when
    ``dst`` is unreachable.
    """
    if src == dst:
        raise PathValidationError("source equals destination")
    if k < 1:
        raise ValueError("k must be >= 1")
    a = [float(x) for x in np.asarray(action, dtype=float)]
    if len(a) != topology.n:
        raise PathValidationError(f"action length {len(a)} != {topology.n} nodes")
    nbrs = [topology.neighbors(i) for i in range(topology.n)]
    first = _best_spur(nbrs, a, (src,), dst, set(), set())
    if first is None:
        return []
    accepted = [tuple(first)]
    candidates: list[tuple] = []
    seen = {tuple(first)}
    while len(accepted) < k:
        prev = accepted[-1]
        for i in range(len(prev) - 1):
            root = prev[: i + 1]
            blocked_edges = {
                (p[i], p[i + 1]) for p in accepted if len(p) > i + 1 and p[: i + 1] == root
            }
            spur = _best_spur(nbrs, a, root, dst, set(root[:-1]), blocked_edges)
            if spur is None:
                continue
            cand = tuple(spur)
            if cand not in seen:
                seen.add(cand)
                heapq.heappush(candidates, rank_key(cand, math.fsum(a[j] for j in cand)))
        if not candidates:
            break
        accepted.append(heapq.heappop(candidates)[2])
    return [ScoredPath(p, math.fsum(a[j] for j in p)) for p in accepted]


class PathIndex:
    """All simple paths per OD pair, enumerated once per topology.

    Ranking scores every candidate with one sparse product, then re-ranks the
    near-top candidates with exact sums so the order matches
    :func:`top_k_paths` exactly.
    """

    def __init__(self, topology: Topology, od_pairs: Sequence[tuple[int, int]]):
        self.topology = topology
        self.od_pairs = [tuple(p) for p in od_pairs]
        self.paths: dict[tuple[int, int], list[tuple[int, ...]]] = {}
        self.incidence: dict[tuple[int, int], np.ndarray] = {}
        for s, d in self.od_pairs:
            ps = all_simple_paths(topology, s, d)
            self.paths[(s, d)] = ps
            inc = np.zeros((len(ps), topology.n))
            for row, p in enumerate(ps):
                inc[row, list(p)] = 1.0
            self.incidence[(s, d)] = inc

    @classmethod
    def cached(cls, topology: Topology, od_pairs: Sequence[tuple[int, int]]) -> "PathIndex":
        return _cached_index(topology, tuple(tuple(p) for p in od_pairs))

    def top_k(self, action, src: int, dst: int, k: int) -> list[ScoredPath]:
        paths = self.paths[(src, dst)]
        if not paths:
            return []
        a = np.asarray(action, dtype=float)
        approx = self.incidence[(src, dst)] @ a
        if len(paths) > k:
            kth = np.partition(-approx, k - 1)[k - 1]
            slack = 1e-9 * (1.0 + float(np.abs(a).sum()))
            rows = np.flatnonzero(-approx <= kth + slack)
        else:
            rows = range(len(paths))
        scored = [ScoredPath(paths[r], math.fsum(float(a[i]) for i in paths[r])) for r in rows]
        scored.sort(key=ScoredPath.key)
        return scored[:k]

    def random_path(self, src: int, dst: int, rng: np.random.Generator) -> tuple[int, ...]:
        paths = self.paths[(src, dst)]
        if not paths:
            raise RoutingError(f"no path {src}->{dst}")
        return paths[int(rng.integers(len(paths)))]


@functools.lru_cache(maxsize=16)
def _cached_index(topology: Topology, od_pairs: tuple[tuple[int, int], ...]) -> PathIndex:
    return PathIndex(topology, od_pairs)


@dataclass
class RoutingPlan:
    """Per OD pair: candidate paths with traffic shares summing to 1."""

    routes: dict[tuple[int, int], list[tuple[tuple[int, ...], float]]]
    scores: dict[tuple[int, int], list[float]] | None = None

    def validate(self, topology: Topology) -> None:
        for (s, d), entries in self.routes.items():
            if not entries:
                raise RoutingError(f"OD pair {s}->{d} has no paths")
            for path, share in entries:
                if path[0] != s or path[-1] != d:
                    raise RoutingError(f"path {path} does not join {s}->{d}")
                try:
                    validate_path(topology, path)
                except PathValidationError as exc:
                    raise RoutingError(str(exc)) from None
                if share < 0:
                    raise RoutingError("negative share")
            total = math.fsum(sh for _, sh in entries)
            if abs(total - 1.0) > 1e-12:
                raise RoutingError(f"shares for {s}->{d} sum to {total}")

    def to_json(self, topology: Topology | None = None) -> str:
        names = topology.names if topology is not None else None
        out = []
        for (s, d), entries in sorted(self.routes.items()):
            scores = self.scores.get((s, d)) if self.scores else None
            out.append({
                "src": names[s] if names else s,
                "dst": names[d] if names else d,
                "paths": [
                    {
                        "nodes": [names[i] for i in p] if names else list(p),
                        "share": share,
                        **({"score": scores[j]} if scores else {}),
                    }
                    for j, (p, share) in enumerate(entries)
                ],
            })
        return json.dumps(out, indent=2)


def build_routing_plan(
    topology: Topology,
    action,
    od_pairs: Sequence[tuple[int, int]],
    k: int,
    index: PathIndex | None = None,
    top1: bool = False,
) -> RoutingPlan:
    """Equal split across the top-k paths of every pair (top-1 if ``top1``)."""
    routes, scores = {}, {}
    kk = 1 if top1 else k
    use_index = index is not None and (index.topology is topology or index.topology == topology)
    for s, d in od_pairs:
        if use_index and (s, d) in index.paths:
            best = index.top_k(action, s, d, kk)
        else:
            best = top_k_paths(topology, action, s, d, kk)
        if not best:
            raise RoutingError(f"OD pair {topology.names[s]}->{topology.names[d]} is unreachable")
        share = 1.0 / len(best)
        routes[(s, d)] = [(p.nodes, share) for p in best]
        scores[(s, d)] = [p.score for p in best]
    return RoutingPlan(routes, scores)

"""Inference in the learned space: likely futures and shortest latent paths."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .model import Similarity
from .reach_metric import EmbeddingTable


class NoPath(LookupError):
    """The goal cannot be reached from the start in the latent graph."""


@dataclass(frozen=True)
class LatentGraph:
    nodes: np.ndarray
    edges: list[tuple[int, int, float]]
    k_neighbors: int
    adjacency: dict[int, list[tuple[int, float]]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        adj: dict[int, list[tuple[int, float]]] = {int(u): [] for u in self.nodes}
        for u, v, w in self.edges:
            if w < 0:
                raise ValueError(f"negative weight on {u}->{v}")
            adj.setdefault(u, []).append((v, w))
            adj.setdefault(v, [])
        object.__setattr__(self, "adjacency", adj)

    def out_degree(self, u: int) -> int:
        return len(self.adjacency[u])


@dataclass(frozen=True)
class PlanResult:
    path: list[int]
    total_cost: float


def most_likely_future(table: EmbeddingTable, sim: Similarity, s: int) -> int:
    """argmax over x != s of d(phi(s), psi(x)); ties go to the smaller index."""
    scores = table.scores(sim)[table.row(s)]
    best, best_score = None, -np.inf
    for i in np.argsort(table.states, kind="stable"):
        x = int(table.states[i])
        if x == s:
            continue
        if best is None or scores[i] > best_score:
            best, best_score = x, scores[i]
    if best is None:
        raise ValueError("no candidate states besides the query")
    return best


def build_graph(table: EmbeddingTable, sim: Similarity, k_neighbors: int = 8) -> LatentGraph:
    """Edges u -> v to the k highest-scoring successors, weight max(0, 1 - score)."""
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    s = table.scores(sim)
    states = table.states
    edges = []
    for i, u in enumerate(states.tolist()):
        others = [j for j in range(len(states)) if j != i]
        # highest score first, smaller state index on ties
        others.sort(key=lambda j: (-s[i, j], states[j]))
        for j in others[:k_neighbors]:
            edges.append((u, int(states[j]), max(0.0, 1.0 - float(s[i, j]))))
    return LatentGraph(states.copy(), edges, k_neighbors)


def dijkstra(graph: LatentGraph, s0: int, goal: int) -> PlanResult:
    """Minimum-cost path; equal costs resolve to the lexicographically
    smallest node sequence. Raises NoPath if the goal is unreachable."""
    adj = graph.adjacency
    if s0 not in adj or goal not in adj:
        raise KeyError("start and goal must be graph nodes")
    heap: list[tuple[float, tuple[int, ...]]] = [(0.0, (s0,))]
    settled: set[int] = set()
    while heap:
        cost, path = heapq.heappop(heap)
        u = path[-1]
        if u in settled:
            continue
        settled.add(u)
        if u == goal:
            return PlanResult(list(path), cost)
        for v, w in adj[u]:
            if v not in settled:
                heapq.heappush(heap, (cost + w, path + (v,)))
    raise NoPath(f"{goal} is unreachable from {s0}")

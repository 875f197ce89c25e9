"""Support-graph analysis: strong connectivity, diameter, and coloring."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .logmat import LogSparseMatrix


@dataclass(frozen=True, eq=False)
class SupportGraph:
    """Directed graph with an edge ``i -> j`` for every stored entry ``K_ij``.

    ``max_degree`` is measured on the undirected support without self-loops:
    ``i ~ j`` when either ``(i, j)`` or ``(j, i)`` is an edge and ``i != j``.
    """

    n: int
    out_edges: tuple[tuple[int, ...], ...]
    in_edges: tuple[tuple[int, ...], ...]
    neighbors: tuple[frozenset[int], ...]

    @property
    def max_degree(self) -> int:
        return max((len(s) for s in self.neighbors), default=0)

    @property
    def m(self) -> int:
        return sum(len(e) for e in self.out_edges)

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[tuple[int, int]]) -> "SupportGraph":
        out: list[list[int]] = [[] for _ in range(n)]
        inn: list[list[int]] = [[] for _ in range(n)]
        nb: list[set[int]] = [set() for _ in range(n)]
        for i, j in sorted(set((int(a), int(b)) for a, b in edges)):
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for n={n}")
            out[i].append(j)
            inn[j].append(i)
            if i != j:
                nb[i].add(j)
                nb[j].add(i)
        return cls(n, tuple(map(tuple, out)), tuple(map(tuple, inn)), tuple(map(frozenset, nb)))

    @classmethod
    def from_matrix(cls, M: LogSparseMatrix) -> "SupportGraph":
        return cls.from_edges(M.n, list(zip(M.rows.tolist(), M.cols.tolist())))


@dataclass(frozen=True)
class Coloring:
    """Partition of ``[n]`` into blocks of pairwise non-adjacent vertices."""

    blocks: tuple[tuple[int, ...], ...]

    @property
    def p(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return sum(len(b) for b in self.blocks)

    def block_of(self) -> np.ndarray:
        lab = np.empty(self.n, dtype=np.int64)
        for ell, b in enumerate(self.blocks):
            lab[list(b)] = ell
        return lab

    @classmethod
    def from_blocks(cls, blocks: Sequence[Sequence[int]]) -> "Coloring":
        return cls(tuple(tuple(sorted(int(v) for v in b)) for b in blocks))


def validate_coloring(G: SupportGraph, coloring: Coloring) -> None:
    """Raise ``ValueError`` unless ``coloring`` is a proper coloring of ``G``."""
    seen = [False] * G.n
    for b in coloring.blocks:
        if not b:
            raise ValueError("coloring has an empty block")
        for v in b:
            if not 0 <= v < G.n:
                raise ValueError(f"vertex {v} out of range for n={G.n}")
            if seen[v]:
                raise ValueError(f"vertex {v} appears in more than one block")
            seen[v] = True
    if not all(seen):
        missing = seen.index(False)
        raise ValueError(f"vertex {missing} is not covered by the coloring")
    for b in coloring.blocks:
        members = set(b)
        for v in b:
            clash = G.neighbors[v] & members
            if clash:
                raise ValueError(f"adjacent vertices {v} and {min(clash)} share a block")


def scc_decompose(G: SupportGraph) -> list[list[int]]:
    """Strongly connected components, sources first (topological order).

    Iterative Tarjan, so deep graphs do not hit the recursion limit.
    """
    n = G.n
    index = [-1] * n
    low = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    comps: list[list[int]] = []
    counter = 0
    for root in range(n):
        if index[root] != -1:
            continue
        work = [(root, 0)]
        while work:
            v, pos = work[-1]
            if pos == 0:
                index[v] = low[v] = counter
                counter += 1
                stack.append(v)
                on_stack[v] = True
            edges = G.out_edges[v]
            while pos < len(edges):
                w = edges[pos]
                pos += 1
                if index[w] == -1:
                    work[-1] = (v, pos)
                    work.append((w, 0))
                    break
                if on_stack[w]:
                    low[v] = min(low[v], index[w])
            else:
                work.pop()
                if work:
                    u = work[-1][0]
                    low[u] = min(low[u], low[v])
                if low[v] == index[v]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on_stack[w] = False
                        comp.append(w)
                        if w == v:
                            break
                    comps.append(sorted(comp))
    # Tarjan emits sinks first.
    comps.reverse()
    return comps


def is_balanceable(G: SupportGraph) -> bool:
    return len(scc_decompose(G)) == 1


def diameter(G: SupportGraph) -> float:
    """Largest directed shortest-path distance; ``inf`` unless strongly connected."""
    if G.n == 1:
        return 0
    if not is_balanceable(G):
        return math.inf
    src = [i for i, e in enumerate(G.out_edges) for _ in e]
    dst = [j for e in G.out_edges for j in e]
    A = csr_matrix((np.ones(len(src)), (src, dst)), shape=(G.n, G.n))
    dist = shortest_path(A, method="D", directed=True, unweighted=True)
    return int(dist.max())


def greedy_coloring(G: SupportGraph) -> Coloring:
    """Vertices in index order, each given the lowest color unused by its neighbours."""
    color = [-1] * G.n
    for v in range(G.n):
        used = {color[u] for u in G.neighbors[v] if color[u] >= 0}
        c = 0
        while c in used:
            c += 1
        color[v] = c
    p = max(color, default=-1) + 1
    blocks: list[list[int]] = [[] for _ in range(p)]
    for v, c in enumerate(color):
        blocks[c].append(v)
    return Coloring(tuple(tuple(b) for b in blocks))

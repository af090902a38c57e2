"""Undirected graphs, BA/WS generators and the topological queries used by
the environments and models."""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Literal

import numpy as np
from scipy import sparse


class InvalidSpecError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


WS_MAX_RETRIES = 100


class Graph:
    """Immutable simple undirected graph on nodes ``0..num_nodes-1``."""

    def __init__(self, num_nodes: int, edges: Iterable[tuple[int, int]] = ()):
        if num_nodes < 0:
            raise ValueError("num_nodes must be non-negative")
        canon = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < num_nodes and 0 <= j < num_nodes):
                raise IndexError(f"edge ({i}, {j}) out of range for {num_nodes} nodes")
            canon.add((min(i, j), max(i, j)))
        self.num_nodes = num_nodes
        self.edges: tuple[tuple[int, int], ...] = tuple(sorted(canon))

    def __repr__(self) -> str:
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Graph)
            and self.num_nodes == other.num_nodes
            and self.edges == other.edges
        )

    def __hash__(self) -> int:
        return hash((self.num_nodes, self.edges))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def edge_array(self) -> np.ndarray:
        """Directed (2, 2|E|) index array holding both orientations of every edge."""
        if not self.edges:
            return np.zeros((2, 0), dtype=np.int64)
        e = np.asarray(self.edges, dtype=np.int64)
        return np.concatenate([e.T, e.T[::-1]], axis=1)

    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.adjacency], dtype=np.int64)

    def neighbor_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` over each node's open neighbourhood.

        ``values`` may carry leading batch axes; the node axis is last.
        """
        values = np.asarray(values, dtype=np.float64)
        flat = values.reshape(-1, self.num_nodes)
        return np.asarray(flat @ self.sparse_adjacency).reshape(values.shape)

    @cached_property
    def sparse_adjacency(self) -> sparse.csr_matrix:
        src, dst = self.edge_array
        data = np.ones(src.size, dtype=np.float64)
        return sparse.csr_matrix((data, (src, dst)), shape=(self.num_nodes,) * 2)

    def closed_adjacency_mask(self) -> np.ndarray:
        """Dense boolean adjacency with self-loops (GAT attention support)."""
        mask = np.eye(self.num_nodes, dtype=bool)
        src, dst = self.edge_array
        mask[src, dst] = True
        return mask

    def _check_node(self, i: int) -> None:
        if not 0 <= i < self.num_nodes:
            raise IndexError(f"node {i} out of range for {self.num_nodes} nodes")

    def bfs_distances(self, source: int) -> np.ndarray:
        """Hop distances from ``source``; unreachable nodes get ``num_nodes``."""
        return self._bfs(source, None)

    def _bfs(self, source: int, max_depth: int | None) -> np.ndarray:
        self._check_node(source)
        dist = np.full(self.num_nodes, self.num_nodes, dtype=np.int64)
        dist[source] = 0
        queue = deque([source])
        adj = self.adjacency
        while queue:
            u = queue.popleft()
            d = dist[u] + 1
            if max_depth is not None and d > max_depth:
                continue
            for v in adj[u]:
                if dist[v] == self.num_nodes:
                    dist[v] = d
                    queue.append(v)
        return dist

    def k_hop_subgraph(self, ego: int, k: int) -> tuple[Graph, np.ndarray, int]:
        """Induced subgraph on the closed ``k``-hop neighbourhood of ``ego``.

        Nodes are ordered by (hop distance, original index), so the ego is
        always local index 0. Returns ``(subgraph, node_map, ego_local)``
        where ``node_map[local] = original``.
        """
        if k < 0:
            raise ValueError("k must be >= 0")
        dist = self._bfs(ego, k)
        inside = np.flatnonzero(dist <= k)
        node_map = inside[np.lexsort((inside, dist[inside]))]
        local = {int(v): n for n, v in enumerate(node_map)}
        adj = self.adjacency
        sub_edges = [
            (local[int(i)], local[j])
            for i in node_map
            for j in adj[i]
            if i < j and j in local
        ]
        return Graph(len(node_map), sub_edges), node_map, 0

    def is_connected(self) -> bool:
        if self.num_nodes == 0:
            return True
        return bool(np.all(self.bfs_distances(0) < self.num_nodes))

    def relabel(self, perm: np.ndarray) -> Graph:
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = np.asarray(perm)
        return Graph(self.num_nodes, [(perm[i], perm[j]) for i, j in self.edges])

    # canonical edge-list text format

    def to_edgelist(self) -> str:
        lines = [str(self.num_nodes)] + [f"{i} {j}" for i, j in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edgelist(cls, text: str) -> Graph:
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if not rows or len(rows[0]) != 1:
            raise ValueError("edge list must start with a single node-count line")
        n = int(rows[0][0])
        edges = []
        for row in rows[1:]:
            if len(row) != 2:
                raise ValueError(f"malformed edge line: {' '.join(row)!r}")
            edges.append((int(row[0]), int(row[1])))
        return cls(n, edges)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_edgelist())

    @classmethod
    def load(cls, path: str | os.PathLike) -> Graph:
        with open(path, encoding="ascii") as fh:
            return cls.from_edgelist(fh.read())


# -- generators ---------------------------------------------------------------


@dataclass(frozen=True)
class GraphSpec:
    family: Literal["ba", "ws"]
    num_nodes: int
    seed: int = 0
    m: int = 1
    k: int = 4
    p: float = 0.1

    @classmethod
    def barabasi_albert(cls, num_nodes: int, m: int = 1, seed: int = 0) -> GraphSpec:
        return cls("ba", num_nodes, seed, m=m)

    @classmethod
    def watts_strogatz(
        cls, num_nodes: int, k: int = 4, p: float = 0.1, seed: int = 0
    ) -> GraphSpec:
        return cls("ws", num_nodes, seed, k=k, p=p)

    def validate(self) -> None:
        if self.family == "ba":
            if not 1 <= self.m < self.num_nodes:
                raise InvalidSpecError(
                    f"BA requires 1 <= m < num_nodes, got m={self.m}, N={self.num_nodes}"
                )
        elif self.family == "ws":
            if self.k % 2 or self.k < 0 or self.k >= self.num_nodes:
                raise InvalidSpecError(
                    f"WS requires even k < num_nodes, got k={self.k}, N={self.num_nodes}"
                )
            if not 0.0 <= self.p <= 1.0:
                raise InvalidSpecError(f"WS rewire probability {self.p} not in [0, 1]")
        else:
            raise InvalidSpecError(f"unknown graph family {self.family!r}")

    def label(self) -> str:
        if self.family == "ba":
            return f"BA(m={self.m},N={self.num_nodes})"
        return f"WS(k={self.k},p={self.p},N={self.num_nodes})"


def generate(spec: GraphSpec) -> Graph:
    spec.validate()
    if spec.family == "ba":
        return _barabasi_albert(spec.num_nodes, spec.m, np.random.default_rng(spec.seed))
    for attempt in range(WS_MAX_RETRIES):
        rng = np.random.default_rng(spec.seed + attempt)
        g = _watts_strogatz(spec.num_nodes, spec.k, spec.p, rng)
        if g.is_connected():
            return g
    raise GenerationError(
        f"{spec.label()} stayed disconnected after {WS_MAX_RETRIES} reseeds"
    )


def _barabasi_albert(n: int, m: int, rng: np.random.Generator) -> Graph:
    # complete core on m+1 nodes, then each new node attaches to m distinct targets
    edges = [(i, j) for i in range(m + 1) for j in range(i + 1, m + 1)]
    repeated = []
    for i, j in edges:
        repeated.extend((i, j))
    for new in range(m + 1, n):
        targets: list[int] = []
        while len(targets) < m:
            t = repeated[rng.integers(len(repeated))]
            if t not in targets:
                targets.append(t)
        for t in targets:
            edges.append((t, new))
            repeated.extend((t, new))
    return Graph(n, edges)


def _watts_strogatz(n: int, k: int, p: float, rng: np.random.Generator) -> Graph:
    nbrs = [set() for _ in range(n)]
    for u in range(n):
        for j in range(1, k // 2 + 1):
            v = (u + j) % n
            nbrs[u].add(v)
            nbrs[v].add(u)
    for j in range(1, k // 2 + 1):
        for u in range(n):
            v = (u + j) % n
            if v not in nbrs[u] or rng.random() >= p:
                continue
            if len(nbrs[u]) >= n - 1:
                continue
            w = int(rng.integers(n))
            while w == u or w in nbrs[u]:
                w = int(rng.integers(n))
            nbrs[u].discard(v)
            nbrs[v].discard(u)
            nbrs[u].add(w)
            nbrs[w].add(u)
    return Graph(n, [(u, v) for u in range(n) for v in nbrs[u] if u < v])


# free-function forms of the queries

def degrees(g: Graph) -> np.ndarray:
    return g.degrees()


def bfs_distances(g: Graph, source: int) -> np.ndarray:
    return g.bfs_distances(source)


def k_hop_subgraph(g: Graph, ego: int, k: int) -> tuple[Graph, np.ndarray, int]:
    return g.k_hop_subgraph(ego, k)

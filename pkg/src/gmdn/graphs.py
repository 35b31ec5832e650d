"""Simple undirected graphs, random generators, relabeling."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class InvalidParameter(ValueError):
    pass


def make_rng(*keys: int) -> np.random.Generator:
    """PCG64 stream keyed by a tuple of integers (seed, stream kind, index...).

    Streams for different keys are statistically independent, so work can be
    split across workers without changing results.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, u < v, sorted lexicographically
    features: np.ndarray = field(default=None)  # (n, F)

    def __post_init__(self):
        n = int(self.num_nodes)
        if n < 1:
            raise InvalidParameter("graph must have at least one node")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(e):
            e = np.sort(e, axis=1)
            if np.any(e[:, 0] == e[:, 1]):
                raise InvalidParameter("self-loops are not allowed")
            if e.min() < 0 or e.max() >= n:
                raise InvalidParameter("edge endpoint out of range")
            e = np.unique(e, axis=0)
        feats = self.features
        if feats is None:
            feats = np.zeros((n, 0))
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise InvalidParameter(f"features must have shape (n, F), got {feats.shape}")
        e.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "features", feats)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        """Sorted adjacency list per node."""
        src, dst = self.directed_edges
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        bounds = np.searchsorted(src, np.arange(self.num_nodes + 1))
        return [dst[bounds[i]:bounds[i + 1]] for i in range(self.num_nodes)]

    @cached_property
    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Both orientations of every edge as (src, dst) arrays."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        return np.concatenate([u, v]), np.concatenate([v, u])

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.num_nodes)

    def with_features(self, features) -> "Graph":
        return Graph(self.num_nodes, self.edges, features)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


def generate_ba(n: int, m: int, seed: int) -> Graph:
    """Barabási–Albert graph grown from a complete graph on ``m`` nodes.

    Each new node attaches to ``m`` distinct existing nodes chosen with
    probability proportional to degree.  Edge count is
    ``m*(m-1)/2 + m*(n-m)``.
    """
    if not 1 <= m < n:
        raise InvalidParameter(f"BA requires 1 <= m < n, got m={m}, n={n}")
    rng = make_rng(seed)
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    # each node appears in ``targets`` once per incident edge
    targets = [i for e in edges for i in e]
    if m == 1:
        targets = [0]  # single seed node has degree 0; give it unit weight
    for new in range(m, n):
        chosen: set[int] = set()
        pool = np.asarray(targets)
        while len(chosen) < m:
            chosen.add(int(pool[rng.integers(len(pool))]))
        for t in sorted(chosen):
            edges.append((t, new))
            targets.extend((t, new))
        if m == 1 and new == 1:
            targets.remove(0)  # drop the placeholder weight once real degree exists
    return Graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2))


def generate_er(n: int, p: float, seed: int) -> Graph:
    """G(n, p): each unordered pair present independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise InvalidParameter(f"edge probability must lie in [0, 1], got {p}")
    if n < 1:
        raise InvalidParameter("n must be positive")
    rng = make_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    return Graph(n, np.stack([iu[keep], ju[keep]], axis=1))


def permute(g: Graph, perm) -> Graph:
    """Relabel node ``i`` as ``perm[i]``; features travel with their nodes."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (g.num_nodes,) or not np.array_equal(np.sort(perm), np.arange(g.num_nodes)):
        raise InvalidParameter("perm must be a bijection on 0..n-1")
    feats = np.empty_like(g.features)
    feats[perm] = g.features
    return Graph(g.num_nodes, perm[g.edges], feats)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def two_block_graph(
    block_size: int = 30, p_in: float = 0.3, p_out: float = 0.02, seed: int = 0
) -> Graph:
    """Two-community stochastic block model with identity node features."""
    n = 2 * block_size
    rng = make_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    same = (iu < block_size) == (ju < block_size)
    keep = rng.random(len(iu)) < np.where(same, p_in, p_out)
    return Graph(n, np.stack([iu[keep], ju[keep]], axis=1), np.eye(n))


def graph_to_dict(g: Graph) -> dict:
    return {
        "n": g.num_nodes,
        "edges": g.edges.tolist(),
        "features": g.features.tolist() if g.features.shape[1] else [],
        "num_features": int(g.features.shape[1]),
    }


def graph_from_dict(d: dict) -> Graph:
    n = int(d["n"])
    width = int(d.get("num_features", 0))
    feats = np.asarray(d["features"], dtype=np.float64).reshape(n, width) if width else None
    return Graph(n, np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2), feats)

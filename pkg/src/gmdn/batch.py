"""Disjoint-union batches of graphs for full-batch training."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .graphs import Graph
from .sir import Dataset, SimulationRecord, record_features


@dataclass(eq=False)
class GraphBatch:
    x: np.ndarray  # (N, F)
    src: np.ndarray  # directed edges, global node ids
    dst: np.ndarray
    node_graph: np.ndarray  # (N,) sample index of each node
    sizes: np.ndarray  # (B,) graph size, also the binomial trial count
    y: np.ndarray | None = None  # (B,) targets

    @property
    def num_graphs(self) -> int:
        return len(self.sizes)

    @property
    def num_nodes(self) -> int:
        return len(self.x)

    @cached_property
    def node_counts(self) -> np.ndarray:
        return np.bincount(self.node_graph, minlength=self.num_graphs).astype(np.float64)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Row v sums over the neighbours of v."""
        n = self.num_nodes
        return sp.csr_matrix(
            (np.ones(len(self.src)), (self.dst, self.src)), shape=(n, n)
        )

    @cached_property
    def gcn_adjacency(self) -> sp.csr_matrix:
        """D^-1/2 (A + I) D^-1/2 with degrees counted including the self-loop."""
        a = self.adjacency + sp.identity(self.num_nodes, format="csr")
        d = np.asarray(a.sum(axis=1)).ravel()
        inv = sp.diags(1.0 / np.sqrt(d))
        return (inv @ a @ inv).tocsr()

    @cached_property
    def mean_adjacency(self) -> sp.csr_matrix:
        """Row v averages over the neighbours of v (isolated nodes get zeros)."""
        deg = np.asarray(self.adjacency.sum(axis=1)).ravel()
        return (sp.diags(1.0 / np.maximum(deg, 1.0)) @ self.adjacency).tocsr()

    @cached_property
    def gcn_mean_adjacency(self) -> sp.csr_matrix:
        """(D + I)^-1 (A + I): mean over the closed neighbourhood."""
        a = self.adjacency + sp.identity(self.num_nodes, format="csr")
        return (sp.diags(1.0 / np.asarray(a.sum(axis=1)).ravel()) @ a).tocsr()

    def slice(self, start: int, stop: int) -> "GraphBatch":
        """Contiguous range of samples (nodes and edges are stored in sample order)."""
        lo, hi = np.searchsorted(self.node_graph, [start, stop])
        owner = self.node_graph[self.src]
        elo, ehi = np.searchsorted(owner, [start, stop])
        return GraphBatch(
            self.x[lo:hi],
            self.src[elo:ehi] - lo,
            self.dst[elo:ehi] - lo,
            self.node_graph[lo:hi] - start,
            self.sizes[start:stop],
            None if self.y is None else self.y[start:stop],
        )

    def chunks(self, size: int) -> list["GraphBatch"]:
        if self.num_graphs <= size:
            return [self]
        return [self.slice(i, min(i + size, self.num_graphs)) for i in range(0, self.num_graphs, size)]

    def subset(self, samples: Sequence[int]) -> "GraphBatch":
        samples = np.asarray(samples, dtype=np.int64)
        keep = np.isin(self.node_graph, samples)
        remap = np.full(self.num_nodes, -1, dtype=np.int64)
        remap[keep] = np.arange(keep.sum())
        sample_map = np.full(self.num_graphs, -1, dtype=np.int64)
        sample_map[samples] = np.arange(len(samples))
        ek = keep[self.src] & keep[self.dst]
        return GraphBatch(
            self.x[keep],
            remap[self.src[ek]],
            remap[self.dst[ek]],
            sample_map[self.node_graph[keep]],
            self.sizes[samples],
            None if self.y is None else self.y[samples],
        )


def from_graphs(graphs: Sequence[Graph], features: Sequence[np.ndarray] | None = None, y=None) -> GraphBatch:
    """Stack graphs into one block-diagonal batch (features default to ``g.features``)."""
    if not len(graphs):
        empty = np.zeros(0, dtype=np.int64)
        width = 0 if features is None else 5
        return GraphBatch(np.zeros((0, width)), empty, empty, empty, empty.copy(), np.zeros(0))
    xs, srcs, dsts, owner, sizes = [], [], [], [], []
    offset = 0
    for i, g in enumerate(graphs):
        f = g.features if features is None else np.asarray(features[i], dtype=np.float64)
        s, d = g.directed_edges
        xs.append(f)
        srcs.append(s + offset)
        dsts.append(d + offset)
        owner.append(np.full(g.num_nodes, i, dtype=np.int64))
        sizes.append(g.num_nodes)
        offset += g.num_nodes
    return GraphBatch(
        np.concatenate(xs, axis=0),
        np.concatenate(srcs).astype(np.int64),
        np.concatenate(dsts).astype(np.int64),
        np.concatenate(owner),
        np.asarray(sizes, dtype=np.int64),
        None if y is None else np.asarray(y, dtype=np.float64),
    )


def from_records(graphs: Sequence[Graph], records: Sequence[SimulationRecord]) -> GraphBatch:
    """One sample per simulation record, node features built from the record."""
    return from_graphs(
        [graphs[r.graph_id] for r in records],
        [record_features(r) for r in records],
        [r.target for r in records],
    )


def summary_features(rec: SimulationRecord) -> np.ndarray:
    """Structure-blind description of a run: [beta, gamma, R0, 1, infected fraction]."""
    return np.array(
        [rec.beta, rec.gamma, rec.beta / rec.gamma, 1.0, rec.initial_mask.mean()]
    )


def summary_batch(graphs: Sequence[Graph], records: Sequence[SimulationRecord]) -> GraphBatch:
    """Each record as a single edgeless pseudo-node carrying its summary vector.

    The binomial trial count stays the true graph size.
    """
    b = len(records)
    return GraphBatch(
        np.stack([summary_features(r) for r in records]) if b else np.zeros((0, 5)),
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        np.arange(b, dtype=np.int64),
        np.asarray([graphs[r.graph_id].num_nodes for r in records], dtype=np.int64),
        np.asarray([r.target for r in records], dtype=np.float64),
    )


def dataset_batches(ds: Dataset, structure_blind: bool = False) -> dict[str, GraphBatch]:
    make = summary_batch if structure_blind else from_records
    return {s: make(ds.graphs, ds.records_in(s)) for s in ("train", "val", "test")}

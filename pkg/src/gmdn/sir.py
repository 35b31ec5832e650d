"""Discrete-time stochastic SIR on graphs and SIR dataset files.

Each step runs synchronously:

1. every infectious node independently infects each susceptible neighbour
   with probability ``beta``;
2. every node that was infectious at the start of the step recovers with
   probability ``gamma``.

Nodes infected during a step become infectious on the next one.  A run ends
when no node is infectious; its target is the number of nodes ever infected,
initial infections included.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graphs import Graph, InvalidParameter, generate_ba, generate_er, make_rng

INIT_PROBS = (0.01, 0.05, 0.10)
BETA_RANGE = (0.0, 1.0)
GAMMA_RANGE = (0.1, 1.0)
NUM_FEATURES = 5
FORMAT_NAME = "gmdn-sir-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

# stream kinds for make_rng keys
_GRAPH_STREAM, _SIM_STREAM, _SPLIT_STREAM = 0, 1, 2


class StepCapExceeded(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


@dataclass(frozen=True)
class SirParams:
    beta: float
    gamma: float
    init_prob: float = 0.01

    def __post_init__(self):
        if not BETA_RANGE[0] <= self.beta <= BETA_RANGE[1]:
            raise InvalidParameter(f"beta must lie in [0, 1], got {self.beta}")
        if not GAMMA_RANGE[0] <= self.gamma <= GAMMA_RANGE[1]:
            raise InvalidParameter(f"gamma must lie in [0.1, 1], got {self.gamma}")
        if not 0.0 < self.init_prob < 1.0:
            raise InvalidParameter(f"init_prob must lie in (0, 1), got {self.init_prob}")

    @property
    def r0(self) -> float:
        return self.beta / self.gamma


@dataclass
class SimulationRecord:
    graph_id: int
    beta: float
    gamma: float
    init_prob: float
    initial_mask: np.ndarray
    target: int

    def __eq__(self, other):
        if not isinstance(other, SimulationRecord):
            return NotImplemented
        return (
            self.graph_id == other.graph_id
            and self.beta == other.beta
            and self.gamma == other.gamma
            and self.init_prob == other.init_prob
            and np.array_equal(self.initial_mask, other.initial_mask)
            and self.target == other.target
        )


def sample_initial_mask(n: int, init_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(init_prob) per node, redrawn until non-empty."""
    while True:
        mask = rng.random(n) < init_prob
        if mask.any():
            return mask


def step_cap(n: int) -> int:
    return 10 * n + 1000


def run_sir(
    g: Graph,
    beta: float,
    gamma: float,
    initial_mask: np.ndarray,
    rng: np.random.Generator,
    observer: Callable[[int, np.ndarray, np.ndarray, np.ndarray], None] | None = None,
) -> int:
    """Run dynamics to absorption from ``initial_mask``; return ever-infected count.

    ``observer(step, S, I, R)`` is called on the initial state and after
    every step.
    """
    n = g.num_nodes
    infectious = np.asarray(initial_mask, dtype=bool).copy()
    if infectious.shape != (n,):
        raise InvalidParameter("initial mask length must equal the node count")
    susceptible = ~infectious
    recovered = np.zeros(n, dtype=bool)
    src, dst = g.directed_edges
    if observer is not None:
        observer(0, susceptible, infectious, recovered)
    step = 0
    cap = step_cap(n)
    while infectious.any():
        step += 1
        if step > cap:
            raise StepCapExceeded(f"SIR run exceeded {cap} steps")
        active = infectious[src] & susceptible[dst]
        hit = dst[active][rng.random(int(active.sum())) < beta]
        recover = infectious & (rng.random(n) < gamma)
        newly = np.zeros(n, dtype=bool)
        newly[hit] = True
        susceptible &= ~newly
        recovered |= recover
        infectious = (infectious & ~recover) | newly
        if observer is not None:
            observer(step, susceptible, infectious, recovered)
    return int(n - susceptible.sum())


def simulate_sir(g: Graph, params: SirParams, seed, graph_id: int = 0) -> SimulationRecord:
    """One run: draw the initial infections from ``params.init_prob``, then simulate."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    mask = sample_initial_mask(g.num_nodes, params.init_prob, rng)
    target = run_sir(g, params.beta, params.gamma, mask, rng)
    return SimulationRecord(graph_id, params.beta, params.gamma, params.init_prob, mask, target)


def build_node_features(n_or_graph, params: SirParams, initial_mask) -> np.ndarray:
    """Per node ``[beta, gamma, beta/gamma, 1, initially_infected]``."""
    n = n_or_graph.num_nodes if isinstance(n_or_graph, Graph) else int(n_or_graph)
    mask = np.asarray(initial_mask, dtype=bool)
    if mask.shape != (n,):
        raise InvalidParameter("initial mask length must equal the node count")
    if params.gamma <= 0:
        raise InvalidParameter("gamma must be positive")
    x = np.empty((n, NUM_FEATURES))
    x[:, 0] = params.beta
    x[:, 1] = params.gamma
    x[:, 2] = params.beta / params.gamma
    x[:, 3] = 1.0
    x[:, 4] = mask
    return x


def record_features(rec: SimulationRecord) -> np.ndarray:
    p = SirParams(rec.beta, rec.gamma, rec.init_prob)
    return build_node_features(len(rec.initial_mask), p, rec.initial_mask)


# ----------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    family: str
    n: int
    connectivities: list
    graphs_per_conn: int
    sims_per_config: int
    seed: int
    graphs: list[Graph] = field(default_factory=list)
    records: list[SimulationRecord] = field(default_factory=list)
    split: list[str] = field(default_factory=list)  # per graph
    init_probs: tuple = INIT_PROBS

    def __post_init__(self):
        for rec in self.records:
            if not 0 <= rec.graph_id < len(self.graphs):
                raise ValueError(f"record refers to unknown graph {rec.graph_id}")
        if len(self.split) != len(self.graphs):
            raise ValueError("split must assign every graph")

    def records_in(self, *splits: str) -> list[SimulationRecord]:
        return [r for r in self.records if self.split[r.graph_id] in splits]

    def split_counts(self) -> dict[str, int]:
        return {s: len(self.records_in(s)) for s in SPLITS}

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.header() == other.header()
            and self.graphs == other.graphs
            and self.records == other.records
            and list(self.split) == list(other.split)
        )

    def header(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "family": self.family,
            "n": self.n,
            "connectivities": list(self.connectivities),
            "graphs_per_conn": self.graphs_per_conn,
            "sims_per_config": self.sims_per_config,
            "init_probs": list(self.init_probs),
            "seed": self.seed,
            "num_graphs": len(self.graphs),
            "num_records": len(self.records),
        }


def make_graph(family: str, n: int, connectivity, seed_key: Sequence[int]) -> Graph:
    seed = int(np.random.SeedSequence([int(k) for k in seed_key]).generate_state(1)[0])
    if family == "BA":
        return generate_ba(n, int(connectivity), seed)
    if family == "ER":
        return generate_er(n, float(connectivity), seed)
    raise InvalidParameter(f"unknown graph family {family!r}")


def split_graphs(conn_of_graph: Sequence[int], seed: int, fractions=(0.8, 0.1, 0.1)) -> list[str]:
    """Graph-level train/val/test assignment, stratified by connectivity."""
    conn_of_graph = np.asarray(conn_of_graph)
    rng = make_rng(seed, _SPLIT_STREAM)
    split = [""] * len(conn_of_graph)
    for c in np.unique(conn_of_graph):
        ids = np.flatnonzero(conn_of_graph == c)
        ids = ids[rng.permutation(len(ids))]
        n_train = int(round(fractions[0] * len(ids)))
        n_val = int(round(fractions[1] * len(ids)))
        for k, gid in enumerate(ids):
            split[gid] = "train" if k < n_train else "val" if k < n_train + n_val else "test"
    return split


def _simulate_graph(args) -> list[SimulationRecord]:
    g, gid, seed, sims, init_probs = args
    out = []
    for pi, init_prob in enumerate(init_probs):
        for s in range(sims):
            rng = make_rng(seed, _SIM_STREAM, gid, pi, s)
            beta = rng.uniform(*BETA_RANGE)
            gamma = rng.uniform(*GAMMA_RANGE)
            out.append(simulate_sir(g, SirParams(beta, gamma, init_prob), rng, graph_id=gid))
    return out


def generate_dataset(
    family: str,
    n: int,
    connectivities: Sequence,
    graphs_per_conn: int,
    sims_per_config: int,
    seed: int,
    workers: int = 1,
    init_probs: Sequence[float] = INIT_PROBS,
) -> Dataset:
    """Random graphs x initial-infection probabilities x simulations.

    Every simulation draws from its own stream keyed by (seed, graph, init
    prob, run), so the result does not depend on ``workers``.
    """
    if min(graphs_per_conn, sims_per_config, n, len(connectivities)) <= 0:
        raise InvalidParameter("all counts must be positive")
    graphs, conn_of = [], []
    for ci, conn in enumerate(connectivities):
        for k in range(graphs_per_conn):
            graphs.append(make_graph(family, n, conn, (seed, _GRAPH_STREAM, ci, k)))
            conn_of.append(ci)
    jobs = [(g, gid, seed, sims_per_config, tuple(init_probs)) for gid, g in enumerate(graphs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_simulate_graph, jobs, chunksize=4))
    else:
        chunks = [_simulate_graph(j) for j in jobs]
    records = [r for chunk in chunks for r in chunk]
    return Dataset(
        family=family,
        n=n,
        connectivities=list(connectivities),
        graphs_per_conn=graphs_per_conn,
        sims_per_config=sims_per_config,
        seed=seed,
        graphs=graphs,
        records=records,
        split=split_graphs(conn_of, seed),
        init_probs=tuple(init_probs),
    )


# ----------------------------------------------------------------------
# file format: JSON lines (header, one line per graph, one line per record)


def _mask_to_hex(mask: np.ndarray) -> str:
    return np.packbits(mask.astype(np.uint8), bitorder="little").tobytes().hex()


def _mask_from_hex(s: str, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(s), dtype=np.uint8), bitorder="little")
    if len(bits) < n:
        raise ValueError("mask too short")
    return bits[:n].astype(bool)


def dumps_dataset(d: Dataset) -> bytes:
    lines = [json.dumps(d.header(), sort_keys=True)]
    for gid, g in enumerate(d.graphs):
        lines.append(
            json.dumps({"graph_id": gid, "split": d.split[gid], "n": g.num_nodes, "edges": g.edges.tolist()})
        )
    for r in d.records:
        lines.append(
            json.dumps(
                {
                    "graph_id": r.graph_id,
                    "beta": r.beta,
                    "gamma": r.gamma,
                    "init_prob": r.init_prob,
                    "mask": _mask_to_hex(r.initial_mask),
                    "target": r.target,
                }
            )
        )
    return ("\n".join(lines) + "\n").encode()


def save_dataset(d: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps_dataset(d))
    os.replace(tmp, path)


def loads_dataset(data: bytes) -> Dataset:
    offset = 0
    lines = []
    while offset < len(data):
        end = data.find(b"\n", offset)
        if end < 0:
            raise DatasetFormatError("truncated line (missing newline)", offset)
        lines.append((offset, data[offset:end]))
        offset = end + 1

    def parse(k):
        pos, raw = lines[k]
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"invalid JSON: {e.msg}", pos + e.pos) from None
        if not isinstance(obj, dict):
            raise DatasetFormatError("expected a JSON object", pos)
        return obj

    if not lines:
        raise DatasetFormatError("empty file", 0)
    header = parse(0)
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("not an SIR dataset file", 0)
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported version {header.get('version')!r}, expected {FORMAT_VERSION}", 0
        )
    ng, nr = int(header["num_graphs"]), int(header["num_records"])
    if len(lines) != 1 + ng + nr:
        raise DatasetFormatError(
            f"expected {1 + ng + nr} lines, found {len(lines)}", len(data)
        )
    graphs, split, records = [], [], []
    for k in range(1, 1 + ng):
        obj = parse(k)
        try:
            if obj["graph_id"] != k - 1 or obj["split"] not in SPLITS:
                raise ValueError("bad graph id or split")
            graphs.append(Graph(int(obj["n"]), np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2)))
            split.append(obj["split"])
        except (KeyError, ValueError, TypeError) as e:
            raise DatasetFormatError(f"bad graph line: {e}", lines[k][0]) from None
    for k in range(1 + ng, len(lines)):
        obj = parse(k)
        try:
            gid = int(obj["graph_id"])
            records.append(
                SimulationRecord(
                    gid,
                    float(obj["beta"]),
                    float(obj["gamma"]),
                    float(obj["init_prob"]),
                    _mask_from_hex(obj["mask"], graphs[gid].num_nodes),
                    int(obj["target"]),
                )
            )
        except (KeyError, ValueError, TypeError, IndexError) as e:
            raise DatasetFormatError(f"bad record line: {e}", lines[k][0]) from None
    return Dataset(
        family=header["family"],
        n=int(header["n"]),
        connectivities=list(header["connectivities"]),
        graphs_per_conn=int(header["graphs_per_conn"]),
        sims_per_config=int(header["sims_per_config"]),
        seed=int(header["seed"]),
        graphs=graphs,
        records=records,
        split=split,
        init_probs=tuple(header["init_probs"]),
    )


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())

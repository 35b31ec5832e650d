"""Structure reconstruction from distances between node output mixtures.

Each node gets a univariate Gaussian mixture from a node-level GMDN.  The
model is trained with an L1 loss that pulls the distance between linked
nodes towards 0 and between sampled non-linked pairs towards 2.  Scores for
link classification are ``1 / (1 + distance)``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .batch import GraphBatch, from_graphs
from .distances import DISTANCE_FNS, distance_to_probability
from .graphs import Graph, InvalidParameter, make_rng
from .model import GMDN, ModelConfig
from .optim import adam_step

POS_TARGET, NEG_TARGET = 0.0, 2.0


@dataclass
class LinkSplit:
    """Positive (undirected) edges and sampled directed non-edges per split."""

    pos: dict[str, np.ndarray]
    neg: dict[str, np.ndarray]
    directed_negatives: bool = True

    def pairs(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (pairs, labels) with positives first."""
        p, n = self.pos[split], self.neg[split]
        pairs = np.concatenate([p, n], axis=0)
        labels = np.concatenate([np.ones(len(p)), np.zeros(len(n))])
        return pairs, labels


def make_link_split(g: Graph, fractions=(0.85, 0.05, 0.10), seed: int = 0) -> LinkSplit:
    """Partition edges into train/val/test and draw as many non-edges per split.

    Non-edges are ordered pairs (u, v), u != v, with {u, v} not an edge,
    sampled uniformly without replacement across all splits.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise InvalidParameter("fractions must be three non-negative numbers summing to 1")
    rng = make_rng(seed, 11)
    n, e = g.num_nodes, g.num_edges
    edges = g.edges[rng.permutation(e)]
    n_val = int(round(fractions[1] * e))
    n_test = int(round(fractions[2] * e))
    n_train = e - n_val - n_test
    cuts = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, e)}
    pos = {k: edges[a:b] for k, (a, b) in cuts.items()}

    available = n * (n - 1) - 2 * e
    if available < e:
        raise InvalidParameter(f"graph too dense: need {e} non-edges, only {available} exist")
    adj = g.edge_set()
    chosen: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    if available <= 4 * e:
        cand = [(u, v) for u in range(n) for v in range(n)
                if u != v and (min(u, v), max(u, v)) not in adj]
        idx = rng.choice(len(cand), size=e, replace=False)
        chosen = [cand[i] for i in idx]
    else:
        while len(chosen) < e:
            u, v = (int(x) for x in rng.integers(n, size=2))
            if u == v or (min(u, v), max(u, v)) in adj or (u, v) in seen:
                continue
            seen.add((u, v))
            chosen.append((u, v))
    chosen = np.asarray(chosen, dtype=np.int64).reshape(-1, 2)
    neg = {k: chosen[a:b] for k, (a, b) in cuts.items()}
    return LinkSplit(pos, neg)


# ----------------------------------------------------------------------
# ranking metrics


def auc_ap(scores, labels) -> tuple[float, float]:
    """ROC AUC (Mann-Whitney, ties count 1/2) and average precision.

    AP sums precision times recall increments over distinct score
    thresholds, highest first.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative")
    ranks = rankdata(scores)
    auc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp_at, n_at = tp[last], last + 1
    recall = tp_at / n_pos
    precision = tp_at / n_at
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return float(auc), ap


# ----------------------------------------------------------------------
# model and training


@dataclass(frozen=True)
class ReconConfig:
    distance: str = "J"
    num_components: int = 10
    hidden: int = 128
    neighbor_agg: str = "sum"
    lr: float = 0.01
    epochs: int = 500
    patience: int = 200
    seed: int = 0
    message_passing: str = "full"  # "full" graph or "train" edges only

    def __post_init__(self):
        if self.distance not in DISTANCE_FNS:
            raise ValueError(f"distance must be one of {tuple(DISTANCE_FNS)}")
        if self.message_passing not in ("full", "train"):
            raise ValueError("message_passing must be 'full' or 'train'")

    def model_config(self, in_features: int) -> ModelConfig:
        return ModelConfig(
            family="gaussian",
            num_components=self.num_components,
            conv="gcn",
            num_layers=1,
            hidden=self.hidden,
            level="node",
            in_features=in_features,
            seed=self.seed,
            neighbor_agg=self.neighbor_agg,
        )


def node_mixtures(model: GMDN, batch: GraphBatch, tape: Tape | None = None, p=None):
    out = model.forward(batch, tape, p)
    return ad.exp(out.log_weights), out.mu, out.sigma


def pair_distances(kind: str, mix, pairs: np.ndarray) -> Tensor:
    w, mu, sigma = mix
    u, v = pairs[:, 0], pairs[:, 1]
    fn = DISTANCE_FNS[kind]
    return fn(
        ad.gather_rows(w, u), ad.gather_rows(mu, u), ad.gather_rows(sigma, u),
        ad.gather_rows(w, v), ad.gather_rows(mu, v), ad.gather_rows(sigma, v),
    )


def reconstruction_loss(distances, labels) -> Tensor:
    """Mean |d - t| with t = 0 for linked pairs and 2 otherwise."""
    labels = np.asarray(labels)
    target = np.where(labels.astype(bool), POS_TARGET, NEG_TARGET)
    d = ad.as_tensor(distances)
    if d.shape != target.shape:
        raise ValueError("distances and labels must align")
    return ad.reduce_mean(ad.abs_(d - target))


def encoder_graph(g: Graph, split: LinkSplit, mode: str) -> Graph:
    if mode == "full":
        return g
    return Graph(g.num_nodes, split.pos["train"], g.features)


@dataclass
class ReconResult:
    model: GMDN
    metrics: dict
    history: list = field(default_factory=list)


def score_pairs(model: GMDN, batch: GraphBatch, kind: str, pairs: np.ndarray) -> np.ndarray:
    d = pair_distances(kind, node_mixtures(model, batch), pairs).value
    return distance_to_probability(np.maximum(d, 0.0))


def fit_reconstruction(g: Graph, split: LinkSplit, cfg: ReconConfig) -> ReconResult:
    """Gradient descent on the L1 distance loss, early-stopped on validation AUC."""
    if g.features.shape[1] == 0:
        g = g.with_features(np.eye(g.num_nodes))
    batch = from_graphs([encoder_graph(g, split, cfg.message_passing)])
    model = GMDN(cfg.model_config(g.features.shape[1]))
    train_pairs, train_labels = split.pairs("train")
    val_pairs, val_labels = split.pairs("val")
    names = model.store.names()
    best = (-np.inf, None, -1)
    bad = 0
    history = []
    for epoch in range(cfg.epochs):
        tape = Tape()
        p = model.store.leaves(tape)
        loss = reconstruction_loss(
            pair_distances(cfg.distance, node_mixtures(model, batch, tape, p), train_pairs), train_labels
        )
        grads = ad.backward(tape, loss, [p[k] for k in names])
        adam_step(model.store, dict(zip(names, grads)), cfg.lr)
        auc_val = auc_ap(score_pairs(model, batch, cfg.distance, val_pairs), val_labels)[0]
        history.append({"epoch": epoch, "loss": loss.item(), "val_auc": auc_val})
        if auc_val > best[0]:
            best, bad = (auc_val, model.store.copy(), epoch), 0
        else:
            bad += 1
            if bad > cfg.patience:
                break
    model.store = best[1]
    metrics = {"best_epoch": best[2], "val_auc": best[0]}
    for s in ("val", "test"):
        pairs, labels = split.pairs(s)
        auc, ap = auc_ap(score_pairs(model, batch, cfg.distance, pairs), labels)
        metrics[f"{s}_auc"], metrics[f"{s}_ap"] = auc, ap
    return ReconResult(model, metrics, history)


def select_and_fit(g: Graph, split: LinkSplit, grid: Sequence[ReconConfig]) -> ReconResult:
    """Model selection on validation AUC for one split (first config wins ties)."""
    results = [fit_reconstruction(g, split, c) for c in grid]
    best = int(np.argmax([r.metrics["val_auc"] for r in results]))
    res = results[best]
    res.metrics["config_index"] = best
    return res


def load_edge_list(path, features_path=None) -> Graph:
    """Whitespace edge list ("u v" per line, '#' comments); optional feature matrix sidecar."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            u, v = line.split()[:2]
            rows.append((int(u), int(v)))
    edges = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    feats = None
    if features_path is not None:
        feats = np.loadtxt(features_path, ndmin=2)
    n = len(feats) if feats is not None else (int(edges.max()) + 1 if len(edges) else 1)
    return Graph(n, edges, feats)


def format_mean_std(values) -> str:
    """Percent mean(std) with one decimal, e.g. ``87.8(1.2)``."""
    v = 100.0 * np.asarray(values, dtype=np.float64)
    std = float(v.std(ddof=0)) if len(v) > 1 else 0.0
    return f"{v.mean():.1f}({std:.1f})"

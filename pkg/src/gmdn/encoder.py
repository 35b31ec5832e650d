"""Deep graph network encoder: stacked convolutions and graph readout.

Three layer kinds share one interface:

``gin``   h' = relu(MLP((1 + eps) h_v + sum_{u in N(v)} h_u)), MLP = Linear-ReLU-Linear
``gcn``   h' = relu(sum_{u in N(v) + v} h_u W / sqrt((deg_v + 1)(deg_u + 1)) + b)
          (with ``neighbor_agg="mean"``: average over the closed neighbourhood)
``dense`` h' = relu(h W + b), no message passing (structure-blind MDN)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .batch import GraphBatch
from .optim import ParamStore

CONV_KINDS = ("gin", "gcn", "dense")
READOUTS = ("sum", "mean")


@dataclass(frozen=True)
class EncoderConfig:
    conv: str = "gin"
    num_layers: int = 2
    hidden: int = 64
    readout: str = "sum"
    concat_states: bool = False
    neighbor_agg: str = "sum"

    def __post_init__(self):
        if self.neighbor_agg not in ("sum", "mean"):
            raise ValueError("neighbor_agg must be 'sum' or 'mean'")
        if self.conv not in CONV_KINDS:
            raise ValueError(f"conv must be one of {CONV_KINDS}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if self.num_layers < 1 or self.hidden < 1:
            raise ValueError("num_layers and hidden must be positive")

    @property
    def out_dim(self) -> int:
        return self.hidden * self.num_layers if self.concat_states else self.hidden


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(store: ParamStore, cfg: EncoderConfig, in_dim: int, rng: np.random.Generator) -> None:
    d = cfg.hidden
    for layer in range(cfg.num_layers):
        fan = in_dim if layer == 0 else d
        pre = f"enc.{layer}."
        if cfg.conv == "gin":
            store.add(pre + "eps", np.zeros(()))
            store.add(pre + "W1", uniform_init(rng, fan, (fan, d)))
            store.add(pre + "b1", uniform_init(rng, fan, (d,)))
            store.add(pre + "W2", uniform_init(rng, d, (d, d)))
            store.add(pre + "b2", uniform_init(rng, d, (d,)))
        else:
            store.add(pre + "W", uniform_init(rng, fan, (fan, d)))
            store.add(pre + "b", uniform_init(rng, fan, (d,)))


def encode_nodes(batch: GraphBatch, cfg: EncoderConfig, p: dict[str, Tensor]) -> list[Tensor]:
    """Node states for layers 0..L (layer 0 is the input features)."""
    h = Tensor(batch.x)
    states = [h]
    for layer in range(cfg.num_layers):
        pre = f"enc.{layer}."
        if cfg.conv == "gin":
            if cfg.neighbor_agg == "sum":
                z = ad.gin_aggregate(batch.adjacency, h, p[pre + "eps"])
            else:
                z = ad.gin_aggregate(batch.mean_adjacency, h, p[pre + "eps"], symmetric=False)
            z = ad.linear_relu(z, p[pre + "W1"], p[pre + "b1"])
            h = ad.linear_relu(z, p[pre + "W2"], p[pre + "b2"])
        elif cfg.conv == "gcn":
            prop = batch.gcn_adjacency if cfg.neighbor_agg == "sum" else batch.gcn_mean_adjacency
            h = ad.relu(ad.spmm(prop, h @ p[pre + "W"]) + p[pre + "b"])
        else:
            h = ad.linear_relu(h, p[pre + "W"], p[pre + "b"])
        states.append(h)
    return states


def final_states(states: list[Tensor], cfg: EncoderConfig) -> Tensor:
    """h_v: last layer, or concatenation of all hidden layers."""
    if cfg.concat_states:
        return ad.concat(states[1:], axis=1)
    return states[-1]


def aggregate(h: Tensor, batch: GraphBatch, readout: str) -> Tensor:
    """Permutation-invariant pooling of node rows per graph."""
    if readout == "sum":
        return ad.segment_sum(h, batch.node_graph, batch.num_graphs)
    return ad.segment_mean(h, batch.node_graph, batch.num_graphs)


def readout_graph(
    h: Tensor, batch: GraphBatch, readout: str, weight: Tensor, bias: Tensor
) -> Tensor:
    """Pool f_r(h_v) = h_v W + b over each graph.

    f_r is linear, so pooling first and applying W afterwards is exact; the
    bias is pooled alongside (times n for sum, once for mean).
    """
    return linear_on_pooled(aggregate(h, batch, readout), batch, readout, weight, bias)


def linear_on_pooled(pooled: Tensor, batch: GraphBatch, readout: str, weight: Tensor, bias: Tensor) -> Tensor:
    out = pooled @ weight
    if readout == "sum":
        return out + Tensor(batch.node_counts[:, None]) * bias
    return out + bias

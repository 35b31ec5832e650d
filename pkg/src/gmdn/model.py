"""Graph Mixture Density Network: one shared encoder feeding mixture heads."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .batch import GraphBatch
from .encoder import EncoderConfig, encode_nodes, final_states, init_encoder
from .graphs import make_rng
from .mixture import MixtureOutput, init_heads, mixture_head
from .optim import ParamStore, load_store, save_store


@dataclass(frozen=True)
class ModelConfig:
    family: str = "binomial"
    num_components: int = 5
    conv: str = "gin"
    num_layers: int = 2
    hidden: int = 64
    readout: str = "sum"
    level: str = "graph"
    alpha: float = 1.0
    in_features: int = 5
    concat_states: bool = False
    neighbor_agg: str = "sum"
    seed: int = 0

    def __post_init__(self):
        if self.num_components < 1:
            raise ValueError("num_components must be >= 1")
        if self.level not in ("graph", "node"):
            raise ValueError("level must be 'graph' or 'node'")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        self.encoder  # validates encoder fields

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            self.conv, self.num_layers, self.hidden, self.readout, self.concat_states, self.neighbor_agg
        )

    @property
    def alpha_vector(self) -> np.ndarray:
        return np.full(self.num_components, float(self.alpha))

    @property
    def structure_blind(self) -> bool:
        return self.conv == "dense"

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class GMDN:
    """Encoder + gating readout + C emission sub-networks over one ParamStore.

    ``conv="dense"`` turns the encoder into a plain MLP over a per-sample
    summary vector, which is the structure-blind MDN baseline; ``C=1`` is the
    unimodal DGN baseline.
    """

    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None):
        self.cfg = cfg
        if store is None:
            store = ParamStore()
            rng = make_rng(cfg.seed, 7)
            init_encoder(store, cfg.encoder, cfg.in_features, rng)
            init_heads(store, cfg.encoder.out_dim, cfg.num_components, cfg.family, rng)
        self.store = store

    def encode(self, batch: GraphBatch, p: dict[str, Tensor]) -> Tensor:
        return final_states(encode_nodes(batch, self.cfg.encoder, p), self.cfg.encoder)

    def forward(self, batch: GraphBatch, tape: Tape | None = None, p: dict[str, Tensor] | None = None) -> MixtureOutput:
        if p is None:
            p = self.store.leaves(tape)
        h = self.encode(batch, p)
        return mixture_head(
            h, batch, p, self.cfg.family, self.cfg.num_components, self.cfg.level, self.cfg.readout
        )

    def __call__(self, batch: GraphBatch) -> MixtureOutput:
        return self.forward(batch)

    # ------------------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        extra = dict(extra or {})
        extra["config_json"] = np.frombuffer(json.dumps(self.cfg.to_dict()).encode(), dtype=np.uint8)
        save_store(self.store, path, extra)

    @classmethod
    def load(cls, path) -> tuple["GMDN", dict]:
        store, extra = load_store(path)
        cfg = ModelConfig(**json.loads(extra.pop("config_json").tobytes().decode()))
        return cls(cfg, store), extra

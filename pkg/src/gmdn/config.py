"""Experiment configuration files (YAML or JSON), validated before any compute."""

from __future__ import annotations

import hashlib
import itertools
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .model import ModelConfig
from .reconstruction import ReconConfig
from .sir import INIT_PROBS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSpec(_Strict):
    name: str = "dataset"
    family: Literal["ER", "BA"]
    n: int = Field(gt=1)
    connectivities: list[float] = Field(min_length=1)
    graphs_per_conn: int = Field(gt=0)
    sims_per_config: int = Field(gt=0)
    init_probs: list[float] = Field(default_factory=lambda: list(INIT_PROBS), min_length=1)

    @field_validator("init_probs")
    @classmethod
    def _probs(cls, v):
        if any(not 0.0 < p <= 1.0 for p in v):
            raise ValueError("init_probs must lie in (0, 1]")
        return v


class GenerateConfig(_Strict):
    seed: int = 0
    datasets: list[DatasetSpec] = Field(min_length=1)

    @model_validator(mode="after")
    def _unique(self):
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ValueError("dataset names must be unique")
        return self


class ModelGrid(_Strict):
    """Lists expand to their Cartesian product; scalars are fixed."""

    kind: Literal["gmdn", "mdn", "dgn"] = "gmdn"
    family: Literal["binomial", "gaussian"] = "binomial"
    num_components: list[int] = [5]
    conv: list[Literal["gin", "gcn"]] = ["gin"]
    num_layers: list[int] = [2]
    hidden: list[int] = [64]
    readout: list[Literal["sum", "mean"]] = ["sum"]
    alpha: list[float] = [1.0]
    concat_states: bool = False
    neighbor_agg: Literal["sum", "mean"] = "sum"

    def expand(self, seed: int) -> list[ModelConfig]:
        out = []
        for c, conv, layers, hidden, readout, alpha in itertools.product(
            self.num_components, self.conv, self.num_layers, self.hidden, self.readout, self.alpha
        ):
            cfg = ModelConfig(
                family=self.family, num_components=c, conv=conv, num_layers=layers, hidden=hidden,
                readout=readout, alpha=alpha, concat_states=self.concat_states,
                neighbor_agg=self.neighbor_agg, seed=seed,
            )
            if self.kind == "dgn":
                cfg = cfg.replace(num_components=1)
            elif self.kind == "mdn":
                cfg = cfg.replace(conv="dense", readout="mean")
            if cfg not in out:
                out.append(cfg)
        return out


class TrainSection(_Strict):
    epochs: int = Field(default=600, gt=0)
    patience: int = Field(default=30, ge=0)
    lr: float = Field(default=1e-4, ge=0)
    m_steps_per_e_step: int = Field(default=1, gt=0)
    chunk_size: int = Field(default=1000, gt=0)
    early_stopping: bool = True
    refit: bool = False
    checkpoint_every: int = Field(default=25, gt=0)
    stop_after: Optional[int] = Field(default=None, gt=0)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, patience=min(self.patience, self.epochs), lr=self.lr,
            m_steps_per_e_step=self.m_steps_per_e_step, chunk_size=self.chunk_size,
            early_stopping=self.early_stopping,
        )


class TrainExperiment(_Strict):
    seed: int = 0
    dataset: str
    model: ModelGrid = ModelGrid()
    train: TrainSection = TrainSection()


class EvaluateConfig(_Strict):
    seed: int = 0
    model: str
    dataset: str
    split: Literal["train", "val", "test"] = "test"
    baselines: list[Literal["RAND", "HIST"]] = ["RAND", "HIST"]


class TransferConfig(_Strict):
    seed: int = 0
    model: str
    datasets: list[str] = Field(min_length=1)
    split: Literal["train", "val", "test", "all"] = "all"


class GeneratedGraphs(_Strict):
    family: Literal["ER", "BA"]
    n: int = Field(gt=1)
    connectivity: float
    count: int = Field(default=1, gt=0)


class TraceConfig(_Strict):
    seed: int = 0
    model: str
    dataset: Optional[str] = None
    graph_ids: list[int] = [0]
    graphs: Optional[GeneratedGraphs] = None
    gamma: float = Field(default=0.3, gt=0, le=1)
    r0_min: float = Field(default=0.1, gt=0)
    r0_max: float = Field(default=3.0, gt=0)
    num_points: int = Field(default=20, gt=0)
    init_prob: float = Field(default=0.05, gt=0, le=1)

    @model_validator(mode="after")
    def _source(self):
        if (self.dataset is None) == (self.graphs is None):
            raise ValueError("give exactly one of 'dataset' or 'graphs'")
        if self.r0_min > self.r0_max:
            raise ValueError("r0_min must not exceed r0_max")
        if self.r0_max * self.gamma > 1.0:
            raise ValueError("r0_max * gamma must be <= 1 (beta is a probability)")
        return self


class TwoBlockSpec(_Strict):
    block_size: int = Field(default=30, gt=1)
    p_in: float = Field(default=0.3, ge=0, le=1)
    p_out: float = Field(default=0.02, ge=0, le=1)
    seed: int = 0


class EdgeListSpec(_Strict):
    path: str
    features: Optional[str] = None


class ReconGrid(_Strict):
    num_components: list[int] = [50]
    hidden: list[int] = [512]
    neighbor_agg: list[Literal["sum", "mean"]] = ["sum"]
    lr: list[float] = [0.01]
    epochs: int = Field(default=300, gt=0)
    patience: int = Field(default=50, ge=0)
    message_passing: Literal["full", "train"] = "full"

    def expand(self, distance: str, seed: int) -> list[ReconConfig]:
        return [
            ReconConfig(distance=distance, num_components=c, hidden=h, neighbor_agg=agg, lr=lr,
                        epochs=self.epochs, patience=self.patience, seed=seed,
                        message_passing=self.message_passing)
            for c, h, agg, lr in itertools.product(self.num_components, self.hidden, self.neighbor_agg, self.lr)
        ]


class ReconstructConfig(_Strict):
    seed: int = 0
    graph: Union[TwoBlockSpec, EdgeListSpec] = TwoBlockSpec()
    distances: list[Literal["J", "L2", "B"]] = ["J"]
    num_splits: int = Field(default=5, gt=0)
    fractions: tuple[float, float, float] = (0.85, 0.05, 0.10)
    grid: ReconGrid = ReconGrid()


SCHEMAS = {
    "generate": GenerateConfig,
    "train": TrainExperiment,
    "evaluate": EvaluateConfig,
    "transfer": TransferConfig,
    "trace": TraceConfig,
    "reconstruct": ReconstructConfig,
}


def load_config(command: str, path, seed: int | None = None) -> BaseModel:
    """Parse and validate; ``seed`` (when given) overrides the file's seed."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML/JSON: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    try:
        return SCHEMAS[command].model_validate(raw)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def config_hash(cfg: BaseModel) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()

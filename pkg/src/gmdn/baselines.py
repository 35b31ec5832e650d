"""Reference models: RAND, HIST, structure-blind MDN, unimodal DGN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import GMDN, ModelConfig

HIST_FLOOR = 1e-9


def rand_loglik(n: int) -> float:
    """Uniform 1/n over outcomes: log-likelihood ln(1/n) for any target."""
    if n < 1:
        raise ValueError("graph size must be positive")
    return -float(np.log(n))


@dataclass
class HistModel:
    probs: np.ndarray  # over outcomes 0..n

    @property
    def n(self) -> int:
        return len(self.probs) - 1

    def loglik(self, y) -> np.ndarray:
        y = np.asarray(y)
        if np.any(y < 0) or np.any(y > self.n) or np.any(y != np.round(y)):
            raise ValueError("target outside the histogram support 0..n")
        return np.log(self.probs[y.astype(np.int64)])


def hist_fit(targets, n: int, floor: float = HIST_FLOOR) -> HistModel:
    """Normalized outcome frequencies over 0..n with ``floor`` mass added to every bin."""
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets > n):
        raise ValueError("targets must lie in 0..n")
    counts = np.bincount(targets, minlength=n + 1).astype(np.float64)
    probs = counts / max(counts.sum(), 1.0) + floor
    return HistModel(probs / probs.sum())


def hist_loglik(model: HistModel, y) -> np.ndarray:
    return model.loglik(y)


def mdn_model(cfg: ModelConfig) -> GMDN:
    """Mixture head over a dense network fed with per-run summaries (no structure)."""
    return GMDN(cfg.replace(conv="dense", readout="mean"))


def unimodal_dgn_model(cfg: ModelConfig) -> GMDN:
    """The full graph model restricted to a single binomial component."""
    return GMDN(cfg.replace(num_components=1))

"""Mixture heads: gating weights, per-component emissions, likelihoods, prior.

Works at graph level (one mixture per sample, heads applied to pooled node
states) or node level (one mixture per node, no pooling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Tensor
from .batch import GraphBatch
from .encoder import aggregate, linear_on_pooled, uniform_init
from .optim import ParamStore

FAMILIES = ("binomial", "gaussian")
P_FLOOR = 1e-6
SIGMA_FLOOR = 1e-3
WEIGHT_FLOOR = 1e-12
LOG_2PI = float(np.log(2.0 * np.pi))


class SupportError(ValueError):
    pass


def params_per_component(family: str) -> int:
    return {"binomial": 1, "gaussian": 2}[family]


@dataclass
class MixtureOutput:
    """Mixture per row: log mixing weights (rows, C) plus emission parameters.

    Binomial rows carry success probabilities ``p`` and ``trials``; Gaussian
    rows carry ``mu`` and ``sigma``.
    """

    family: str
    log_weights: Tensor
    p: Tensor | None = None
    trials: np.ndarray | None = None
    mu: Tensor | None = None
    sigma: Tensor | None = None

    @property
    def num_components(self) -> int:
        return self.log_weights.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights.value)

    def component_log_prob(self, y) -> Tensor:
        """log P(y | component i) for every row and component, shape (rows, C)."""
        y = np.asarray(y, dtype=np.float64)
        if self.family == "binomial":
            return binomial_log_pmf(y, self.trials, self.p)
        return gaussian_log_pdf(y, self.mu, self.sigma)


def init_heads(
    store: ParamStore, in_dim: int, num_components: int, family: str, rng: np.random.Generator
) -> None:
    """Gating readout (in_dim -> C) and one linear map per component.

    The component maps are stacked into ``head.emit.W`` of shape
    (in_dim, C * k); columns ``i*k:(i+1)*k`` belong to component i only.
    """
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    c, k = num_components, params_per_component(family)
    store.add("head.gate.W", uniform_init(rng, in_dim, (in_dim, c)))
    store.add("head.gate.b", np.zeros(c))
    store.add("head.emit.W", uniform_init(rng, in_dim, (in_dim, c * k)))
    store.add("head.emit.b", uniform_init(rng, in_dim, (c * k,)))


def _split_emission(raw: Tensor, c: int, k: int) -> list[Tensor]:
    rows = raw.shape[0]
    cube = ad.reshape(raw, (rows, c, k))
    return [ad.reshape(cube[:, :, j], (rows, c)) for j in range(k)]


def emission_from_logits(raw: Tensor, family: str, c: int, trials=None):
    """Squash unconstrained outputs into valid emission parameters."""
    if family == "binomial":
        (z,) = _split_emission(raw, c, 1)
        p = ad.sigmoid(z) * (1.0 - 2.0 * P_FLOOR) + P_FLOOR
        return {"p": p, "trials": None if trials is None else np.asarray(trials, dtype=np.float64)}
    z_mu, z_sigma = _split_emission(raw, c, 2)
    return {"mu": z_mu, "sigma": ad.softplus(z_sigma) + SIGMA_FLOOR}


def mixing_weights(
    h: Tensor, batch: GraphBatch, p: dict[str, Tensor], level: str = "graph", readout: str = "sum",
    pooled: Tensor | None = None,
) -> Tensor:
    """Log mixing weights: log-softmax of the gating readout, shape (rows, C)."""
    if level == "graph":
        pooled = aggregate(h, batch, readout) if pooled is None else pooled
        logits = linear_on_pooled(pooled, batch, readout, p["head.gate.W"], p["head.gate.b"])
    else:
        logits = h @ p["head.gate.W"] + p["head.gate.b"]
    return ad.log_softmax(logits, axis=-1)


def emission_params(
    h: Tensor, batch: GraphBatch, p: dict[str, Tensor], family: str, num_components: int,
    level: str = "graph", readout: str = "sum", pooled: Tensor | None = None,
) -> dict:
    if level == "graph":
        pooled = aggregate(h, batch, readout) if pooled is None else pooled
        raw = linear_on_pooled(pooled, batch, readout, p["head.emit.W"], p["head.emit.b"])
        trials = batch.sizes
    else:
        raw = h @ p["head.emit.W"] + p["head.emit.b"]
        trials = None
    return emission_from_logits(raw, family, num_components, trials)


def mixture_head(
    h: Tensor, batch: GraphBatch, p: dict[str, Tensor], family: str, num_components: int,
    level: str = "graph", readout: str = "sum",
) -> MixtureOutput:
    pooled = aggregate(h, batch, readout) if level == "graph" else None
    log_w = mixing_weights(h, batch, p, level, readout, pooled)
    em = emission_params(h, batch, p, family, num_components, level, readout, pooled)
    return MixtureOutput(family, log_w, **em)


# ----------------------------------------------------------------------
# densities (differentiable in the parameters, constant in the data)

def binomial_log_pmf(y, trials, p: Tensor) -> Tensor:
    y = np.asarray(y, dtype=np.float64)
    n = np.asarray(trials, dtype=np.float64)
    if np.any(y < 0) or np.any(y > n) or np.any(y != np.round(y)):
        raise SupportError("binomial target outside {0, ..., n}")
    log_choose = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
    yy, ny = y[..., None], (n - y)[..., None]
    return ad.log(p) * yy + ad.log(1.0 - p) * ny + log_choose[..., None]


def gaussian_log_pdf(y, mu: Tensor, sigma: Tensor) -> Tensor:
    y = np.asarray(y, dtype=np.float64)[..., None]
    z = (y - mu) / sigma
    return ad.square(z) * -0.5 - ad.log(sigma) - 0.5 * LOG_2PI


def joint_log_prob(out: MixtureOutput, y) -> Tensor:
    """log w_i + log P(y | i), shape (rows, C)."""
    return out.log_weights + out.component_log_prob(y)


def mixture_log_likelihood(out: MixtureOutput, y) -> Tensor:
    """Per-row log sum_i w_i P(y | i), via log-sum-exp; shape (rows,)."""
    return ad.logsumexp(joint_log_prob(out, y), axis=-1)


# ----------------------------------------------------------------------
# Dirichlet prior over the mixing weights

def dirichlet_log_normalizer(alpha) -> float:
    alpha = np.asarray(alpha, dtype=np.float64)
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum())


def dirichlet_log_density(log_weights: Tensor, alpha) -> Tensor:
    """Per-row log Dir(w | alpha) from log weights floored at log(1e-12)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0):
        raise ValueError("Dirichlet alpha must be positive")
    log_w = ad.maximum(log_weights, float(np.log(WEIGHT_FLOOR)))
    return (log_w * (alpha - 1.0)).sum(axis=-1) + dirichlet_log_normalizer(alpha)


def dirichlet_log_density_np(weights, alpha) -> float:
    """Same density for a plain weight vector."""
    w = np.maximum(np.asarray(weights, dtype=np.float64), WEIGHT_FLOOR)
    return float(dirichlet_log_density(ad.Tensor(np.log(w)), alpha).value)

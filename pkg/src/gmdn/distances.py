"""Closed-form distances between univariate Gaussian mixtures.

Every distance is written once over tensors of shape (..., C) so the same
code serves training (differentiable) and evaluation (numpy in, float out).

Let N(x; m, s^2) be the normal density.  The building blocks are

* overlap:   int N(x; a, s_a^2) N(x; b, s_b^2) dx = N(a; b, s_a^2 + s_b^2)
* KL:        KL(N1 || N2) = ln(s2/s1) + (s1^2 + (m1 - m2)^2) / (2 s2^2) - 1/2
* BD:        BD(N1, N2) = (m1 - m2)^2 / (4 (s1^2 + s2^2)) + ln((s1^2 + s2^2) / (2 s1 s2)) / 2

The Jeffrey and Bhattacharyya variants pair components by index, so both
mixtures must have the same number of components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))
DISTANCES = ("L2", "J", "B")


@dataclass(frozen=True)
class GaussianMixture1D:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if not (w.shape == m.shape == s.shape) or w.ndim != 1:
            raise ValueError("weights, means and stds must be 1-D arrays of equal length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must lie on the simplex")
        if np.any(s <= 0):
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @property
    def num_components(self) -> int:
        return len(self.weights)

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[..., None]
        return (self.weights * norm.pdf(x, self.means, self.stds)).sum(axis=-1)

    def tensors(self) -> tuple[Tensor, Tensor, Tensor]:
        return Tensor(self.weights), Tensor(self.means), Tensor(self.stds)


class _Counter:
    """Counts component-pair kernel evaluations (for cost instrumentation)."""

    def __init__(self):
        self.pair_terms = 0


counter = _Counter()


def _expand(t: Tensor, axis: int) -> Tensor:
    shape = list(t.shape)
    shape.insert(len(shape) + axis + 1 if axis < 0 else axis, 1)
    return ad.reshape(t, tuple(shape))


def _cross_overlap(wa, ma, sa, wb, mb, sb) -> Tensor:
    """sum_ij wa_i wb_j N(ma_i; mb_j, sa_i^2 + sb_j^2), over the trailing axis pair."""
    var = _expand(ad.square(sa), -1) + _expand(ad.square(sb), -2)
    diff = _expand(ma, -1) - _expand(mb, -2)
    log_dens = ad.square(diff) / var * -0.5 - ad.log(var) * 0.5 - 0.5 * LOG_2PI
    weights = _expand(wa, -1) * _expand(wb, -2)
    counter.pair_terms += int(np.prod(var.shape))
    return (weights * ad.exp(log_dens)).sum(axis=-1).sum(axis=-1)


def l2_distance_sq_t(wp, mp, sp, wq, mq, sq) -> Tensor:
    """Squared L2 distance between mixture pdfs; mixtures along the last axis."""
    d = (
        _cross_overlap(wp, mp, sp, wp, mp, sp)
        - _cross_overlap(wp, mp, sp, wq, mq, sq) * 2.0
        + _cross_overlap(wq, mq, sq, wq, mq, sq)
    )
    return ad.maximum(d, 0.0)  # clamps rounding noise below zero


def gaussian_kl_t(m1, s1, m2, s2) -> Tensor:
    counter.pair_terms += int(np.prod(m1.shape))
    return ad.log(s2) - ad.log(s1) + (ad.square(s1) + ad.square(m1 - m2)) / (ad.square(s2) * 2.0) - 0.5


def jeffrey_weighted_t(wp, mp, sp, wq, mq, sq) -> Tensor:
    """1/2 sum_i [wP_i KL(P_i || Q_i) + wQ_i KL(Q_i || P_i)]."""
    _same_c(wp, wq)
    terms = wp * gaussian_kl_t(mp, sp, mq, sq) + wq * gaussian_kl_t(mq, sq, mp, sp)
    return terms.sum(axis=-1) * 0.5


def gaussian_bhattacharyya_t(m1, s1, m2, s2) -> Tensor:
    counter.pair_terms += int(np.prod(m1.shape))
    var = ad.square(s1) + ad.square(s2)
    return ad.square(m1 - m2) / var * 0.25 + ad.log(var / (s1 * s2 * 2.0)) * 0.5


def bhattacharyya_weighted_t(wp, mp, sp, wq, mq, sq) -> Tensor:
    """sum_i (wP_i + wQ_i)/2 * BD(P_i, Q_i)."""
    _same_c(wp, wq)
    return ((wp + wq) * gaussian_bhattacharyya_t(mp, sp, mq, sq)).sum(axis=-1) * 0.5


def _same_c(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"component counts differ: {a.shape[-1]} vs {b.shape[-1]}")


DISTANCE_FNS = {"L2": l2_distance_sq_t, "J": jeffrey_weighted_t, "B": bhattacharyya_weighted_t}


def _np(fn, p: GaussianMixture1D, q: GaussianMixture1D) -> float:
    return float(fn(*p.tensors(), *q.tensors()).value)


def l2_distance_sq(p: GaussianMixture1D, q: GaussianMixture1D) -> float:
    return _np(l2_distance_sq_t, p, q)


def jeffrey_weighted(p: GaussianMixture1D, q: GaussianMixture1D) -> float:
    return _np(jeffrey_weighted_t, p, q)


def bhattacharyya_weighted(p: GaussianMixture1D, q: GaussianMixture1D) -> float:
    return _np(bhattacharyya_weighted_t, p, q)


def distance(kind: str, p: GaussianMixture1D, q: GaussianMixture1D) -> float:
    if kind not in DISTANCE_FNS:
        raise ValueError(f"distance must be one of {DISTANCES}")
    return _np(DISTANCE_FNS[kind], p, q)


def l2_distance_sq_quadrature(p: GaussianMixture1D, q: GaussianMixture1D, points_per_sigma: int = 200) -> float:
    """Trapezoid-rule reference for the squared L2 distance."""
    mus = np.concatenate([p.means, q.means])
    sig = np.concatenate([p.stds, q.stds])
    lo, hi = mus.min() - 12 * sig.max(), mus.max() + 12 * sig.max()
    step = sig.min() / points_per_sigma
    x = np.linspace(lo, hi, int(np.ceil((hi - lo) / step)) + 1)
    return float(trapezoid((p.pdf(x) - q.pdf(x)) ** 2, x))


def distance_to_probability(d) -> np.ndarray | float:
    """Map a distance to a link probability, 1 / (1 + d)."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    out = 1.0 / (1.0 + d)
    return float(out) if out.ndim == 0 else out

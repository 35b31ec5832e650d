"""MAP training by generalized EM.

Each epoch performs an analytic E-step (responsibilities from the current
model) followed by gradient ascent on

    sum_g sum_i r_gi (log P(y_g | i) + log w_gi)  +  sum_g log Dir(w_g | alpha)

with the responsibilities held fixed.  Objectives are reported per training
sample.  Gradients are accumulated over chunks of graphs, so memory stays
bounded while every step still uses the full training batch.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom, norm

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .batch import GraphBatch
from .mixture import dirichlet_log_density, joint_log_prob
from .model import GMDN, ModelConfig
from .optim import ParamStore, adam_step

log = logging.getLogger(__name__)

GEM_SLACK = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2500
    patience: int = 30
    lr: float = 1e-4
    m_steps_per_e_step: int = 1
    chunk_size: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stopping: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.m_steps_per_e_step < 1 or self.chunk_size < 1:
            raise ValueError("epochs, m_steps_per_e_step and chunk_size must be positive")
        if not 0 <= self.patience <= self.epochs:
            raise ValueError("patience must lie in [0, epochs]")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class PassResult:
    objective: float  # per-sample objective under the responsibilities used
    loglik: np.ndarray  # per-sample mixture log-likelihood
    resp: np.ndarray  # responsibilities from this pass's parameters
    grads: dict[str, np.ndarray] | None = None


# ----------------------------------------------------------------------
# building blocks


def responsibilities(joint: np.ndarray) -> np.ndarray:
    """Normalize log w_i + log P(y|i) per row in log space."""
    r = np.exp(joint - logsumexp(joint, axis=-1, keepdims=True))
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("E-step produced a non-finite responsibility row")
    return r


def em_objective(out, y, resp: np.ndarray, alpha) -> Tensor:
    """Summed expected complete log-likelihood plus the Dirichlet log prior."""
    joint = joint_log_prob(out, y)
    expected = (joint * resp).sum()
    return expected + dirichlet_log_density(out.log_weights, alpha).sum()


def _objective_from_values(joint: np.ndarray, log_w: np.ndarray, resp: np.ndarray, alpha) -> float:
    log_w = np.maximum(log_w, np.log(1e-12))
    alpha = np.asarray(alpha, dtype=np.float64)
    from .mixture import dirichlet_log_normalizer

    prior = (log_w * (alpha - 1.0)).sum() + len(log_w) * dirichlet_log_normalizer(alpha)
    return float((joint * resp).sum() + prior)


def model_pass(
    model: GMDN,
    chunks: Sequence[GraphBatch],
    resp: np.ndarray | None = None,
    grad: bool = True,
    extra_resp: np.ndarray | None = None,
) -> tuple[PassResult, float | None]:
    """Forward (and optionally backward) over all chunks.

    With ``resp=None`` the E-step is done on the fly from this pass's
    parameters and the objective uses those responsibilities.  If
    ``extra_resp`` is given, the objective under it is also returned (used
    to score the previous M-step).
    """
    alpha = model.cfg.alpha_vector
    total = sum(c.num_graphs for c in chunks)
    names = model.store.names()
    grads = {k: np.zeros_like(v) for k, v in model.store.params.items()} if grad else None
    objective = 0.0
    extra = 0.0 if extra_resp is not None else None
    lls, rs = [], []
    start = 0
    for chunk in chunks:
        stop = start + chunk.num_graphs
        tape = Tape() if grad else None
        p = model.store.leaves(tape)
        out = model.forward(chunk, tape, p)
        joint = joint_log_prob(out, chunk.y)
        lls.append(logsumexp(joint.value, axis=-1))
        r_new = responsibilities(joint.value)
        rs.append(r_new)
        r = r_new if resp is None else resp[start:stop]
        obj = (joint * r).sum() + dirichlet_log_density(out.log_weights, alpha).sum()
        objective += obj.item()
        if extra is not None:
            extra += _objective_from_values(joint.value, out.log_weights.value, extra_resp[start:stop], alpha)
        if grad:
            g = ad.backward(tape, obj * (1.0 / total), [p[k] for k in names])
            for k, gk in zip(names, g):
                grads[k] += gk
        start = stop
    result = PassResult(
        objective / total,
        np.concatenate(lls) if lls else np.zeros(0),
        np.concatenate(rs, axis=0) if rs else np.zeros((0, model.cfg.num_components)),
        grads,
    )
    return result, (None if extra is None else extra / total)


def e_step(model: GMDN, batch: GraphBatch, chunk_size: int = 1000) -> np.ndarray:
    """Posterior over components for every sample."""
    res, _ = model_pass(model, batch.chunks(chunk_size), grad=False)
    return res.resp


def m_step(
    model: GMDN,
    batch: GraphBatch,
    resp: np.ndarray,
    lr: float,
    steps: int = 1,
    chunk_size: int = 1000,
    **adam_kw,
) -> float:
    """Ascent steps on the objective with ``resp`` frozen; returns it afterwards."""
    chunks = batch.chunks(chunk_size)
    for _ in range(steps):
        res, _ = model_pass(model, chunks, resp=resp, grad=True)
        adam_step(model.store, {k: -g for k, g in res.grads.items()}, lr, **adam_kw)
    res, _ = model_pass(model, chunks, resp=resp, grad=False)
    return res.objective


def evaluate_loglik(model: GMDN, batch: GraphBatch, chunk_size: int = 1000) -> np.ndarray:
    """Per-sample log-likelihood, recomputed from the emitted parameters with scipy."""
    out_ll = []
    for chunk in batch.chunks(chunk_size):
        out = model.forward(chunk)
        w = np.log(np.maximum(out.weights, 1e-300))
        y = chunk.y[:, None]
        if out.family == "binomial":
            comp = binom.logpmf(y, chunk.sizes[:, None], out.p.value)
        else:
            comp = norm.logpdf(y, out.mu.value, out.sigma.value)
        out_ll.append(logsumexp(w + comp, axis=-1))
    return np.concatenate(out_ll) if out_ll else np.zeros(0)


# ----------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    store: ParamStore
    epoch: int = 0
    best_store: ParamStore | None = None
    best_val: float = -np.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    prev_resp: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)
    done: bool = False


def _fresh_state(model: GMDN) -> TrainState:
    return TrainState(store=model.store)


def fit(
    model: GMDN,
    train: GraphBatch,
    val: GraphBatch | None,
    cfg: TrainConfig,
    state: TrainState | None = None,
    max_epochs: int | None = None,
) -> TrainState:
    """GEM with early stopping on validation log-likelihood.

    Each history row holds, per epoch: mean train log-likelihood and
    objective before the M-step (both at the epoch's starting parameters),
    the objective right after the M-step under the same responsibilities,
    whether that step decreased it, and the validation log-likelihood.
    ``max_epochs`` pauses the loop early (for checkpoint/resume); the best
    parameters are restored only when training finishes.
    """
    state = state or _fresh_state(model)
    model.store = state.store
    if train.num_graphs == 0:
        raise ValueError("empty training set")
    chunks = train.chunks(cfg.chunk_size)
    val = val if val is not None and val.num_graphs else None
    adam_kw = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    stop_at = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epoch + max_epochs)

    while not state.done and state.epoch < stop_at:
        t = state.epoch
        res, after_prev = model_pass(model, chunks, grad=True, extra_resp=state.prev_resp)
        if after_prev is not None and state.history:
            _close_previous(state.history[-1], after_prev)
        row = {
            "epoch": t,
            "train_loglik": float(res.loglik.mean()),
            "objective_before": res.objective,
            "objective_after": None,
            "violation": None,
            "resp_max_row_error": float(np.abs(res.resp.sum(axis=1) - 1.0).max()),
        }
        val_ll = float(evaluate_fast(model, val, cfg.chunk_size).mean()) if val is not None else row["train_loglik"]
        row["val_loglik"] = val_ll
        state.history.append(row)
        if val_ll > state.best_val:
            state.best_val, state.best_epoch, state.bad_epochs = val_ll, t, 0
            state.best_store = state.store.copy()
        else:
            state.bad_epochs += 1
        state.epoch = t + 1
        if cfg.early_stopping and state.bad_epochs > cfg.patience:
            state.prev_resp = None
            state.done = True
            break
        # M-step: first step reuses this pass's gradient
        adam_step(state.store, {k: -g for k, g in res.grads.items()}, cfg.lr, **adam_kw)
        for _ in range(cfg.m_steps_per_e_step - 1):
            inner, _ = model_pass(model, chunks, resp=res.resp, grad=True)
            adam_step(state.store, {k: -g for k, g in inner.grads.items()}, cfg.lr, **adam_kw)
        state.prev_resp = res.resp
        if state.epoch >= cfg.epochs:
            state.done = True
        if t % 50 == 0:
            log.info("epoch %d train %.4f val %.4f", t, row["train_loglik"], val_ll)

    if state.done:
        if state.prev_resp is not None:
            final, after_prev = model_pass(model, chunks, grad=False, extra_resp=state.prev_resp)
            _close_previous(state.history[-1], after_prev)
            state.prev_resp = None
        if state.best_store is not None:
            state.store = state.best_store.copy()
            model.store = state.store
    return state


def evaluate_fast(model: GMDN, batch: GraphBatch, chunk_size: int = 1000) -> np.ndarray:
    res, _ = model_pass(model, batch.chunks(chunk_size), grad=False)
    return res.loglik


def _close_previous(row: dict, after: float) -> None:
    row["objective_after"] = after
    row["violation"] = bool(after < row["objective_before"] - GEM_SLACK)


def violation_rate(history: list[dict]) -> float:
    flags = [r["violation"] for r in history if r["violation"] is not None]
    return float(np.mean(flags)) if flags else 0.0


def fit_unimodal(
    model: GMDN,
    train: GraphBatch,
    val: GraphBatch | None,
    cfg: TrainConfig,
    state: TrainState | None = None,
    max_epochs: int | None = None,
) -> TrainState:
    """Direct gradient ascent on the log-likelihood (no E-step) for C = 1 models."""
    if model.cfg.num_components != 1:
        raise ValueError("unimodal path requires num_components == 1")
    state = state or _fresh_state(model)
    model.store = state.store
    chunks = train.chunks(cfg.chunk_size)
    total = train.num_graphs
    names = model.store.names()
    adam_kw = dict(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    stop_at = cfg.epochs if max_epochs is None else min(cfg.epochs, state.epoch + max_epochs)
    while not state.done and state.epoch < stop_at:
        grads = {k: np.zeros_like(v) for k, v in state.store.params.items()}
        lls = []
        for chunk in chunks:
            tape = Tape()
            p = state.store.leaves(tape)
            out = model.forward(chunk, tape, p)
            ll = (out.component_log_prob(chunk.y) + out.log_weights).sum()
            lls.append(ll.item())
            for k, g in zip(names, ad.backward(tape, ll * (1.0 / total), [p[k] for k in names])):
                grads[k] += g
        val_ll = float(evaluate_fast(model, val, cfg.chunk_size).mean()) if val is not None and val.num_graphs else sum(lls) / total
        state.history.append({"epoch": state.epoch, "train_loglik": sum(lls) / total, "val_loglik": val_ll})
        if val_ll > state.best_val:
            state.best_val, state.best_epoch, state.bad_epochs = val_ll, state.epoch, 0
            state.best_store = state.store.copy()
        else:
            state.bad_epochs += 1
        state.epoch += 1
        if cfg.early_stopping and state.bad_epochs > cfg.patience:
            state.done = True
            break
        adam_step(state.store, {k: -g for k, g in grads.items()}, cfg.lr, **adam_kw)
        if state.epoch >= cfg.epochs:
            state.done = True
    if state.done:
        state.store = state.best_store.copy()
        model.store = state.store
    return state


def train_model(model: GMDN, train, val, cfg: TrainConfig, state=None, max_epochs=None) -> TrainState:
    """GEM for mixtures, the dedicated unimodal path when C = 1."""
    fn = fit_unimodal if model.cfg.num_components == 1 else fit
    return fn(model, train, val, cfg, state=state, max_epochs=max_epochs)


# ----------------------------------------------------------------------
# persistence of training state and history


def save_state(model: GMDN, state: TrainState, path) -> None:
    extra = {
        "history_json": np.frombuffer(json.dumps(state.history).encode(), dtype=np.uint8),
        "counters": np.array([state.epoch, state.best_epoch, state.bad_epochs, int(state.done)], dtype=np.int64),
        "best_val": np.array(state.best_val),
    }
    if state.prev_resp is not None:
        extra["prev_resp"] = state.prev_resp
    if state.best_store is not None:
        for k, v in state.best_store.params.items():
            extra[f"best:{k}"] = v
    GMDN(model.cfg, state.store).save(path, extra)


def load_state(path) -> tuple[GMDN, TrainState]:
    model, extra = GMDN.load(path)
    epoch, best_epoch, bad, done = (int(v) for v in extra["counters"])
    best = None
    best_keys = [k for k in extra if k.startswith("best:")]
    if best_keys:
        best = ParamStore(params={k[5:]: extra[k].astype(np.float64) for k in best_keys})
    state = TrainState(
        store=model.store,
        epoch=epoch,
        best_store=best,
        best_val=float(extra["best_val"]),
        best_epoch=best_epoch,
        bad_epochs=bad,
        prev_resp=extra.get("prev_resp"),
        history=json.loads(extra["history_json"].tobytes().decode()),
        done=bool(done),
    )
    return model, state


HISTORY_FIELDS = (
    "epoch", "train_loglik", "val_loglik", "objective_before", "objective_after", "violation", "resp_max_row_error",
)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k) for k in HISTORY_FIELDS})


# ----------------------------------------------------------------------
# model selection


@dataclass
class SelectionResult:
    best_index: int
    best_config: ModelConfig
    val_scores: list[float]
    best_epochs: list[int]
    model: GMDN
    test_loglik: float | None = None


def model_select(
    grid: Sequence[ModelConfig],
    batches: dict[str, GraphBatch] | callable,
    train_cfg: TrainConfig,
    refit: bool = True,
) -> SelectionResult:
    """Pick the config with the highest validation log-likelihood (first wins ties).

    ``batches`` maps split name to batch, or is a callable taking a config
    and returning such a map (structure-blind models need different
    batches).  With ``refit`` the winner is retrained on train+val for the
    number of epochs early stopping selected, then scored once on test.
    """
    if not grid:
        raise ValueError("empty grid")
    get = batches if callable(batches) else (lambda _cfg: batches)
    scores, epochs, models = [], [], []
    for cfg in grid:
        b = get(cfg)
        model = GMDN(cfg)
        state = train_model(model, b["train"], b["val"], train_cfg)
        scores.append(state.best_val)
        epochs.append(state.best_epoch)
        models.append(model)
    best = int(np.argmax(scores))  # argmax returns the first maximum
    cfg = grid[best]
    model = models[best]
    b = get(cfg)
    if refit:
        merged = concat_batches([b["train"], b["val"]])
        budget = max(epochs[best] + 1, 1)
        model = GMDN(cfg)
        train_model(model, merged, None, dataclasses.replace(
            train_cfg, epochs=budget, patience=min(train_cfg.patience, budget), early_stopping=False))
    test = b.get("test")
    test_ll = float(evaluate_loglik(model, test).mean()) if test is not None and test.num_graphs else None
    return SelectionResult(best, cfg, scores, epochs, model, test_ll)


def concat_batches(batches: Sequence[GraphBatch]) -> GraphBatch:
    batches = [b for b in batches if b.num_graphs]
    xs, src, dst, owner, sizes, ys = [], [], [], [], [], []
    node_off = graph_off = 0
    for b in batches:
        xs.append(b.x)
        src.append(b.src + node_off)
        dst.append(b.dst + node_off)
        owner.append(b.node_graph + graph_off)
        sizes.append(b.sizes)
        ys.append(b.y)
        node_off += b.num_nodes
        graph_off += b.num_graphs
    return GraphBatch(
        np.concatenate(xs), np.concatenate(src), np.concatenate(dst),
        np.concatenate(owner), np.concatenate(sizes), np.concatenate(ys),
    )

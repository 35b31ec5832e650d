from math import comb, log

import numpy as np
import pytest
from conftest import bimodal_batch, toy_batch

from gmdn.batch import from_graphs
from gmdn.graphs import Graph
from gmdn.model import GMDN, ModelConfig
from gmdn.training import (
    TrainConfig, e_step, evaluate_fast, evaluate_loglik, fit, fit_unimodal, load_state, m_step, model_pass,
    model_select, responsibilities, save_state, train_model, violation_rate,
)


def small(C=3, **kw):
    return ModelConfig(num_components=C, hidden=16, **kw)


def test_responsibilities_hand_example():
    joint = np.log([[0.5 * 0.3, 0.5 * 0.1]])
    assert np.allclose(responsibilities(joint), [[0.75, 0.25]], atol=1e-15)


def test_responsibilities_against_direct_bayes():
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(4), size=30)
    lik = rng.uniform(0.01, 1.0, size=(30, 4))
    want = w * lik / (w * lik).sum(axis=1, keepdims=True)
    got = responsibilities(np.log(w) + np.log(lik))
    assert np.allclose(got, want, atol=1e-14)
    assert np.all(np.abs(responsibilities(rng.normal(scale=300, size=(10, 3))).sum(axis=1) - 1) < 1e-12)


def test_e_step_rows_sum_to_one():
    model = GMDN(small(4))
    r = e_step(model, toy_batch(50), chunk_size=7)
    assert r.shape == (50, 4)
    assert np.all(np.abs(r.sum(axis=1) - 1) < 1e-12)


def test_chunking_does_not_change_results():
    b = toy_batch(40)
    model = GMDN(small(3))
    a, _ = model_pass(model, b.chunks(40))
    c, _ = model_pass(model, b.chunks(6))
    assert a.objective == pytest.approx(c.objective, abs=1e-12)
    for k in a.grads:
        assert np.allclose(a.grads[k], c.grads[k], atol=1e-12)


def test_m_step_lr_zero_leaves_everything():
    b = toy_batch(40)
    model = GMDN(small(3))
    before = model.store.checksum()
    r = e_step(model, b)
    obj0, _ = model_pass(model, b.chunks(1000), resp=r, grad=False)
    obj1 = m_step(model, b, r, lr=0.0)
    assert model.store.checksum() == GMDN(small(3)).store.checksum()
    assert obj1 == obj0.objective
    assert before == model.store.checksum() and model.store.step == 1


def test_m_step_improves_objective():
    b = toy_batch(60)
    model = GMDN(small(3))
    r = e_step(model, b)
    obj0 = model_pass(model, b.chunks(1000), resp=r, grad=False)[0].objective
    assert m_step(model, b, r, lr=1e-3, steps=3) > obj0


def test_gem_on_toy_set():
    b = toy_batch(200)
    model = GMDN(small(3))
    st = fit(model, b, None, TrainConfig(epochs=40, lr=1e-4, patience=40, early_stopping=False))
    assert all(row["resp_max_row_error"] < 1e-9 for row in st.history)
    assert violation_rate(st.history) <= 0.05
    assert st.history[-1]["train_loglik"] > st.history[0]["train_loglik"]


def test_reported_loglik_matches_independent_computation():
    b = toy_batch(30)
    model = GMDN(small(3))
    out = model.forward(b)
    want = []
    for i in range(b.num_graphs):
        n, y = int(b.sizes[i]), int(b.y[i])
        p = out.p.value[i]
        want.append(log(sum(out.weights[i, c] * comb(n, y) * p[c] ** y * (1 - p[c]) ** (n - y) for c in range(3))))
    assert np.allclose(evaluate_loglik(model, b), want, atol=1e-10)
    assert np.allclose(evaluate_fast(model, b), want, atol=1e-10)


def test_single_component_paths_agree():
    b = toy_batch(60)
    tr, va = b.subset(range(50)), b.subset(range(50, 60))
    cfg = TrainConfig(epochs=15, lr=1e-3, patience=15)
    a, c = GMDN(small(1)), GMDN(small(1))
    sa = fit(a, tr, va, cfg)
    sc = fit_unimodal(c, tr, va, cfg)
    for ra, rc in zip(sa.history, sc.history):
        assert abs(ra["train_loglik"] - rc["train_loglik"]) < 1e-9
        assert abs(ra["val_loglik"] - rc["val_loglik"]) < 1e-9
    for k in a.store.params:
        assert np.allclose(a.store.params[k], c.store.params[k], atol=1e-9, rtol=0)
    with pytest.raises(ValueError):
        fit_unimodal(GMDN(small(2)), tr, va, cfg)


def test_train_model_routes_by_component_count():
    b = toy_batch(20)
    cfg = TrainConfig(epochs=2, lr=1e-3, patience=2)
    assert "objective_before" not in train_model(GMDN(small(1)), b, None, cfg).history[0]
    assert "objective_before" in train_model(GMDN(small(2)), b, None, cfg).history[0]


def test_constant_half_target_learns_half():
    g = Graph(10, [(i, i + 1) for i in range(9)], np.ones((10, 5)))
    b = from_graphs([g] * 20, y=np.full(20, 5))
    model = GMDN(ModelConfig(num_components=1, hidden=8))
    fit_unimodal(model, b, None, TrainConfig(epochs=300, lr=0.01, patience=300, early_stopping=False))
    assert model.forward(b).p.value[0, 0] == pytest.approx(0.5, abs=0.01)


def test_patience_zero_stops_at_first_non_improvement():
    b = toy_batch(40)
    st = fit(GMDN(small(2)), b.subset(range(30)), b.subset(range(30, 40)), TrainConfig(epochs=50, lr=0.05, patience=0))
    vals = [r["val_loglik"] for r in st.history]
    first_bad = next(i for i in range(1, len(vals)) if vals[i] <= max(vals[:i]))
    assert len(vals) == first_bad + 1
    assert st.best_epoch == int(np.argmax(vals))


def test_determinism_and_best_snapshot():
    b = toy_batch(40)
    tr, va = b.subset(range(30)), b.subset(range(30, 40))
    cfg = TrainConfig(epochs=25, lr=0.01, patience=5)
    s1 = fit(GMDN(small(2)), tr, va, cfg)
    s2 = fit(GMDN(small(2)), tr, va, cfg)
    assert s1.history == s2.history and s1.store.checksum() == s2.store.checksum()
    # replaying up to the best epoch reaches the restored parameters
    replay = fit(GMDN(small(2)), tr, va, cfg, max_epochs=s1.best_epoch)
    assert replay.store.checksum() == s1.store.checksum()


def test_checkpoint_resume_reproduces_history(tmp_path):
    b = toy_batch(40)
    tr, va = b.subset(range(30)), b.subset(range(30, 40))
    cfg = TrainConfig(epochs=12, lr=0.01, patience=12)
    full = fit(GMDN(small(2)), tr, va, cfg)
    m = GMDN(small(2))
    part = fit(m, tr, va, cfg, max_epochs=5)
    save_state(m, part, tmp_path / "ck.npz")
    m2, st = load_state(tmp_path / "ck.npz")
    done = fit(m2, tr, va, cfg, state=st)
    assert done.history == full.history
    assert done.store.checksum() == full.store.checksum()


def test_model_select_singleton_and_ties():
    b = toy_batch(40)
    splits = {"train": b.subset(range(30)), "val": b.subset(range(30, 35)), "test": b.subset(range(35, 40))}
    cfg = TrainConfig(epochs=3, lr=1e-3, patience=3)
    res = model_select([small(2)], splits, cfg, refit=False)
    assert res.best_index == 0 and res.test_loglik is not None
    res = model_select([small(2), small(2)], splits, cfg, refit=True)
    assert res.val_scores[0] == res.val_scores[1] and res.best_index == 0


def test_model_select_prefers_mixture_on_bimodal_targets():
    b = bimodal_batch(120)
    splits = {"train": b.subset(range(80)), "val": b.subset(range(80, 100)), "test": b.subset(range(100, 120))}
    cfg = TrainConfig(epochs=150, lr=0.02, patience=150)
    res = model_select([ModelConfig(num_components=1, hidden=8), ModelConfig(num_components=5, hidden=8)],
                       splits, cfg, refit=False)
    assert res.best_index == 1
    assert res.val_scores[1] > res.val_scores[0] + 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, patience=6)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        fit(GMDN(small(2)), toy_batch(5).subset([]), None, TrainConfig(epochs=1, patience=0))


def test_single_component_responsibilities_are_one():
    r = e_step(GMDN(small(1)), toy_batch(30))
    assert np.array_equal(r, np.ones((30, 1)))


def test_epoch_zero_loglik_is_initial_model_loglik():
    b = toy_batch(40)
    fresh = GMDN(small(3, seed=5))
    want = evaluate_loglik(fresh, b).mean()
    state = fit(GMDN(small(3, seed=5)), b, None, TrainConfig(epochs=3, lr=1e-3, patience=3))
    assert abs(state.history[0]["train_loglik"] - want) < 1e-9


def test_gem_small_toy_set():
    b = toy_batch(20)
    state = fit(GMDN(small(3)), b, None, TrainConfig(epochs=30, lr=1e-4, patience=30))
    assert max(r["resp_max_row_error"] for r in state.history) < 1e-9
    assert violation_rate(state.history) <= 0.05

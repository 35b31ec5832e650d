import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmdn.autodiff import Tensor
from gmdn.batch import from_graphs
from gmdn.encoder import EncoderConfig, encode_nodes, final_states, init_encoder, readout_graph
from gmdn.graphs import Graph, generate_er, make_rng, permute
from gmdn.optim import ParamStore


def relu(x):
    return np.maximum(x, 0.0)


def loop_encoder(g: Graph, cfg: EncoderConfig, params: dict) -> np.ndarray:
    """Node-by-node reference implementation of the three layer kinds."""
    h = g.features.copy()
    deg = g.degrees()
    for layer in range(cfg.num_layers):
        pre = f"enc.{layer}."
        new = []
        for v in range(g.num_nodes):
            nb = list(g.neighbors[v])
            if cfg.conv == "gin":
                agg = sum((h[u] for u in nb), np.zeros(h.shape[1]))
                if cfg.neighbor_agg == "mean" and nb:
                    agg = agg / len(nb)
                z = (1 + params[pre + "eps"]) * h[v] + agg
                z = relu(z @ params[pre + "W1"] + params[pre + "b1"])
                new.append(relu(z @ params[pre + "W2"] + params[pre + "b2"]))
            elif cfg.conv == "gcn":
                acc = np.zeros(cfg.hidden)
                for u in nb + [v]:
                    if cfg.neighbor_agg == "sum":
                        w = 1 / np.sqrt((deg[v] + 1) * (deg[u] + 1))
                    else:
                        w = 1 / (deg[v] + 1)
                    acc += w * (h[u] @ params[pre + "W"])
                new.append(relu(acc + params[pre + "b"]))
            else:
                new.append(relu(h[v] @ params[pre + "W"] + params[pre + "b"]))
        h = np.array(new)
    return h


def setup(conv, agg="sum", layers=2, hidden=6, in_dim=4, seed=0):
    cfg = EncoderConfig(conv=conv, num_layers=layers, hidden=hidden, neighbor_agg=agg)
    store = ParamStore()
    init_encoder(store, cfg, in_dim, make_rng(seed))
    if conv == "gin":
        for layer in range(layers):
            store.params[f"enc.{layer}.eps"] = np.array(0.1 * (layer + 1))
    return cfg, store


def node_states(cfg, store, graphs):
    return final_states(encode_nodes(from_graphs(graphs), cfg, store.leaves(None)), cfg).value


@pytest.mark.parametrize("conv,agg", [("gin", "sum"), ("gin", "mean"), ("gcn", "sum"), ("gcn", "mean"), ("dense", "sum")])
def test_matches_loop_reference(conv, agg):
    cfg, store = setup(conv, agg)
    rng = make_rng(3)
    graphs = [generate_er(n, 0.4, seed=n).with_features(rng.normal(size=(n, 4))) for n in (1, 5, 8)]
    got = node_states(cfg, store, graphs)
    want = np.concatenate([loop_encoder(g, cfg, store.params) for g in graphs])
    assert np.allclose(got, want, atol=1e-12)


def test_single_isolated_node_gin():
    cfg, store = setup("gin", layers=1)
    x = np.array([[1.0, -2.0, 0.5, 3.0]])
    got = node_states(cfg, store, [Graph(1, [], x)])
    p = store.params
    want = relu(relu((1 + p["enc.0.eps"]) * x @ p["enc.0.W1"] + p["enc.0.b1"]) @ p["enc.0.W2"] + p["enc.0.b2"])
    assert np.allclose(got, want, atol=1e-14)


def test_cycle_with_identical_features_gives_identical_states():
    n = 7
    g = Graph(n, [(i, (i + 1) % n) for i in range(n)], np.tile([0.3, -1.0, 2.0, 0.1], (n, 1)))
    for conv in ("gin", "gcn"):
        cfg, store = setup(conv)
        h = node_states(cfg, store, [g])
        assert np.allclose(h, h[0], atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 15), st.integers(0, 1000), st.sampled_from(["gin", "gcn"]))
def test_node_equivariance_and_graph_invariance(n, seed, conv):
    cfg, store = setup(conv)
    g = generate_er(n, 0.3, seed=seed).with_features(make_rng(seed).normal(size=(n, 4)))
    perm = make_rng(seed, 2).permutation(n)
    h = node_states(cfg, store, [g])
    hp = node_states(cfg, store, [permute(g, perm)])
    assert np.allclose(hp[perm], h, atol=1e-12)
    w, b = make_rng(seed, 3).normal(size=(cfg.hidden, 3)), make_rng(seed, 4).normal(size=3)
    for readout in ("sum", "mean"):
        a = readout_graph(Tensor(h), from_graphs([g]), readout, Tensor(w), Tensor(b)).value
        c = readout_graph(Tensor(hp), from_graphs([g]), readout, Tensor(w), Tensor(b)).value
        assert np.allclose(a, c, atol=1e-12)


def test_readout_single_node_and_duplication():
    rng = make_rng(1)
    w, b = Tensor(rng.normal(size=(6, 2))), Tensor(rng.normal(size=2))
    one = Graph(1, [], rng.normal(size=(1, 4)))
    cfg, store = setup("gin")
    h1 = Tensor(node_states(cfg, store, [one]))
    for readout in ("sum", "mean"):
        got = readout_graph(h1, from_graphs([one]), readout, w, b).value
        assert np.allclose(got, h1.value @ w.value + b.value)

    g = generate_er(6, 0.5, seed=2).with_features(rng.normal(size=(6, 4)))
    doubled = Graph(12, np.concatenate([g.edges, g.edges + 6]), np.concatenate([g.features, g.features]))
    h = Tensor(node_states(cfg, store, [g]))
    hd = Tensor(node_states(cfg, store, [doubled]))
    s1 = readout_graph(h, from_graphs([g]), "sum", w, b).value
    s2 = readout_graph(hd, from_graphs([doubled]), "sum", w, b).value
    m1 = readout_graph(h, from_graphs([g]), "mean", w, b).value
    m2 = readout_graph(hd, from_graphs([doubled]), "mean", w, b).value
    assert np.allclose(s2, 2 * s1) and np.allclose(m2, m1)


def test_receptive_field():
    # path 0-1-2-3-4-5; node 0 is 5 hops from node 5
    g = Graph(6, [(i, i + 1) for i in range(5)], make_rng(0).normal(size=(6, 4)))
    x2 = g.features.copy()
    x2[5] += 10.0
    g2 = g.with_features(x2)
    for layers in (1, 2, 4):
        for conv in ("gin", "gcn"):
            cfg, store = setup(conv, layers=layers)
            a, b = node_states(cfg, store, [g]), node_states(cfg, store, [g2])
            far = [v for v in range(6) if 5 - v > layers]
            assert np.array_equal(a[far], b[far])


def test_concat_states_width():
    cfg = EncoderConfig(conv="gin", num_layers=3, hidden=5, concat_states=True)
    store = ParamStore()
    init_encoder(store, cfg, 4, make_rng(0))
    h = node_states(cfg, store, [Graph(3, [(0, 1)], np.ones((3, 4)))])
    assert h.shape == (3, 15) and cfg.out_dim == 15


@pytest.mark.parametrize("kw", [dict(conv="gat"), dict(num_layers=0), dict(hidden=0), dict(readout="max"),
                                dict(neighbor_agg="max")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EncoderConfig(**kw)


def test_batch_slices_match_full_batch():
    rng = make_rng(5)
    graphs = [generate_er(n, 0.3, seed=n).with_features(rng.normal(size=(n, 4))) for n in (3, 6, 1, 9, 4)]
    b = from_graphs(graphs, y=np.arange(5.0))
    cfg, store = setup("gin")
    full = node_states(cfg, store, graphs)
    parts = [final_states(encode_nodes(c, cfg, store.leaves(None)), cfg).value for c in b.chunks(2)]
    assert np.allclose(np.concatenate(parts), full, atol=1e-13)
    sub = b.subset([3, 1])
    assert sub.sizes.tolist() == [9, 6] and sub.y.tolist() == [3.0, 1.0]

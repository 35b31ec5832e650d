import itertools
from collections import Counter

import numpy as np
import pytest

from gmdn.graphs import Graph, InvalidParameter, generate_er, make_rng
from gmdn.sir import (
    FORMAT_VERSION, Dataset, DatasetFormatError, SirParams, StepCapExceeded, build_node_features,
    dumps_dataset, generate_dataset, load_dataset, loads_dataset, run_sir, sample_initial_mask,
    save_dataset, simulate_sir, split_graphs,
)
import gmdn.sir as sir


def exact_target_distribution(g: Graph, beta, gamma, mask):
    """Exact law of the ever-infected count by enumerating the synchronous chain."""
    n = g.num_nodes
    nb = [set(map(int, x)) for x in g.neighbors]
    states = {(tuple(not m for m in mask), tuple(bool(m) for m in mask)): 1.0}
    final = Counter()
    while states:
        nxt = Counter()
        for (S, I), prob in states.items():
            if not any(I):
                final[n - sum(S)] += prob
                continue
            sus = [v for v in range(n) if S[v]]
            inf = [v for v in range(n) if I[v]]
            p_hit = {v: 1 - (1 - beta) ** sum(I[u] for u in nb[v]) for v in sus}
            for hits in itertools.product([0, 1], repeat=len(sus)):
                ph = np.prod([p_hit[v] if h else 1 - p_hit[v] for v, h in zip(sus, hits)])
                if ph == 0:
                    continue
                for recs in itertools.product([0, 1], repeat=len(inf)):
                    pr = np.prod([gamma if r else 1 - gamma for r in recs])
                    if pr == 0:
                        continue
                    S2, I2 = list(S), list(I)
                    for v, h in zip(sus, hits):
                        if h:
                            S2[v], I2[v] = False, True
                    for v, r in zip(inf, recs):
                        if r:
                            I2[v] = False
                    nxt[(tuple(S2), tuple(I2))] += prob * ph * pr
        states = nxt
        if sum(states.values()) < 1e-15:
            break
    return final


def test_exact_oracle_matches_simulation_on_path():
    g = Graph(3, [(0, 1), (1, 2)])
    mask = np.array([True, False, False])
    beta, gamma = 0.6, 0.5
    exact = exact_target_distribution(g, beta, gamma, mask)
    assert abs(sum(exact.values()) - 1) < 1e-9
    rng = make_rng(5)
    runs = 20_000
    counts = Counter(run_sir(g, beta, gamma, mask, rng) for _ in range(runs))
    for k in range(1, 4):
        p = exact.get(k, 0.0)
        assert abs(counts[k] / runs - p) < 4 * np.sqrt(p * (1 - p) / runs) + 1e-3


def test_star_full_transmission_before_recovery():
    n = 7
    g = Graph(n, [(0, v) for v in range(1, n)])
    mask = np.zeros(n, bool)
    mask[0] = True
    rng = make_rng(1)
    assert all(run_sir(g, 1.0, 1.0, mask, rng) == n for _ in range(500))
    star3 = Graph(3, [(0, 1), (0, 2)])
    assert exact_target_distribution(star3, 1.0, 1.0, [True, False, False]) == {3: 1.0}


def test_beta_zero_keeps_initial_count():
    g = generate_er(30, 0.3, seed=2)
    rng = make_rng(3)
    for _ in range(50):
        mask = sample_initial_mask(30, 0.2, rng)
        assert run_sir(g, 0.0, rng.uniform(0.1, 1), mask, rng) == mask.sum()


def test_complete_graph_beta_one_infects_all_in_one_step():
    g = generate_er(10, 1.0, seed=0)
    mask = np.zeros(10, bool)
    mask[3] = True
    steps = []
    target = run_sir(g, 1.0, 0.4, mask, make_rng(0), lambda t, S, I, R: steps.append(S.sum()))
    assert target == 10
    assert steps[1] == 0


def test_conservation_and_monotone_ever_infected():
    g = generate_er(40, 0.1, seed=8)
    rng = make_rng(9)

    def obs(t, S, I, R):
        assert S.sum() + I.sum() + R.sum() == 40
        assert not np.any(S & I) and not np.any(I & R) and not np.any(S & R)
        ever.append(40 - S.sum())

    for _ in range(30):
        ever = []
        mask = sample_initial_mask(40, 0.05, rng)
        y = run_sir(g, rng.uniform(), rng.uniform(0.1, 1), mask, rng, obs)
        assert np.all(np.diff(ever) >= 0)
        assert ever[-1] == y
        assert mask.sum() <= y <= 40


def test_step_cap(monkeypatch):
    monkeypatch.setattr(sir, "step_cap", lambda n: 1)
    g = Graph(3, [(0, 1), (1, 2)])
    with pytest.raises(StepCapExceeded):
        run_sir(g, 0.0, 0.1, np.array([True, True, True]), make_rng(0))


def test_initial_mask_never_empty():
    rng = make_rng(4)
    assert all(sample_initial_mask(5, 0.01, rng).any() for _ in range(200))


@pytest.mark.parametrize("beta,gamma,init", [(-0.1, 0.5, 0.1), (1.2, 0.5, 0.1), (0.5, 0.05, 0.1),
                                             (0.5, 1.1, 0.1), (0.5, 0.5, 0.0), (0.5, 0.5, 1.0)])
def test_sir_params_ranges(beta, gamma, init):
    with pytest.raises(InvalidParameter):
        SirParams(beta, gamma, init)


def test_node_features():
    x = build_node_features(2, SirParams(0.5, 0.5, 0.1), [True, False])
    assert x[0].tolist() == [0.5, 0.5, 1.0, 1.0, 1.0]
    y = build_node_features(1, SirParams(0.2, 0.8, 0.1), [False])
    assert np.allclose(y[0], [0.2, 0.8, 0.25, 1.0, 0.0])
    with pytest.raises(InvalidParameter):
        build_node_features(3, SirParams(0.2, 0.8, 0.1), [True])


def test_simulate_record_fields():
    g = generate_er(20, 0.2, seed=1)
    r = simulate_sir(g, SirParams(0.3, 0.4, 0.1), seed=7, graph_id=3)
    assert r.graph_id == 3 and r.initial_mask.shape == (20,)
    assert r.initial_mask.sum() <= r.target <= 20
    assert r == simulate_sir(g, SirParams(0.3, 0.4, 0.1), seed=7, graph_id=3)


def small_dataset(**kw):
    args = dict(family="ER", n=15, connectivities=[0.1, 0.3], graphs_per_conn=10, sims_per_config=2, seed=5)
    args.update(kw)
    return generate_dataset(**args)


def test_dataset_counts_and_graph_level_split():
    ds = small_dataset()
    assert len(ds.graphs) == 20 and len(ds.records) == 20 * 3 * 2
    assert ds.split.count("train") == 16 and ds.split.count("val") == 2 and ds.split.count("test") == 2
    assert ds.split_counts() == {"train": 96, "val": 12, "test": 12}
    for r in ds.records:
        assert 0 <= r.beta <= 1 and 0.1 <= r.gamma <= 1 and r.init_prob in (0.01, 0.05, 0.10)


def test_desk_split_sizes():
    conn = [0] * 40 + [1] * 40
    split = split_graphs(conn, seed=3)
    counts = Counter(split)
    # 75 records per graph
    assert {k: 75 * v for k, v in counts.items()} == {"train": 4800, "val": 600, "test": 600}


def test_dataset_independent_of_workers():
    assert dumps_dataset(small_dataset(workers=1)) == dumps_dataset(small_dataset(workers=2))


def test_dataset_roundtrip_and_bytes(tmp_path):
    ds = small_dataset(family="BA", connectivities=[1, 2])
    save_dataset(ds, tmp_path / "a.jsonl")
    save_dataset(small_dataset(family="BA", connectivities=[1, 2]), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert load_dataset(tmp_path / "a.jsonl") == ds


def test_empty_dataset_roundtrip():
    ds = Dataset("ER", 10, [0.1], 0, 0, 1)
    assert loads_dataset(dumps_dataset(ds)) == ds


def test_truncated_file_reports_offset():
    data = dumps_dataset(small_dataset())
    cut = data[: len(data) - 10]
    with pytest.raises(DatasetFormatError) as e:
        loads_dataset(cut)
    assert e.value.offset == cut.rfind(b"\n") + 1
    whole_lines = data[: data.rfind(b"\n", 0, len(data) - 1) + 1]
    with pytest.raises(DatasetFormatError):
        loads_dataset(whole_lines)


def test_corrupt_line_reports_offset():
    data = dumps_dataset(small_dataset())
    start = data.find(b"\n") + 1
    bad = data[:start] + b"{oops" + data[start + 5:]
    with pytest.raises(DatasetFormatError) as e:
        loads_dataset(bad)
    assert start <= e.value.offset < data.find(b"\n", start)


def test_version_mismatch():
    data = dumps_dataset(small_dataset()).replace(
        f'"version": {FORMAT_VERSION}'.encode(), f'"version": {FORMAT_VERSION + 1}'.encode(), 1
    )
    with pytest.raises(DatasetFormatError, match="version"):
        loads_dataset(data)


def test_invalid_counts():
    with pytest.raises(InvalidParameter):
        small_dataset(graphs_per_conn=0)

import numpy as np

from gmdn.batch import from_graphs, from_records
from gmdn.graphs import Graph, generate_er, make_rng
from gmdn.sir import SirParams, simulate_sir


def toy_batch(num=200, n=12, seed=0):
    """``num`` SIR runs on small ER graphs with random (beta, gamma)."""
    rng = make_rng(seed, 99)
    graphs = [generate_er(n, 0.3, seed=seed * 1000 + i) for i in range(10)]
    records = []
    for k in range(num):
        gid = k % len(graphs)
        params = SirParams(float(rng.uniform()), float(rng.uniform(0.1, 1.0)), 0.1)
        records.append(simulate_sir(graphs[gid], params, rng, graph_id=gid))
    return from_records(graphs, records)


def bimodal_batch(num=120, n=20, seed=0):
    """Targets at 1 or n-1 with equal odds; inputs carry no hint of which."""
    rng = make_rng(seed, 7)
    y = np.where(rng.random(num) < 0.5, 1, n - 1)
    g = Graph(n, [(i, i + 1) for i in range(n - 1)], np.ones((n, 5)))
    return from_graphs([g] * num, y=y)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

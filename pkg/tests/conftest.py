import numpy as np
import pytest

from hivepi.graph import build_graph


def path_graph(n, pop=1000.0, entrants=0.0):
    ids = [f"r{i:02d}" for i in range(n)]
    edges = [(ids[i], ids[i + 1]) for i in range(n - 1)]
    return build_graph(edges, {r: pop for r in ids}, {r: entrants for r in ids})


def random_connected_graph(rng, n, extra=0.3):
    """Random spanning tree plus extra edges; deterministic given ``rng``."""
    ids = [f"g{i:02d}" for i in range(n)]
    edges = set()
    for i in range(1, n):
        j = int(rng.integers(0, i))
        edges.add((ids[j], ids[i]))
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < extra / n:
                edges.add((ids[i], ids[j]))
    pops = {r: float(rng.uniform(1e3, 1e5)) for r in ids}
    return build_graph(sorted(edges), pops)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import itertools

import numpy as np
import pytest
import torch

from coarsediff.graph import Graph, is_connected


def path(n):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def cycle(n):
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def complete(n):
    return Graph.from_edges(n, list(itertools.combinations(range(n), 2)))


def star(n):
    return Graph.from_edges(n, [(0, i) for i in range(1, n)])


def random_connected(n, rng, p=0.3):
    """Random spanning tree plus independent extra edges."""
    perm = rng.permutation(n)
    pairs = [(int(perm[i]), int(perm[rng.integers(0, i)])) for i in range(1, n)]
    for i, j in itertools.combinations(range(n), 2):
        if rng.random() < p:
            pairs.append((i, j))
    g = Graph.from_edges(n, pairs)
    assert is_connected(g)
    return g


def random_graph(n, rng, p=0.4):
    pairs = [(i, j) for i, j in itertools.combinations(range(n), 2) if rng.random() < p]
    return Graph.from_edges(n, pairs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)

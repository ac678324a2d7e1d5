import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coarsediff.coarsen import Partition, contract, rnd_red_seq
from coarsediff.expand import expand, invert_step, perturbed_expand, refine
from coarsediff.graph import Graph, GraphError, is_isomorphic
from conftest import complete, path, random_connected


def test_expand_single_edge_to_triangle():
    es = expand(path(2), [2, 1])
    assert es.expanded.n == 3
    assert es.expanded.edges.tolist() == [[0, 1], [0, 2], [1, 2]]
    assert es.cluster.tolist() == [0, 0, 1]


def test_expand_all_ones_is_identity(rng):
    g = random_connected(10, rng)
    assert expand(g, np.ones(10, dtype=int)).expanded == g


def test_expand_p2_twice_is_k4():
    assert expand(path(2), [2, 2]).expanded == complete(4)


def test_expand_rejects_bad_sizes():
    with pytest.raises(GraphError):
        expand(path(2), [0, 1])
    with pytest.raises(GraphError):
        expand(path(2), [1])


def test_expanded_structure(rng):
    for _ in range(30):
        g = random_connected(int(rng.integers(1, 15)), rng)
        v = rng.integers(1, 4, size=g.n)
        es = expand(g, v)
        assert es.expanded.n == v.sum()
        adj = g.adjacency.toarray() > 0
        got = set(map(tuple, es.expanded.edges.tolist()))
        want = set()
        for a in range(es.expanded.n):
            for b in range(a + 1, es.expanded.n):
                p, q = es.cluster[a], es.cluster[b]
                if p == q or adj[p, q]:
                    want.add((a, b))
        assert got == want
        vmax = v.max()
        assert es.expanded.m <= g.n * vmax * (vmax - 1) // 2 + g.m * vmax**2


def test_perturbed_expand_noop_cases(rng):
    g = random_connected(12, rng)
    v = rng.integers(1, 3, size=12)
    base = expand(g, v).expanded
    assert perturbed_expand(g, v, 0, 0.7, rng).expanded == base
    assert perturbed_expand(g, v, 3, 0.0, rng).expanded == base
    # every candidate at distance 1 is already present
    assert perturbed_expand(g, v, 1, 1.0, rng).expanded == base


def test_perturbed_expand_p3_closes_triangle(rng):
    assert perturbed_expand(path(3), [1, 1, 1], 2, 1.0, rng).expanded == complete(3)


def test_perturbed_expand_superset_and_range(rng):
    for _ in range(20):
        g = random_connected(int(rng.integers(3, 14)), rng)
        v = rng.integers(1, 3, size=g.n)
        r = int(rng.integers(2, 4))
        es = perturbed_expand(g, v, r, 0.5, rng)
        base = set(map(tuple, expand(g, v).expanded.edges.tolist()))
        got = set(map(tuple, es.expanded.edges.tolist()))
        assert base <= got
        from coarsediff.graph import bfs_distances

        for a, b in got - base:
            p, q = es.cluster[a], es.cluster[b]
            assert 2 <= bfs_distances(g, int(p), max_depth=r).get(int(q), r + 1) <= r


def test_refine_examples():
    es = expand(path(2), [2, 1])
    assert refine(es, np.ones(3, dtype=int)) == es.expanded
    assert refine(es, np.zeros(3, dtype=int)).m == 0
    # canonical edges (0,1), (0,2), (1,2); dropping the second leaves 0-1-2
    assert refine(es, [1, 0, 1]).edges.tolist() == [[0, 1], [1, 2]]
    with pytest.raises(GraphError):
        refine(es, [1, 1])


def test_invert_identity_partition(rng):
    g = random_connected(9, rng)
    v, e, _ = invert_step(contract(g, Partition.singletons(9)))
    assert v.tolist() == [1] * 9 and e.tolist() == [1] * g.m


def test_invert_k3():
    v, e, es = invert_step(contract(complete(3), Partition.from_sets(3, [[0, 1]])))
    assert v.tolist() == [2, 1]
    assert es.expanded == complete(3) and e.tolist() == [1, 1, 1]


def test_invert_p4():
    v, e, es = invert_step(contract(path(4), Partition.from_sets(4, [[0, 1], [2, 3]])))
    assert v.tolist() == [2, 2]
    assert es.expanded.m == 6 and int(e.sum()) == 3
    assert refine(es, e) == path(4)


def _random_partition(g, rng):
    # grow clusters by absorbing random unassigned neighbours
    order = rng.permutation(g.n)
    owner = -np.ones(g.n, dtype=int)
    adj = [set() for _ in range(g.n)]
    for a, b in g.edges.tolist():
        adj[a].add(b)
        adj[b].add(a)
    clusters = []
    for s in order:
        if owner[s] >= 0:
            continue
        c = [int(s)]
        owner[s] = len(clusters)
        size = int(rng.integers(1, 4))
        frontier = list(adj[s])
        while len(c) < size and frontier:
            u = frontier.pop(int(rng.integers(len(frontier))))
            if owner[u] < 0:
                owner[u] = len(clusters)
                c.append(u)
                frontier.extend(adj[u])
        clusters.append(c)
    return Partition.from_sets(g.n, clusters)


def test_round_trip_200_graphs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        g = random_connected(int(rng.integers(2, 49)), rng)
        step = contract(g, _random_partition(g, rng))
        v, e, es = invert_step(step)
        h = refine(expand(step.child, v), e)
        assert is_isomorphic(h, g)
        # the stored map is the bijection itself
        assert h.relabel(np.argsort(es.origin)) == g


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip_along_sequences(seed):
    r = np.random.default_rng(seed)
    g = random_connected(int(r.integers(2, 30)), r)
    seq = rnd_red_seq(g, r)
    for step in seq.steps:
        v, e, es = invert_step(step, perturb=(2, 0.3), rng=r)
        assert is_isomorphic(refine(es, e), step.parent)

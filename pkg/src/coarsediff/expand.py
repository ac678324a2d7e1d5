"""Graph expansion, perturbed expansion, refinement and coarsening inversion.

Expanded nodes are numbered cluster-major: base node ``p`` becomes nodes
``offset[p] .. offset[p] + v[p] - 1``. Expanded edges follow the canonical
lexicographic order of :class:`Graph`, which is also the index of the edge
selection vector ``e``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Optional

import numpy as np

from .coarsen import CoarseningStep
from .graph import Graph, GraphError, bfs_distances


@dataclass(frozen=True, eq=False)
class ExpansionState:
    base: Graph
    v: np.ndarray
    expanded: Graph
    cluster: np.ndarray  # expanded node -> base node
    e: Optional[np.ndarray] = None
    origin: Optional[np.ndarray] = None  # parent node -> expanded node (inversion only)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.v)[:-1]]).astype(np.int64)


def _check_v(g: Graph, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    if v.shape != (g.n,):
        raise GraphError("cluster size vector must have one entry per node")
    if (v < 1).any():
        raise GraphError("cluster sizes must be >= 1")
    return v


def _cluster_pairs(offsets, v, p, q):
    a = offsets[p] + np.arange(v[p])
    b = offsets[q] + np.arange(v[q])
    return np.stack(np.meshgrid(a, b, indexing="ij"), axis=-1).reshape(-1, 2)


def expand(g: Graph, v) -> ExpansionState:
    """Replace node p by a clique of v[p] replicas; connect adjacent clusters completely."""
    v = _check_v(g, v)
    offsets = np.concatenate([[0], np.cumsum(v)[:-1]]).astype(np.int64)
    n_exp = int(v.sum())
    parts = []
    for p in np.flatnonzero(v > 1):
        idx = offsets[p] + np.arange(v[p])
        parts.append(np.array(list(combinations(idx.tolist(), 2)), dtype=np.int64))
    if g.m:
        if (v == 1).all():
            parts.append(offsets[g.edges])
        else:
            for p, q in g.edges.tolist():
                parts.append(_cluster_pairs(offsets, v, p, q))
    pairs = np.concatenate(parts) if parts else np.zeros((0, 2), dtype=np.int64)
    cluster = np.repeat(np.arange(g.n), v)
    return ExpansionState(g, v, Graph.from_edges(n_exp, pairs), cluster)


def perturbed_expand(g: Graph, v, r: int, prob: float, rng) -> ExpansionState:
    """Expansion plus random extra edges between clusters at base distance <= r."""
    if r < 0 or not 0.0 <= prob <= 1.0:
        raise ValueError("need r >= 0 and 0 <= prob <= 1")
    es = expand(g, v)
    if r < 2 or prob == 0.0:
        # distance-1 pairs are already fully connected
        return es
    v = es.v
    offsets = es.offsets
    extra = []
    for p in range(g.n):
        dist = bfs_distances(g, p, max_depth=r)
        for q in sorted(dist):
            if q > p and dist[q] >= 2:
                cand = _cluster_pairs(offsets, v, p, q)
                keep = rng.random(len(cand)) < prob
                if keep.any():
                    extra.append(cand[keep])
    if not extra:
        return es
    pairs = np.concatenate([es.expanded.edges, *extra])
    return ExpansionState(g, v, Graph.from_edges(es.expanded.n, pairs), es.cluster)


def refine(es: ExpansionState, e) -> Graph:
    """Keep exactly the expanded edges whose selection bit is 1."""
    e = np.asarray(e)
    if e.shape != (es.expanded.m,):
        raise GraphError(f"edge selection vector has length {e.shape}, expected {es.expanded.m}")
    return Graph(es.expanded.n, es.expanded.edges[e.astype(bool)])


def invert_step(step: CoarseningStep, perturb: Optional[tuple] = None, rng=None):
    """Expansion and refinement vectors that undo ``step``.

    Returns ``(v, e, state)``; ``state.origin[i]`` is the expanded node that
    parent node ``i`` maps to (i-th member of cluster p -> replica i of p).
    """
    part = step.partition
    v = part.sizes
    if perturb is not None:
        es = perturbed_expand(step.child, v, perturb[0], perturb[1], rng)
    else:
        es = expand(step.child, v)
    offsets = es.offsets
    origin = np.empty(part.n, dtype=np.int64)
    for p, c in enumerate(part.clusters):
        origin[list(c)] = offsets[p] + np.arange(len(c))
    parent = step.parent
    e = np.zeros(es.expanded.m, dtype=np.int64)
    if parent.m:
        mapped = origin[parent.edges]
        lo, hi = mapped.min(axis=1), mapped.max(axis=1)
        n = max(es.expanded.n, 1)
        keys = es.expanded.edges[:, 0] * n + es.expanded.edges[:, 1]
        pos = np.searchsorted(keys, lo * n + hi)
        if (pos >= len(keys)).any() or (keys[np.minimum(pos, len(keys) - 1)] != lo * n + hi).any():
            raise GraphError("parent edge missing from expansion")
        e[pos] = 1
    es = ExpansionState(es.base, es.v, es.expanded, es.cluster, e, origin)
    return v, e, es

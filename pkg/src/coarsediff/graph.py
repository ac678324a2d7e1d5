"""Sparse undirected weighted graphs.

Nodes are ``0..n-1`` in memory; the text file format is 1-indexed. Edges are
stored once, canonically as ``(i, j)`` with ``i < j`` and sorted
lexicographically, so that per-edge vectors (weights, features, edge
selection vectors) have a reproducible index.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components


class GraphError(ValueError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    edges: np.ndarray
    weights: np.ndarray = field(default=None)
    node_feat: Optional[np.ndarray] = None
    edge_feat: Optional[np.ndarray] = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        m = len(edges)
        w = np.ones(m) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if w.shape != (m,):
            raise GraphError("weights must have one entry per edge")
        if m:
            if (edges[:, 0] >= edges[:, 1]).any():
                raise GraphError("edges must be canonical (i < j); use Graph.from_edges")
            if edges.min() < 0 or edges.max() >= self.n:
                raise GraphError("edge endpoint out of range")
            keys = edges[:, 0] * max(self.n, 1) + edges[:, 1]
            if (np.diff(keys) <= 0).any():
                raise GraphError("edges must be sorted and unique; use Graph.from_edges")
            if not (w > 0).all():
                raise GraphError("edge weights must be positive")
        object.__setattr__(self, "edges", _readonly(edges))
        object.__setattr__(self, "weights", _readonly(w))
        if self.node_feat is not None:
            nf = np.asarray(self.node_feat, dtype=np.float64)
            if nf.shape != (self.n,):
                raise GraphError("node_feat must have one entry per node")
            object.__setattr__(self, "node_feat", _readonly(nf))
        if self.edge_feat is not None:
            ef = np.asarray(self.edge_feat, dtype=np.float64)
            if ef.shape != (m,):
                raise GraphError("edge_feat must have one entry per edge")
            object.__setattr__(self, "edge_feat", _readonly(ef))

    @classmethod
    def from_edges(cls, n: int, pairs: Iterable, weights=None, edge_feat=None, node_feat=None) -> "Graph":
        """Build a graph from arbitrary (possibly unordered, duplicated) pairs.

        Self-pairs are rejected. Duplicate pairs keep the first weight/feature.
        """
        pairs = np.asarray(list(pairs) if not isinstance(pairs, np.ndarray) else pairs, dtype=np.int64).reshape(-1, 2)
        if len(pairs) and (pairs[:, 0] == pairs[:, 1]).any():
            raise GraphError("self-edges are not allowed")
        lo = np.minimum(pairs[:, 0], pairs[:, 1])
        hi = np.maximum(pairs[:, 0], pairs[:, 1])
        keys = lo * max(n, 1) + hi
        _, first = np.unique(keys, return_index=True)
        canon = np.stack([lo[first], hi[first]], axis=1)
        w = None if weights is None else np.asarray(weights, dtype=np.float64)[first]
        ef = None if edge_feat is None else np.asarray(edge_feat, dtype=np.float64)[first]
        return cls(n, canon, w, node_feat, ef)

    @classmethod
    def empty(cls, n: int) -> "Graph":
        return cls(n, np.zeros((0, 2), dtype=np.int64))

    @property
    def m(self) -> int:
        return len(self.edges)

    def __repr__(self):
        return f"Graph(n={self.n}, m={self.m})"

    def __eq__(self, other):
        """Exact structural equality, same labels, weights and features."""
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.weights, other.weights)
            and _opt_equal(self.node_feat, other.node_feat)
            and _opt_equal(self.edge_feat, other.edge_feat)
        )

    __hash__ = object.__hash__

    # ------------------------------------------------------------------ views
    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric weighted adjacency W (CSR, sorted indices)."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = sp.coo_matrix(
            (np.concatenate([self.weights, self.weights]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(self.n, self.n),
        ).tocsr()
        w.sort_indices()
        return w

    @cached_property
    def degrees(self) -> np.ndarray:
        """Unweighted degree per node."""
        return _readonly(np.bincount(self.edges.ravel(), minlength=self.n))

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i] : a.indptr[i + 1]]

    def directed(self, self_loops: bool = True):
        """Directed view: (src, dst, undirected edge id or -1 for self-loops).

        Order: the ``n`` self-loops first (if requested), then for every
        canonical edge ``e`` its two orientations at rows ``2e`` and ``2e+1``.
        """
        i, j = self.edges[:, 0], self.edges[:, 1]
        src = np.stack([i, j], axis=1).ravel()
        dst = np.stack([j, i], axis=1).ravel()
        eid = np.repeat(np.arange(self.m), 2)
        if self_loops:
            loops = np.arange(self.n)
            src = np.concatenate([loops, src])
            dst = np.concatenate([loops, dst])
            eid = np.concatenate([np.full(self.n, -1), eid])
        return src, dst, eid

    def edge_index(self, i: int, j: int) -> int:
        """Position of edge {i, j} in the canonical edge list (-1 if absent)."""
        a, b = (i, j) if i < j else (j, i)
        keys = self.edges[:, 0] * max(self.n, 1) + self.edges[:, 1]
        k = a * max(self.n, 1) + b
        pos = int(np.searchsorted(keys, k))
        return pos if pos < self.m and keys[pos] == k else -1

    def with_edges(self, mask: np.ndarray) -> "Graph":
        """Subgraph on the same node set keeping edges where mask is true."""
        mask = np.asarray(mask, dtype=bool)
        ef = None if self.edge_feat is None else self.edge_feat[mask]
        return Graph(self.n, self.edges[mask], self.weights[mask], self.node_feat, ef)

    def relabel(self, perm: np.ndarray) -> "Graph":
        """Graph with node ``i`` renamed ``perm[i]``."""
        perm = np.asarray(perm)
        nf = None
        if self.node_feat is not None:
            nf = np.empty(self.n)
            nf[perm] = self.node_feat
        return Graph.from_edges(self.n, perm[self.edges], self.weights, self.edge_feat, nf)

    def to_networkx(self):
        import networkx as nx

        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_weighted_edges_from((int(a), int(b), float(w)) for (a, b), w in zip(self.edges, self.weights))
        return g

    @classmethod
    def from_networkx(cls, g) -> "Graph":
        nodes = {v: k for k, v in enumerate(g.nodes())}
        pairs = [(nodes[a], nodes[b]) for a, b in g.edges()]
        return cls.from_edges(len(nodes), pairs)


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


# ---------------------------------------------------------------------- algebra
def laplacian(g: Graph, sparse: bool = False):
    """Combinatorial Laplacian L = D - W."""
    w = g.adjacency
    d = np.asarray(w.sum(axis=1)).ravel()
    lap = sp.diags(d) - w
    return lap.tocsr() if sparse else lap.toarray()


def normalized_laplacian(g: Graph) -> np.ndarray:
    w = g.adjacency.toarray()
    d = w.sum(axis=1)
    with np.errstate(divide="ignore"):
        dinv = np.where(d > 0, 1.0 / np.sqrt(d), 0.0)
    lap = np.eye(g.n) - dinv[:, None] * w * dinv[None, :]
    lap[d == 0, d == 0] = 0.0
    return lap


def triangles(g: Graph) -> np.ndarray:
    """All triangles as sorted node triples ``(i, k, j)`` with i < k < j."""
    if g.m == 0:
        return np.zeros((0, 3), dtype=np.int64)
    # for every edge (i, k), i < k, look for j > k adjacent to both
    out = []
    nbrs = [set(g.neighbors(v).tolist()) for v in range(g.n)]
    for i, k in g.edges:
        common = nbrs[i] & nbrs[k]
        for j in common:
            if j > k:
                out.append((i, k, j))
    if not out:
        return np.zeros((0, 3), dtype=np.int64)
    return np.array(sorted(out), dtype=np.int64)


def n_components(g: Graph) -> int:
    if g.n == 0:
        return 0
    return int(connected_components(g.adjacency, directed=False)[0])


def is_connected(g: Graph) -> bool:
    return n_components(g) == 1


def bfs_distances(g: Graph, source: int, max_depth: Optional[int] = None) -> dict:
    """Hop distances from ``source``, truncated at ``max_depth``."""
    dist = {source: 0}
    frontier = [source]
    depth = 0
    while frontier and (max_depth is None or depth < max_depth):
        depth += 1
        nxt = []
        for u in frontier:
            for v in g.neighbors(u):
                v = int(v)
                if v not in dist:
                    dist[v] = depth
                    nxt.append(v)
        frontier = nxt
    return dist


# ---------------------------------------------------------------- isomorphism
def wl_colors(g: Graph, rounds: int = 3) -> list:
    """1-WL color refinement; returns the color array of every round."""
    nbrs = [g.neighbors(v).tolist() for v in range(g.n)]
    colors = [str(int(d)) for d in g.degrees]
    history = [colors]
    for _ in range(rounds):
        new = []
        for v in range(g.n):
            sig = colors[v] + "(" + ",".join(sorted(colors[u] for u in nbrs[v])) + ")"
            new.append(hashlib.blake2b(sig.encode(), digest_size=8).hexdigest())
        colors = new
        history.append(colors)
    return history


def wl_hash(g: Graph, rounds: int = 3) -> str:
    """Relabeling-invariant digest of the WL color histograms (unweighted)."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    h = hashlib.sha256(f"{g.n}:{g.m}".encode())
    for colors in wl_colors(g, rounds):
        for c, cnt in sorted(Counter(colors).items()):
            h.update(f"{c}*{cnt};".encode())
        h.update(b"|")
    return h.hexdigest()


def is_isomorphic(g1: Graph, g2: Graph, h1: Optional[str] = None, h2: Optional[str] = None) -> bool:
    """Exact (unweighted) isomorphism test: WL digest filter, then VF2."""
    if g1.n != g2.n or g1.m != g2.m:
        return False
    if not np.array_equal(np.sort(g1.degrees), np.sort(g2.degrees)):
        return False
    if (h1 or wl_hash(g1)) != (h2 or wl_hash(g2)):
        return False
    import networkx as nx

    return nx.is_isomorphic(g1.to_networkx(), g2.to_networkx())


# ------------------------------------------------------------------------ I/O
def _fmt(x: float) -> str:
    return repr(float(x))


def write_graph(g: Graph, path) -> None:
    """Line-oriented text: ``n m`` header then ``i j w`` (1-indexed) per edge."""
    lines = [f"{g.n} {g.m}"]
    lines += [f"{i + 1} {j + 1} {_fmt(w)}" for (i, j), w in zip(g.edges.tolist(), g.weights)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> Graph:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows:
        raise GraphError(f"{path}: empty graph file")
    n, m = int(rows[0][0]), int(rows[0][1])
    body = rows[1:]
    if len(body) != m:
        raise GraphError(f"{path}: header declares {m} edges, found {len(body)}")
    pairs = [(int(r[0]) - 1, int(r[1]) - 1) for r in body]
    w = [float(r[2]) if len(r) > 2 else 1.0 for r in body]
    return Graph.from_edges(n, pairs, w)


def graph_to_dict(g: Graph, **extra) -> dict:
    d = {"n": g.n, "edges": (g.edges + 1).tolist(), "weights": g.weights.tolist()}
    if g.node_feat is not None:
        d["node_feat"] = g.node_feat.tolist()
    if g.edge_feat is not None:
        d["edge_feat"] = g.edge_feat.tolist()
    d.update(extra)
    return d


def graph_from_dict(d: dict) -> Graph:
    edges = np.asarray(d["edges"], dtype=np.int64).reshape(-1, 2) - 1
    return Graph.from_edges(d["n"], edges, d.get("weights"), d.get("edge_feat"), d.get("node_feat"))


def write_graph_json(g: Graph, path, **extra) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g, **extra)))


def read_graph_json(path) -> Graph:
    return graph_from_dict(json.loads(Path(path).read_text()))


def load_graph(path) -> Graph:
    return read_graph_json(path) if str(path).endswith(".json") else read_graph(path)

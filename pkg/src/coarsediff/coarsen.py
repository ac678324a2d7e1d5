"""Spectrum-preserving graph coarsening.

A coarsening step contracts every cluster of a connected node partition into
one node and sums the weights of all edges running between two clusters.
Sequences of such steps are sampled with a randomized greedy matching that
prefers contraction sets of low local variation cost, i.e. sets whose
contraction barely disturbs the span of the first ``k`` Laplacian
eigenvectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .graph import Graph, GraphError, is_connected, laplacian

EIG_CLAMP = 1e-10


# ------------------------------------------------------------------ partitions
@dataclass(frozen=True, eq=False)
class Partition:
    """Disjoint clusters covering ``0..n-1``, ordered by smallest member."""

    n: int
    clusters: tuple

    def __post_init__(self):
        clusters = tuple(tuple(sorted(int(v) for v in c)) for c in self.clusters)
        if any(len(c) == 0 for c in clusters):
            raise GraphError("empty cluster")
        clusters = tuple(sorted(clusters, key=lambda c: c[0]))
        flat = [v for c in clusters for v in c]
        if sorted(flat) != list(range(self.n)):
            raise GraphError("clusters must be disjoint and cover every node")
        object.__setattr__(self, "clusters", clusters)

    @classmethod
    def from_sets(cls, n: int, sets: Sequence) -> "Partition":
        """Complete ``sets`` to a full partition by adding singletons."""
        covered = {int(v) for s in sets for v in s}
        return cls(n, tuple(sets) + tuple((v,) for v in range(n) if v not in covered))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(n, tuple((v,) for v in range(n)))

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clusters], dtype=np.int64)

    @property
    def assignment(self) -> np.ndarray:
        """Cluster index of every node."""
        a = np.empty(self.n, dtype=np.int64)
        for p, c in enumerate(self.clusters):
            a[list(c)] = p
        return a


def projection_pair(part: Partition, dense: bool = True):
    """Averaging projection ``P`` (n_c x n) and its pseudo-inverse ``P_plus`` (n x n_c)."""
    a = part.assignment
    sizes = part.sizes
    rows = np.arange(part.n)
    p_plus = sp.csr_matrix((np.ones(part.n), (rows, a)), shape=(part.n, part.n_clusters))
    p = sp.csr_matrix((1.0 / sizes[a], (a, rows)), shape=(part.n_clusters, part.n))
    if dense:
        return p.toarray(), p_plus.toarray()
    return p, p_plus


# ------------------------------------------------------------------ contraction
@dataclass(frozen=True, eq=False)
class CoarseningStep:
    parent: Graph
    child: Graph
    partition: Partition

    @property
    def P(self) -> np.ndarray:
        return projection_pair(self.partition)[0]

    @property
    def P_plus(self) -> np.ndarray:
        return projection_pair(self.partition)[1]


def _clusters_connected(g: Graph, part: Partition) -> bool:
    a = part.assignment
    if g.m:
        inside = a[g.edges[:, 0]] == a[g.edges[:, 1]]
        e = g.edges[inside]
    else:
        e = np.zeros((0, 2), dtype=np.int64)
    intra = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(g.n, g.n))
    ncomp = connected_components(intra, directed=False)[0] if g.n else 0
    return ncomp == part.n_clusters


def contract(g: Graph, part: Partition) -> CoarseningStep:
    """Contract every cluster; child weight W_c[p,q] = sum of W over the cluster pair."""
    if part.n != g.n:
        raise GraphError("partition size does not match graph")
    if not _clusters_connected(g, part):
        raise GraphError("every cluster must induce a connected subgraph")
    a = part.assignment
    if g.m:
        p, q = a[g.edges[:, 0]], a[g.edges[:, 1]]
        cross = p != q
        lo, hi = np.minimum(p[cross], q[cross]), np.maximum(p[cross], q[cross])
        nc = part.n_clusters
        keys = lo * nc + hi
        uk, inv = np.unique(keys, return_inverse=True)
        w = np.zeros(len(uk))
        np.add.at(w, inv, g.weights[cross])
        child = Graph(nc, np.stack([uk // nc, uk % nc], axis=1), w)
    else:
        child = Graph.empty(part.n_clusters)
    return CoarseningStep(g, child, part)


def contraction_family(g: Graph, kind: str = "edge") -> list:
    """Candidate contraction sets: edges, or closed neighborhoods."""
    if kind == "edge":
        return [tuple(e) for e in g.edges.tolist()]
    if kind == "neighborhood":
        out = set()
        for v in range(g.n):
            nb = g.neighbors(v)
            if len(nb):
                out.add(tuple(sorted({v, *nb.tolist()})))
        return sorted(out)
    raise ValueError(f"unknown contraction family {kind!r}")


# ----------------------------------------------------------- spectral helpers
def psd_pinv_sqrt(m: np.ndarray, clamp: float = EIG_CLAMP) -> np.ndarray:
    """(M)^{+1/2}: inverse square root on eigenvalues above ``clamp``, zero elsewhere."""
    m = 0.5 * (m + m.T)
    lam, vec = np.linalg.eigh(m)
    inv = np.zeros_like(lam)
    keep = lam > clamp
    inv[keep] = lam[keep] ** -0.5
    return (vec * inv) @ vec.T


def smallest_nonzero_eigpairs(lap, k: int, clamp: float = EIG_CLAMP, dense_limit: int = 512):
    """The ``k`` smallest eigenvalues above ``clamp`` and their eigenvectors.

    Fewer than ``k`` pairs are returned when the matrix does not have them.
    """
    n = lap.shape[0]
    if n <= dense_limit or k + 2 >= n:
        dense = lap.toarray() if sp.issparse(lap) else np.asarray(lap)
        lam, vec = np.linalg.eigh(dense)
    else:
        from scipy.sparse.linalg import eigsh

        mat = sp.csc_matrix(lap)
        # shift-invert just below zero keeps the factorization non-singular
        lam, vec = eigsh(mat, k=min(n - 1, k + 4), sigma=-1e-3, which="LM")
        order = np.argsort(lam)
        lam, vec = lam[order], vec[:, order]
    keep = lam > clamp
    return lam[keep][:k], vec[:, keep][:, :k]


def initial_cost_basis(g: Graph, k: int) -> np.ndarray:
    """A_0 = U_k Lambda_k^{+1/2}, truncated to n-1 columns on small graphs."""
    lam, vec = smallest_nonzero_eigpairs(laplacian(g, sparse=True), k)
    return vec * lam ** -0.5


# --------------------------------------------------------------- cost function
def _weighted_degree(g: Graph) -> np.ndarray:
    return np.asarray(g.adjacency.sum(axis=1)).ravel()


def local_variation_cost(g: Graph, A: np.ndarray, cand, normalize: bool = True) -> float:
    """||Pi_perp_C A||^2_{L_C} / (|C| - 1) for one contraction set ``C``.

    ``L_C`` is the Laplacian of the graph restricted to edges touching ``C``,
    with edges leaving ``C`` doubled. Since ``Pi_perp_C A`` vanishes outside
    ``C``, only the |C| x |C| block of ``L_C`` is needed.
    """
    c = np.asarray(sorted(cand), dtype=np.int64)
    if len(c) < 2:
        raise ValueError("contraction set needs at least two nodes")
    w = g.adjacency[c][:, c].toarray()
    deg = _weighted_degree(g)[c]
    inner = w.sum(axis=1)
    lc = np.diag(inner) - w + np.diag(2.0 * (deg - inner))
    x = A[c] - A[c].mean(axis=0, keepdims=True)
    val = float(np.einsum("ik,ij,jk->", x, lc, x))
    return val / (len(c) - 1) if normalize else val


def edge_local_variation_costs(g: Graph, A: np.ndarray) -> np.ndarray:
    """Vectorized cost for every edge of ``g`` (closed form for |C| = 2)."""
    if g.m == 0:
        return np.zeros(0)
    deg = _weighted_degree(g)
    i, j = g.edges[:, 0], g.edges[:, 1]
    delta = A[i] - A[j]
    return 0.5 * (delta * delta).sum(axis=1) * (deg[i] + deg[j])


# ---------------------------------------------------------------- partitioning
def rnd_greedy_min_cost_part(candidates: Sequence, costs, m: int, lam: float, rng) -> list:
    """Randomized greedy min-cost selection of disjoint contraction sets.

    Sets are visited in increasing cost (ties: lower candidate index). Each
    visited set is skipped with probability ``lam``; an accepted set removes
    every candidate intersecting it. Stops once the accepted sets reduce the
    node count by at least ``m`` or no candidate is left.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    ncand = len(candidates)
    if ncand == 0 or m <= 0:
        return []
    costs = np.asarray(costs, dtype=np.float64)
    order = np.lexsort((np.arange(ncand), costs))
    alive = np.ones(ncand, dtype=bool)
    n_alive = ncand
    by_node: dict = {}
    for idx, cset in enumerate(candidates):
        for v in cset:
            by_node.setdefault(v, []).append(idx)

    chosen = []
    reduction = 0
    ptr = 0
    while reduction < m and n_alive > 0:
        while True:
            while not alive[order[ptr]]:
                ptr += 1
            star = order[ptr]
            alive[star] = False
            n_alive -= 1
            skip = lam > 0 and rng.random() < lam
            if not skip or n_alive == 0:
                break
        chosen.append(candidates[star])
        reduction += len(candidates[star]) - 1
        for v in candidates[star]:
            for idx in by_node[v]:
                if alive[idx]:
                    alive[idx] = False
                    n_alive -= 1
    return chosen


# ------------------------------------------------------------------- sequences
@dataclass
class CoarseningSequence:
    levels: list
    steps: list = field(default_factory=list)
    A_mats: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return len(self.steps)


def spectral_error_bound(seq: CoarseningSequence, upto: Optional[int] = None) -> float:
    """prod(1 + sigma_i) - 1 over the first ``upto`` steps (all by default)."""
    sig = seq.sigmas if upto is None else seq.sigmas[:upto]
    return float(np.prod([1.0 + s for s in sig])) - 1.0 if sig else 0.0


def cumulative_projections(seq: CoarseningSequence, level: int):
    """Composite (P_l ... P_1, P_1^+ ... P_l^+) mapping G_0 to G_level."""
    n0 = seq.levels[0].n
    p_tot = sp.identity(n0, format="csr")
    pp_tot = sp.identity(n0, format="csr")
    for step in seq.steps[:level]:
        p, pp = projection_pair(step.partition, dense=False)
        p_tot = p @ p_tot
        pp_tot = pp_tot @ pp
    return p_tot.toarray(), pp_tot.toarray()


def _next_basis(B: np.ndarray, child: Graph) -> np.ndarray:
    lap = laplacian(child, sparse=True)
    gram = B.T @ (lap @ B)
    return B @ psd_pinv_sqrt(gram)


def rnd_red_seq(
    g: Graph,
    rng,
    family: str = "edge",
    cost: str = "local_variation",
    k: int = 8,
    rho_range=(0.1, 0.3),
    lam: float = 0.3,
    small_graph: int = 16,
    cost_fn: Optional[Callable] = None,
) -> CoarseningSequence:
    """Sample a coarsening sequence that ends in a single node."""
    if not is_connected(g):
        raise GraphError("coarsening requires a connected graph")
    rho_min, rho_max = rho_range
    if not 0.0 < rho_min <= rho_max < 1.0:
        raise ValueError("rho_range must lie inside (0, 1)")

    seq = CoarseningSequence(levels=[g])
    spectral = cost == "local_variation"
    if spectral:
        A = initial_cost_basis(g, k)
        B = A
        seq.A_mats.append(A)
    cur = g
    while cur.n > 1:
        rho = rho_max if cur.n < small_graph else rng.uniform(rho_min, rho_max)
        m = math.ceil(rho * cur.n)
        cands = contraction_family(cur, family)
        if cost_fn is not None:
            costs = np.array([cost_fn(cur, c) for c in cands])
        elif spectral:
            if family == "edge":
                costs = edge_local_variation_costs(cur, A)
            else:
                costs = np.array([local_variation_cost(cur, A, c) for c in cands])
        elif cost == "random":
            costs = rng.uniform(0.0, 1.0, size=len(cands))
        else:
            raise ValueError(f"unknown cost {cost!r}")
        chosen = rnd_greedy_min_cost_part(cands, costs, m, lam, rng)
        part = Partition.from_sets(cur.n, chosen)
        step = contract(cur, part)
        if spectral:
            sq = sum(local_variation_cost(cur, A, c, normalize=False) for c in chosen)
            seq.sigmas.append(math.sqrt(max(sq, 0.0)))
            p, _ = projection_pair(part, dense=False)
            B = p @ B
            A = _next_basis(B, step.child)
            seq.A_mats.append(A)
        seq.steps.append(step)
        seq.levels.append(step.child)
        cur = step.child
    return seq

"""Independent reference computations used by the tests."""

import networkx as nx
import numpy as np
import torch

from coarsediff.graph import Graph, laplacian


def dense_local_variation(g, A, cand):
    """Literal formula: ||(I - P+_C P_C) A||^2_{L_C} / (|C| - 1) with full n x n matrices."""
    n = g.n
    c = sorted(cand)
    P = np.zeros((n - len(c) + 1, n))
    Pp = np.zeros((n, n - len(c) + 1))
    others = [v for v in range(n) if v not in c]
    for v in c:
        P[0, v] = 1.0 / len(c)
        Pp[v, 0] = 1.0
    for r, v in enumerate(others, start=1):
        P[r, v] = 1.0
        Pp[v, r] = 1.0
    W = g.adjacency.toarray()
    WC = np.zeros_like(W)
    for i in range(n):
        for j in range(n):
            if i in c and j in c:
                WC[i, j] = W[i, j]
            elif (i in c) != (j in c):
                WC[i, j] = 2.0 * W[i, j]
    LC = np.diag(WC.sum(axis=1)) - WC
    X = (np.eye(n) - Pp @ P) @ A
    return float(np.trace(X.T @ LC @ X)) / (len(c) - 1)


def restricted_spectral_margins(seq, k, level):
    """(lhs, rhs) of ||x - P+P x||_L <= eps ||x||_L for the first k nontrivial eigenvectors."""
    from coarsediff.coarsen import cumulative_projections, spectral_error_bound

    g = seq.levels[0]
    L = laplacian(g)
    lam, U = np.linalg.eigh(L)
    U = U[:, lam > 1e-10][:, :k]
    P, Pp = cumulative_projections(seq, level)
    eps = spectral_error_bound(seq, upto=level)
    lhs, rhs = [], []
    for x in U.T:
        r = x - Pp @ (P @ x)
        lhs.append(np.sqrt(max(r @ L @ r, 0.0)))
        rhs.append(eps * np.sqrt(x @ L @ x))
    return np.array(lhs), np.array(rhs)


def naive_ppgn(layer, H, normalize=True):
    """Triple loop over (i, j, k) with the layer's MLPs applied per vector."""
    n = H.shape[0]
    out = torch.empty(n, n, layer.mlp3.spec.out_dim, dtype=H.dtype)
    for i in range(n):
        for j in range(n):
            acc = 0
            for k in range(n):
                acc = acc + layer.mlp1(H[i, k][None])[0] * layer.mlp2(H[k, j][None])[0]
            if normalize:
                acc = acc / np.sqrt(n)
            out[i, j] = layer.mlp3(torch.cat([H[i, j], acc])[None])[0]
    return out


def _reduce(h):
    """Drop vertices of degree <= 1 and suppress degree-2 vertices.

    Both targets have minimum degree 3, so this preserves K5 / K3,3 minors.
    """
    h = h.copy()
    changed = True
    while changed:
        changed = False
        for v in list(h):
            d = h.degree(v)
            if d <= 1:
                h.remove_node(v)
                changed = True
            elif d == 2:
                a, b = list(h.neighbors(v))
                h.remove_node(v)
                h.add_edge(a, b)
                changed = True
    return nx.convert_node_labels_to_integers(h)


def has_minor(g, target):
    """Exhaustive delete/contract search for a minor isomorphic to ``target`` (tiny graphs only)."""
    tn, tm = target.number_of_nodes(), target.number_of_edges()
    seen = {}  # WL hash -> exact representatives
    stack = [_reduce(g)]
    while stack:
        h = stack.pop()
        if h.number_of_nodes() < tn or h.number_of_edges() < tm:
            continue
        key = nx.weisfeiler_lehman_graph_hash(h)
        if any(nx.is_isomorphic(h, r) for r in seen.get(key, ())):
            continue
        seen.setdefault(key, []).append(h)
        if h.number_of_nodes() == tn and nx.is_isomorphic(h, target):
            return True
        for u, v in list(h.edges()):
            h2 = h.copy()
            h2.remove_edge(u, v)
            stack.append(_reduce(h2))
            stack.append(_reduce(nx.contracted_nodes(h, u, v, self_loops=False)))
    return False


def planar_oracle(g: Graph) -> bool:
    """Euler edge bound, then exhaustive search for K5 / K3,3 minors."""
    if g.n >= 3 and g.m > 3 * g.n - 6:
        return False
    h = g.to_networkx()
    return not (has_minor(h, nx.complete_graph(5)) or has_minor(h, nx.complete_bipartite_graph(3, 3)))


def replica_swap_group(ex):
    """Feature permutations generated by swapping the two replicas of each doubled cluster.

    Replicas share neighbourhoods and embeddings, so every swap is a symmetry of the
    denoiser input; an equivariant model cannot tell the swapped targets apart.
    """
    import itertools

    g = ex.expanded
    cl = np.repeat(np.arange(len(ex.v_base)), ex.v_base)
    pairs = [np.flatnonzero(cl == p) for p in range(len(ex.v_base)) if ex.v_base[p] == 2]
    eidx = {tuple(e): i for i, e in enumerate(g.edges.tolist())}
    perms = []
    for bits in itertools.product([0, 1], repeat=len(pairs)):
        s = np.arange(g.n)
        for b, (a, c) in zip(bits, pairs):
            if b:
                s[a], s[c] = c, a
        ep = [eidx[tuple(sorted((int(s[i]), int(s[j]))))] for i, j in g.edges.tolist()]
        perms.append(np.concatenate([s, g.n + np.asarray(ep, dtype=int)]))
    return perms


def symmetric_mmse(x0, perms, cfg, draws, rng):
    """Monte Carlo MMSE (mean, standard error) of recovering x0 up to the permutation group.

    Noise levels follow the training law, divided by sqrt(2) to credit the extra
    noisy view that self-conditioning provides, so the value is a lower bound on
    the per-graph loss of any equivariant denoiser.
    """
    X = np.stack([x0[p] for p in perms])
    t = np.clip(np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(draws)), cfg.sigma_min, cfg.sigma_max)
    t = t / np.sqrt(2.0)
    errs = np.empty(draws)
    pick = rng.integers(len(perms), size=draws)
    for k in range(draws):
        xs = X[pick[k]]
        y = xs + t[k] * rng.standard_normal(len(x0))
        lw = -((y - X) ** 2).sum(axis=1) / (2 * t[k] ** 2)
        w = np.exp(lw - lw.max())
        w /= w.sum()
        errs[k] = ((w @ X - xs) ** 2).sum()
    return errs.mean(), errs.std() / np.sqrt(draws)

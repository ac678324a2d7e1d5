"""Local PPGN layer, dense PPGN oracle, SignNet and the assembled denoiser.

A batch of graphs is flattened into one directed edge table. Per graph the
block holds the ``n`` self-loops first, then rows ``n + 2e`` and
``n + 2e + 1`` for the two orientations of canonical edge ``e``. Node-level
state lives on the self-loop rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .graph import Graph, GraphError, triangles
from .nn import DTYPE, MLP, MlpSpec, dropout, linear, sinusoidal_encoding


@dataclass(frozen=True, eq=False)
class MessageGraph:
    """Directed edge table of a graph batch and the local PPGN message triplets."""

    n_nodes: int
    n_rows: int
    src: torch.Tensor  # global node id per row
    dst: torch.Tensor
    self_row: torch.Tensor  # node -> its self-loop row
    fwd_row: torch.Tensor  # undirected edge -> row (i, j), i < j
    bwd_row: torch.Tensor  # undirected edge -> row (j, i)
    node_graph: torch.Tensor  # node -> graph index
    edge_graph: torch.Tensor  # undirected edge -> graph index
    row_graph: torch.Tensor
    msg_tgt: torch.Tensor
    msg_x: torch.Tensor
    msg_y: torch.Tensor
    msg_count: torch.Tensor  # messages per row
    n_graphs: int

    @property
    def n_edges(self) -> int:
        return len(self.fwd_row)


def _graph_triplets(g: Graph, row_off: int):
    n, m = g.n, g.m
    self_row = row_off + np.arange(n)
    fwd = row_off + n + 2 * np.arange(m)
    bwd = fwd + 1
    i, j = g.edges[:, 0], g.edges[:, 1]
    tgt, xs, ys = [], [], []
    # self-loop (i,i): k = i, plus k over neighbours
    tgt += [self_row, self_row[i], self_row[j]]
    xs += [self_row, fwd, bwd]
    ys += [self_row, bwd, fwd]
    # edge (i,j): k = i and k = j
    tgt += [fwd, bwd, fwd, bwd]
    xs += [self_row[i], self_row[j], fwd, bwd]
    ys += [fwd, bwd, self_row[j], self_row[i]]
    tri = triangles(g)
    if len(tri):
        key = g.edges[:, 0] * n + g.edges[:, 1]

        def row(a, b):
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            e = np.searchsorted(key, lo * n + hi)
            return np.where(a < b, fwd[e], bwd[e])

        a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
        for p, q, k in ((a, b, c), (b, a, c), (a, c, b), (c, a, b), (b, c, a), (c, b, a)):
            tgt.append(row(p, q))
            xs.append(row(p, k))
            ys.append(row(k, q))
    return np.concatenate(tgt), np.concatenate(xs), np.concatenate(ys)


def message_graph(graphs: Sequence[Graph]) -> MessageGraph:
    srcs, dsts, selfs, fwds, bwds, ng, eg, rg = [], [], [], [], [], [], [], []
    tgts, xs, ys = [], [], []
    node_off = row_off = 0
    for b, g in enumerate(graphs):
        s, d, _ = g.directed(self_loops=True)
        srcs.append(s + node_off)
        dsts.append(d + node_off)
        selfs.append(row_off + np.arange(g.n))
        fwds.append(row_off + g.n + 2 * np.arange(g.m))
        bwds.append(row_off + g.n + 2 * np.arange(g.m) + 1)
        ng.append(np.full(g.n, b))
        eg.append(np.full(g.m, b))
        rg.append(np.full(g.n + 2 * g.m, b))
        t, x, y = _graph_triplets(g, row_off)
        tgts.append(t)
        xs.append(x)
        ys.append(y)
        node_off += g.n
        row_off += g.n + 2 * g.m

    def cat(parts):
        return torch.from_numpy(np.concatenate(parts).astype(np.int64)) if parts else torch.zeros(0, dtype=torch.long)

    tgt = cat(tgts)
    count = torch.bincount(tgt, minlength=row_off)
    return MessageGraph(
        node_off, row_off, cat(srcs), cat(dsts), cat(selfs), cat(fwds), cat(bwds),
        cat(ng), cat(eg), cat(rg), tgt, cat(xs), cat(ys), count, len(graphs),
    )


class LocalPPGNLayer(nn.Module):
    """h'(i,j) = MLP3(h(i,j) || sum_k MLP1(h(i,k)) * MLP2(h(k,j)) / sqrt(#messages))."""

    def __init__(self, d_hidden: int, d_ppgn: int):
        super().__init__()
        self.mlp1 = MLP(MlpSpec(d_hidden, d_hidden, d_ppgn))
        self.mlp2 = MLP(MlpSpec(d_hidden, d_hidden, d_ppgn))
        self.mlp3 = MLP(MlpSpec(d_hidden + d_ppgn, d_hidden, d_hidden))

    def forward(self, h: torch.Tensor, mg: MessageGraph) -> torch.Tensor:
        if h.shape[0] != mg.n_rows:
            raise GraphError(f"state table has {h.shape[0]} rows, graph view has {mg.n_rows}")
        if (mg.msg_count == 0).any():
            raise GraphError("every row needs at least its self-loop message")
        m1 = self.mlp1(h)
        m2 = self.mlp2(h)
        msg = m1[mg.msg_x] * m2[mg.msg_y]
        agg = torch.zeros(h.shape[0], msg.shape[1], dtype=h.dtype).index_add_(0, mg.msg_tgt, msg)
        agg = agg / torch.sqrt(mg.msg_count.to(h.dtype)).unsqueeze(1)
        return self.mlp3(torch.cat([h, agg], dim=1))


def local_ppgn_layer(layer: LocalPPGNLayer, h: torch.Tensor, mg: MessageGraph) -> torch.Tensor:
    return layer(h, mg)


def ppgn_layer(layer: LocalPPGNLayer, H: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Dense PPGN layer on an (n, n, h) tensor, sharing the local layer's MLPs."""
    n = H.shape[0]
    m1 = layer.mlp1(H)
    m2 = layer.mlp2(H)
    M = torch.einsum("ikc,kjc->ijc", m1, m2)
    if normalize:
        M = M / math.sqrt(n)
    return layer.mlp3(torch.cat([H, M], dim=-1))


# ----------------------------------------------------------------------- SignNet
class GINLayer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mlp = MLP(MlpSpec(dim, dim, dim))

    def forward(self, h, src, dst):
        # h: (..., n, d); neighbour sum along directed edges dst <- src
        agg = h.clone().index_add_(-2, dst, h.index_select(-2, src))
        return self.mlp(agg)


class SignNet(nn.Module):
    def __init__(self, k: int, d_signnet: int, d_emb: int, n_layers: int = 5, p_drop: float = 0.1):
        super().__init__()
        self.k = k
        self.p_drop = p_drop
        self.inp = linear(2, d_signnet)
        self.gins = nn.ModuleList([GINLayer(d_signnet) for _ in range(n_layers)])
        self.proj = linear((n_layers + 1) * d_signnet, d_signnet)
        self.head = MLP(MlpSpec(max(k, 1) * d_signnet, d_signnet, d_emb))

    def phi(self, x, src, dst, generator=None):
        h = self.inp(x)
        states = [h]
        for gin in self.gins:
            h = gin(h, src, dst)
            states.append(h)
        z = dropout(torch.cat(states, dim=-1), self.p_drop, self.training, generator)
        return self.proj(z)

    def forward(self, graphs: Sequence[Graph], eigvals: torch.Tensor, eigvecs: torch.Tensor, generator=None):
        """eigvals (k,) per graph stacked to (n_total, k); eigvecs (n_total, k)."""
        src, dst = _undirected_arcs(graphs)
        n = eigvecs.shape[0]
        if eigvecs.shape != (n, self.k) or eigvals.shape != (n, self.k):
            raise GraphError(f"expected ({n}, {self.k}) eigen inputs, got {tuple(eigvecs.shape)}")
        u = eigvecs.T  # (k, n)
        # canonical order of the (u, -u) pair makes the average bitwise sign invariant
        flip = torch.tensor([_lex_negative(row) for row in u.detach()], dtype=torch.bool)
        w = torch.where(flip.unsqueeze(1), -u, u)
        lam = eigvals.T
        x = torch.stack([torch.stack([w, lam], -1), torch.stack([-w, lam], -1)])  # (2, k, n, 2)
        out = self.phi(x, src, dst, generator)
        emb = (out[0] + out[1]) * 0.5  # (k, n, d)
        return self.head(emb.permute(1, 0, 2).reshape(n, -1))


def _lex_negative(row: torch.Tensor) -> bool:
    nz = torch.nonzero(row)
    return bool(len(nz)) and bool(row[nz[0, 0]] < 0)


def _undirected_arcs(graphs: Sequence[Graph]):
    srcs, dsts, off = [], [], 0
    for g in graphs:
        s, d, _ = g.directed(self_loops=False)
        srcs.append(s + off)
        dsts.append(d + off)
        off += g.n
    if not srcs:
        return torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long)
    return torch.from_numpy(np.concatenate(srcs).astype(np.int64)), torch.from_numpy(np.concatenate(dsts).astype(np.int64))


def signnet_embed(net: SignNet, g: Graph, eigvals, eigvecs, generator=None) -> torch.Tensor:
    lam = torch.as_tensor(np.asarray(eigvals), dtype=DTYPE)
    u = torch.as_tensor(np.asarray(eigvecs), dtype=DTYPE)
    if u.shape[0] != g.n:
        raise GraphError("eigenvector length must equal node count")
    return net([g], lam.expand(g.n, -1), u, generator)


# ---------------------------------------------------------------------- denoiser
@dataclass(frozen=True)
class DenoiserSpec:
    d_hidden: int = 256
    d_ppgn: int = 128
    d_emb: int = 32
    layers: int = 10
    d_signnet: int = 128
    signnet_layers: int = 5
    k_eig: int = 8
    p_drop: float = 0.1

    def __post_init__(self):
        if self.d_emb % 2:
            raise ValueError("d_emb must be even for the size encoding")


class Denoiser(nn.Module):
    """Local PPGN network F over an expanded graph batch; also owns the SignNet."""

    N_NODE_FEATS = 6  # x_v, selfcond_v, time, rho, size, node embedding
    N_EDGE_FEATS = 7  # x_e, selfcond_e, time, rho, size, two endpoint embeddings

    def __init__(self, spec: DenoiserSpec = DenoiserSpec()):
        super().__init__()
        self.spec = spec
        d, e = spec.d_hidden, spec.d_emb
        self.emb_x_v = linear(1, e)
        self.emb_sc_v = linear(1, e)
        self.emb_x_e = linear(1, e)
        self.emb_sc_e = linear(1, e)
        self.emb_time = linear(1, e)
        self.emb_rho = linear(1, e)
        self.node_in = linear(self.N_NODE_FEATS * e, d)
        self.edge_in = linear(self.N_EDGE_FEATS * e, d)
        self.layers = nn.ModuleList([LocalPPGNLayer(d, spec.d_ppgn) for _ in range(spec.layers)])
        self.node_out = linear((spec.layers + 1) * d, 1)
        self.edge_out = linear((spec.layers + 1) * d, 1)
        self.signnet = SignNet(spec.k_eig, spec.d_signnet, e, spec.signnet_layers, spec.p_drop) if spec.k_eig > 0 else None

    def forward(
        self,
        mg: MessageGraph,
        x_v: torch.Tensor,
        x_e: torch.Tensor,
        sc_v: torch.Tensor,
        sc_e: torch.Tensor,
        t_feat: torch.Tensor,
        rho: torch.Tensor,
        target_n: Sequence[int],
        node_emb: torch.Tensor,
        generator: Optional[torch.Generator] = None,
    ):
        """Raw network outputs (per node, per undirected edge).

        ``t_feat``, ``rho`` and ``target_n`` are per graph; the rest follow the
        batch's node and canonical-edge order.
        """
        sp = self.spec
        if x_v.shape != (mg.n_nodes,) or sc_v.shape != (mg.n_nodes,):
            raise GraphError(f"node channels must have shape ({mg.n_nodes},)")
        if x_e.shape != (mg.n_edges,) or sc_e.shape != (mg.n_edges,):
            raise GraphError(f"edge channels must have shape ({mg.n_edges},)")
        if node_emb.shape != (mg.n_nodes, sp.d_emb):
            raise GraphError(f"node embeddings must have shape ({mg.n_nodes}, {sp.d_emb})")
        size = torch.as_tensor(np.stack([sinusoidal_encoding(n, sp.d_emb) for n in target_n]), dtype=DTYPE)
        if len(size) != mg.n_graphs:
            size = size.reshape(mg.n_graphs, sp.d_emb)
        g_time = self.emb_time(t_feat.reshape(-1, 1))
        g_rho = self.emb_rho(rho.reshape(-1, 1))

        ng, eg = mg.node_graph, mg.edge_graph
        node_feat = torch.cat(
            [self.emb_x_v(x_v[:, None]), self.emb_sc_v(sc_v[:, None]), g_time[ng], g_rho[ng], size[ng], node_emb], dim=1
        )
        src = mg.src[mg.fwd_row]
        dst = mg.dst[mg.fwd_row]
        common = [self.emb_x_e(x_e[:, None]), self.emb_sc_e(sc_e[:, None]), g_time[eg], g_rho[eg], size[eg]]
        fwd_feat = torch.cat(common + [node_emb[src], node_emb[dst]], dim=1)
        bwd_feat = torch.cat(common + [node_emb[dst], node_emb[src]], dim=1)
        node_feat = dropout(node_feat, sp.p_drop, self.training, generator)
        fwd_feat = dropout(fwd_feat, sp.p_drop, self.training, generator)
        bwd_feat = dropout(bwd_feat, sp.p_drop, self.training, generator)

        h = torch.zeros(mg.n_rows, sp.d_hidden, dtype=node_feat.dtype)
        h = h.index_copy(0, mg.self_row, self.node_in(node_feat))
        if mg.n_edges:
            h = h.index_copy(0, mg.fwd_row, self.edge_in(fwd_feat))
            h = h.index_copy(0, mg.bwd_row, self.edge_in(bwd_feat))
        states = [h]
        for layer in self.layers:
            h = layer(h, mg)
            states.append(h)
        z = dropout(torch.cat(states, dim=1), sp.p_drop, self.training, generator)
        v_out = self.node_out(z[mg.self_row]).squeeze(1)
        e_out = 0.5 * (self.edge_out(z[mg.fwd_row]) + self.edge_out(z[mg.bwd_row])).squeeze(1)
        return v_out, e_out


def denoiser_forward(model: Denoiser, mg: MessageGraph, *args, **kwargs):
    return model(mg, *args, **kwargs)

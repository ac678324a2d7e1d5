"""Wall-time scaling of graph generation with graph size.

The iterative generator is timed under the single-graph overfit protocol: a
model that has memorized one graph reproduces that graph's coarsening
sequence in reverse. We replay a stored sequence so the discrete choices
(cluster sizes, kept edges) are those of a perfect fit, while every level
still pays for expansion, spectral features, SignNet, the full SDE sampler
through the network, and refinement.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .coarsen import rnd_red_seq
from .config import RunConfig, torch_stream
from .diffusion import Conditioning, DiffusionConfig, model_denoiser, sde_sample, weightings
from .expand import expand, refine
from .gnn import Denoiser, LocalPPGNLayer, message_graph, ppgn_layer
from .graph import Graph
from .nn import DTYPE, linear
from .pipeline import build_training_example, embeddings


@dataclass
class BenchResult:
    sizes: list
    times: list  # median seconds per generated graph
    slope: float
    raw: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        rows = [f"{'n':>6}{'seconds':>12}"]
        rows += [f"{n:>6}{t:>12.4f}" for n, t in zip(self.sizes, self.times)]
        rows.append(f"log-log slope {self.slope:.3f}")
        return "\n".join(rows)


def fit_loglog_slope(sizes: Sequence[float], times: Sequence[float]) -> float:
    x = np.log(np.asarray(sizes, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def scaling_benchmark(generate: Callable[[int], object], sizes: Sequence[int], repeats: int = 3, warmup: bool = True) -> BenchResult:
    """Median wall time of ``generate(n)`` per size and the fitted log-log slope."""
    if warmup:
        generate(sizes[0])
    med, raw = [], {}
    for n in sizes:
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            generate(n)
            ts.append(time.perf_counter() - t0)
        raw[int(n)] = ts
        med.append(float(np.median(ts)))
    return BenchResult([int(n) for n in sizes], med, fit_loglog_slope(sizes, med), raw)


def overfit_generator(model: Denoiser, graphs: dict, cfg: RunConfig, n_steps: int, seed: int = 0):
    """Generator that regrows ``graphs[n]`` level by level (see module docstring)."""
    plans = {}
    rng = np.random.default_rng(seed)
    c = cfg.coarsen
    for n, g in graphs.items():
        seq = rnd_red_seq(g, rng, family=c.family, cost=c.cost, k=c.k, rho_range=(c.rho_min, c.rho_max),
                          lam=c.lam, small_graph=c.small_graph)
        plans[n] = [build_training_example(seq, lvl, cfg) for lvl in range(seq.L, -1, -1)]
    model.eval()
    dcfg = cfg.diffusion

    def generate(n: int) -> Graph:
        gen = torch_stream(seed, "bench")
        out = Graph.empty(1)
        for ex in plans[n]:
            es = expand(ex.base, ex.v_base)
            with torch.no_grad():
                emb = embeddings(model, [ex.base], [ex.v_base], generator=gen, allow_disconnected=True)
            mg = message_graph([es.expanded])
            cond = Conditioning(mg, emb, torch.tensor([ex.rho_hat], dtype=DTYPE), [n])
            sde_sample(model_denoiser(model, cond, dcfg), cond.size, dcfg, gen, n_steps)
            out = refine(es, ex.e_target)
        return out

    return generate


class DensePPGN(nn.Module):
    """One-shot dense PPGN denoiser over all n^2 ordered pairs (edge channel only)."""

    def __init__(self, d_hidden: int, d_ppgn: int, layers: int):
        super().__init__()
        self.inp = linear(3, d_hidden)
        self.layers = nn.ModuleList([LocalPPGNLayer(d_hidden, d_ppgn) for _ in range(layers)])
        self.out = linear((layers + 1) * d_hidden, 1)

    def forward(self, x, sc, t_feat):
        n = x.shape[0]
        h = self.inp(torch.stack([x, sc, t_feat.expand(n, n)], dim=-1))
        states = [h]
        for layer in self.layers:
            h = ppgn_layer(layer, h)
            states.append(h)
        y = self.out(torch.cat(states, dim=-1)).squeeze(-1)
        return 0.5 * (y + y.T)


def dense_generator(model: DensePPGN, cfg: DiffusionConfig, n_steps: int, seed: int = 0):
    """Generator sampling a full adjacency matrix with the dense network."""
    model.eval()

    def generate(n: int):
        gen = torch_stream(seed, "bench-dense")

        def denoise(x, x_hat, t):
            c_in, c_out, c_skip, c_self = weightings(t, cfg)
            with torch.no_grad():
                f = model((c_in * x).view(n, n), (c_self * x_hat).view(n, n), torch.tensor(math.log(t) / 4.0, dtype=DTYPE))
            return c_skip * x + c_out * f.reshape(-1)

        x = sde_sample(denoise, n * n, cfg, gen, n_steps)
        return (x.view(n, n) >= 0).numpy()

    return generate


def constant_generator(delay: float = 0.0):
    """Control whose cost does not depend on n."""

    def generate(n: int):
        if delay:
            time.sleep(delay)
        return None

    return generate

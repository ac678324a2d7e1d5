"""Training on coarsening sequences and generation by iterated expansion."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .coarsen import CoarseningSequence, rnd_red_seq, smallest_nonzero_eigpairs
from .config import RunConfig, np_stream, torch_stream
from .diffusion import (
    Conditioning, decode_bits, decode_sizes, diffusion_loss, encode_bits, encode_sizes,
    model_denoiser, sde_sample,
)
from .expand import expand, invert_step, refine
from .gnn import Denoiser, DenoiserSpec, message_graph
from .graph import Graph, GraphError, is_connected, laplacian
from .nn import DTYPE, ParamStore

log = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    pass


# -------------------------------------------------------------------- embeddings
def spectral_features(g: Graph, k: int, allow_disconnected: bool = False):
    """k smallest non-zero Laplacian eigenpairs of the unweighted structure, zero padded."""
    lam = np.zeros(k)
    vec = np.zeros((g.n, k))
    if k == 0 or g.n == 1:
        return lam, vec
    if not allow_disconnected and not is_connected(g):
        raise GraphError("spectral embeddings need a connected graph")
    plain = Graph(g.n, g.edges)
    got_l, got_v = smallest_nonzero_eigpairs(laplacian(plain, sparse=True), k)
    lam[: len(got_l)] = got_l
    vec[:, : len(got_l)] = got_v
    return lam, vec


def embeddings(
    model: Denoiser,
    graphs: Sequence[Graph],
    vs: Sequence[np.ndarray],
    spectra: Optional[Sequence] = None,
    generator: Optional[torch.Generator] = None,
    allow_disconnected: bool = False,
) -> torch.Tensor:
    """Per-node embeddings of each base graph, replicated over expansion clusters."""
    sizes = torch.from_numpy(np.concatenate([np.asarray(v, dtype=np.int64) for v in vs]))
    n_base = sum(g.n for g in graphs)
    if model.signnet is None:
        base = torch.randn(n_base, model.spec.d_emb, generator=generator, dtype=DTYPE)
    else:
        k = model.spec.k_eig
        if spectra is None:
            spectra = [spectral_features(g, k, allow_disconnected) for g in graphs]
        lam = torch.from_numpy(np.concatenate([np.broadcast_to(l, (g.n, k)) for g, (l, _) in zip(graphs, spectra)]))
        vec = torch.from_numpy(np.concatenate([u for _, u in spectra]))
        base = model.signnet(graphs, lam, vec, generator)
    return torch.repeat_interleave(base, sizes, dim=0)


# -------------------------------------------------------------- training targets
@dataclass(eq=False)
class Example:
    base: Graph  # G_{l+1}, unweighted
    v_base: np.ndarray  # v_{l+1}
    expanded: Graph
    v_target: np.ndarray  # v_l in expanded node order
    e_target: np.ndarray
    rho_hat: float
    n0: int
    spectrum: tuple


def build_training_example(seq: CoarseningSequence, level: int, cfg: RunConfig, rng=None) -> Example:
    """Diffusion targets for reconstructing level ``level`` from level ``level + 1``."""
    L = seq.L
    if not 0 <= level <= L:
        raise ValueError(f"level {level} outside 0..{L}")
    n0 = seq.levels[0].n
    g_l = seq.levels[level]
    if level == L:
        base = Graph.empty(1)
        v_base = np.ones(1, dtype=np.int64)
        expanded = Graph.empty(1)
        e = np.zeros(0, dtype=np.int64)
        origin = np.zeros(1, dtype=np.int64)
    else:
        step = seq.steps[level]
        perturb = (cfg.coarsen.perturb_r, cfg.coarsen.perturb_p) if cfg.coarsen.perturb else None
        v_base, e, es = invert_step(step, perturb, rng)
        base = Graph(step.child.n, step.child.edges)
        expanded = es.expanded
        origin = es.origin
    if level == 0:
        v_l = np.ones(g_l.n, dtype=np.int64)
        rho_hat = 0.0
    else:
        v_l = seq.steps[level - 1].partition.sizes
        rho_hat = 1.0 - g_l.n / seq.levels[level - 1].n
    v_target = np.empty(g_l.n, dtype=np.int64)
    v_target[origin] = v_l
    spectrum = spectral_features(base, cfg.model.k_eig)
    return Example(base, np.asarray(v_base), expanded, v_target, e, rho_hat, n0, spectrum)


def collate(model: Denoiser, examples: Sequence[Example], generator=None):
    """Conditioning and clean feature vector x_0 for a batch of examples."""
    mg = message_graph([ex.expanded for ex in examples])
    emb = embeddings(model, [ex.base for ex in examples], [ex.v_base for ex in examples],
                     [ex.spectrum for ex in examples], generator)
    cond = Conditioning(
        mg, emb, torch.tensor([ex.rho_hat for ex in examples], dtype=DTYPE), [ex.n0 for ex in examples]
    )
    v = np.concatenate([encode_sizes(ex.v_target) for ex in examples])
    e = np.concatenate([encode_bits(ex.e_target) for ex in examples])
    return cond, torch.from_numpy(np.concatenate([v, e]))


class LevelCache:
    """Per-graph pool of unconsumed levels of the current coarsening sequence."""

    def __init__(self, graphs: Sequence[Graph], cfg: RunConfig, rng: np.random.Generator):
        self.graphs = list(graphs)
        self.cfg = cfg
        self.rng = rng
        self.seqs: dict = {}
        self.remaining: dict = {}
        self.n_sequences = 0

    def _resample(self, idx: int) -> None:
        c = self.cfg.coarsen
        seq = rnd_red_seq(
            self.graphs[idx], self.rng, family=c.family, cost=c.cost, k=c.k,
            rho_range=(c.rho_min, c.rho_max), lam=c.lam, small_graph=c.small_graph,
        )
        self.seqs[idx] = seq
        self.remaining[idx] = list(self.rng.permutation(seq.L + 1))
        self.n_sequences += 1

    def next(self, idx: int) -> Example:
        if not self.remaining.get(idx):
            self._resample(idx)
        level = int(self.remaining[idx].pop())
        return build_training_example(self.seqs[idx], level, self.cfg, self.rng)


# ---------------------------------------------------------------------- training
def build_model(spec: DenoiserSpec, seed: int) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Denoiser(spec)


@dataclass(eq=False)
class TrainState:
    model: Denoiser
    store: ParamStore
    cfg: RunConfig
    cache: Optional[LevelCache] = None
    step: int = 0
    losses: list = field(default_factory=list)
    best_metric: Optional[float] = None
    best_step: Optional[int] = None
    best_shadow: Optional[dict] = None
    history: list = field(default_factory=list)

    def inference_model(self, use_ema: bool = True) -> Denoiser:
        """A copy of the model carrying the EMA (or raw) weights, in eval mode."""
        m = build_model(self.model.spec, 0)
        if use_ema:
            shadow = self.best_shadow if self.best_shadow is not None else self.store.shadow
            with torch.no_grad():
                for k, p in m.named_parameters():
                    p.copy_(shadow[k])
        else:
            m.load_state_dict(self.model.state_dict())
        return m.eval()


def init_state(cfg: RunConfig) -> TrainState:
    model = build_model(cfg.model, cfg.seed)
    store = ParamStore(model, lr=cfg.train.lr, ema=cfg.train.ema)
    return TrainState(model, store, cfg)


def train(
    train_graphs: Sequence[Graph],
    cfg: RunConfig,
    state: Optional[TrainState] = None,
    validate: Optional[Callable[[TrainState], float]] = None,
    progress: Optional[Callable[[TrainState, float], None]] = None,
) -> TrainState:
    """Adam on the diffusion loss over randomly drawn cached levels.

    ``validate`` returns a score (higher is better); the EMA weights at the best
    score are kept in ``state.best_shadow``.
    """
    if not train_graphs:
        raise ValueError("training split is empty")
    state = state or init_state(cfg)
    tc = cfg.train
    if state.cache is None:
        state.cache = LevelCache(train_graphs, cfg, np_stream(cfg.seed, "coarsening"))
    pick = np_stream(cfg.seed, "train-pick")
    gen = torch_stream(cfg.seed, "diffusion-train")
    # fast-forward the pick stream when resuming
    for _ in range(state.step):
        pick.integers(len(train_graphs), size=tc.batch_size)
    model = state.model.train()
    t0 = time.monotonic()
    while state.step < tc.steps:
        if tc.time_budget_s is not None and time.monotonic() - t0 > tc.time_budget_s:
            break
        idx = pick.integers(len(train_graphs), size=tc.batch_size)
        examples = [state.cache.next(int(i)) for i in idx]
        cond, x0 = collate(model, examples, gen)
        for p in model.parameters():
            p.grad = None
        loss = diffusion_loss(model, x0, cond, cfg.diffusion, gen)
        loss.backward()
        state.store.step()
        state.step += 1
        state.losses.append(loss.item())
        if progress is not None and tc.log_every and state.step % tc.log_every == 0:
            progress(state, float(np.mean(state.losses[-tc.log_every:])))
        if validate is not None and tc.eval_every and state.step % tc.eval_every == 0:
            score = float(validate(state))
            state.history.append((state.step, score))
            if state.best_metric is None or score > state.best_metric:
                state.best_metric, state.best_step = score, state.step
                state.best_shadow = {k: v.clone() for k, v in state.store.shadow.items()}
            model.train()
    return state


# ---------------------------------------------------------------------- sampling
def added_nodes(n: int, rho: float) -> int:
    """Smallest n_plus with n_plus = ceil(rho (n + n_plus)), before any cap."""
    r = Fraction(rho).limit_denominator(10**9)
    x = 0
    while True:
        nxt = math.ceil(r * (n + x))
        if nxt == x:
            return x
        x = nxt


def max_iterations(target_n: int) -> int:
    return 10 * math.ceil(math.log2(max(target_n, 2))) + 10


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k highest scores; ties go to the lower index."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    mask = np.zeros(len(scores), dtype=bool)
    mask[order[:k]] = True
    return mask


@dataclass(eq=False)
class _Chain:
    target: int
    g: Graph
    v: np.ndarray
    iters: int = 0
    done: bool = False
    trace: list = field(default_factory=list)


def _run_expansions(model, chains, step_fn, cfg: RunConfig, generator, guard):
    """Advance all unfinished chains in lockstep until ``step_fn`` marks them done."""
    dcfg = cfg.diffusion
    n_steps = cfg.sample.n_steps
    while True:
        active = [c for c in chains if not c.done]
        if not active:
            return
        for start in range(0, len(active), cfg.sample.batch_size):
            group = active[start : start + cfg.sample.batch_size]
            plans = [step_fn("plan", c) for c in group]
            states = [expand(c.g, c.v) for c in group]
            mg = message_graph([es.expanded for es in states])
            with torch.no_grad():
                emb = embeddings(model, [c.g for c in group], [c.v for c in group],
                                 generator=generator, allow_disconnected=True)
            cond = Conditioning(mg, emb, torch.tensor([p["rho_hat"] for p in plans], dtype=DTYPE),
                                [c.target for c in group])
            x = sde_sample(model_denoiser(model, cond, dcfg), cond.size, dcfg, generator, n_steps).numpy()
            v_all, e_all = x[: mg.n_nodes], x[mg.n_nodes :]
            no = eo = 0
            for c, es, plan in zip(group, states, plans):
                nn_, ne = es.expanded.n, es.expanded.m
                step_fn("apply", c, plan=plan, es=es, v0=v_all[no : no + nn_], e0=e_all[eo : eo + ne])
                no += nn_
                eo += ne
                c.iters += 1
                if not c.done and c.iters >= guard(c):
                    raise SamplingError(
                        f"no convergence after {c.iters} expansions (target {c.target}, reached {c.g.n} nodes)"
                    )


def sample_deterministic(
    model: Denoiser, targets: Sequence[int], cfg: RunConfig, seed: int = 0, trace: bool = False
) -> list:
    """Expand a single node until each chain has exactly its target node count."""
    model.eval()
    generator = torch_stream(seed, "sampler")
    rng = np_stream(seed, "sampler-rho")
    rho_min, rho_max = cfg.rho_range
    chains = [_Chain(int(n), Graph.empty(1), np.array([2], dtype=np.int64)) for n in targets]
    for c in chains:
        if c.target < 1:
            raise ValueError("target size must be >= 1")
        c.done = c.g.n >= c.target

    def step(phase, c, plan=None, es=None, v0=None, e0=None):
        if phase == "plan":
            n = int(c.v.sum())
            rho = float(rng.uniform(rho_min, rho_max))
            n_plus = min(added_nodes(n, rho), c.target - n)
            return {"n": n, "n_plus": n_plus, "rho": rho, "rho_hat": 1.0 - n / (n + n_plus)}
        c.g = refine(es, decode_bits(e0))
        c.v = np.where(top_k_mask(v0, plan["n_plus"]), 2, 1).astype(np.int64)
        if trace:
            c.trace.append((c.g.n, plan["n_plus"], plan["rho"]))
        c.done = c.g.n >= c.target

    guard = (lambda c: cfg.sample.max_iterations) if cfg.sample.max_iterations else (lambda c: max_iterations(c.target))
    _run_expansions(model, chains, step, cfg, generator, guard)
    if trace:
        return [c.g for c in chains], [c.trace for c in chains]
    return [c.g for c in chains]


def sample_stochastic(model: Denoiser, targets: Sequence[int], cfg: RunConfig, seed: int = 0) -> list:
    """Let the model choose every cluster size; stops at the target size or when nothing expands.

    The first round runs on the bare singleton (v = [1]) and only yields the
    initial cluster sizes. The model is conditioned on the midpoint of the
    reduction range, since no fraction is fixed in this mode.
    """
    model.eval()
    generator = torch_stream(seed, "sampler")
    rho_mid = 0.5 * (cfg.coarsen.rho_min + cfg.coarsen.rho_max)
    chains = [_Chain(int(n), Graph.empty(1), np.ones(1, dtype=np.int64)) for n in targets]
    for c in chains:
        if c.target < 1:
            raise ValueError("target size must be >= 1")
        c.done = c.target <= 1

    def step(phase, c, plan=None, es=None, v0=None, e0=None):
        if phase == "plan":
            return {"rho_hat": rho_mid}
        c.g = refine(es, decode_bits(e0))
        c.v = decode_sizes(v0)
        c.done = c.g.n >= c.target or bool((c.v == 1).all())

    guard = (lambda c: cfg.sample.max_iterations) if cfg.sample.max_iterations else (lambda c: max_iterations(c.target) + 1)
    _run_expansions(model, chains, step, cfg, generator, guard)
    return [c.g for c in chains]

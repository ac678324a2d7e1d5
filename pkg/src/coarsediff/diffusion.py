"""Variance-exploding diffusion over the joint node/edge feature vector.

A batch feature vector is laid out as ``[v of all graphs, e of all graphs]``
following the node and canonical-edge order of the batch's message graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Optional

import numpy as np
import torch

from .gnn import Denoiser, MessageGraph
from .nn import DTYPE


@dataclass(frozen=True)
class DiffusionConfig:
    sigma_data: float = 0.5
    rho: float = 7.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    p_mean: float = -1.2
    p_std: float = 1.2
    s_tmin: float = 0.05
    s_tmax: float = 50.0
    s_noise: float = 1.003
    s_churn: float = 40.0
    n_steps: int = 256
    c_in_form: str = "sqrt"  # "sqrt" (variance preserving) or "table" (1 / (sd^2 + t^2))
    loss_weighting: str = "none"  # "none" as in the loss algorithm, or "edm" = 1 / c_out^2

    def __post_init__(self):
        if not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.c_in_form not in ("sqrt", "table"):
            raise ValueError(f"unknown c_in form {self.c_in_form!r}")
        if self.loss_weighting not in ("none", "edm"):
            raise ValueError(f"unknown loss weighting {self.loss_weighting!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def weightings(t, cfg: DiffusionConfig = DiffusionConfig()):
    """(c_in, c_out, c_skip, c_self) at noise level t (float, array or tensor)."""
    sd2 = cfg.sigma_data**2
    lib = torch if isinstance(t, torch.Tensor) else np
    denom = sd2 + t * t
    root = lib.sqrt(denom)
    c_in = 1.0 / root if cfg.c_in_form == "sqrt" else 1.0 / denom
    c_out = t * cfg.sigma_data / root
    c_skip = sd2 / denom
    c_self = cfg.sigma_data + 0.0 * t
    return c_in, c_out, c_skip, c_self


def time_schedule(cfg: DiffusionConfig = DiffusionConfig(), n_steps: Optional[int] = None) -> np.ndarray:
    """t_0 = sigma_max ... t_{N-1} = sigma_min, followed by t_N = 0."""
    n = cfg.n_steps if n_steps is None else n_steps
    if n < 1:
        raise ValueError("need at least one step")
    inv = 1.0 / cfg.rho
    if n == 1:
        ts = np.array([cfg.sigma_max])
    else:
        i = np.arange(n)
        ts = (cfg.sigma_max**inv + i / (n - 1) * (cfg.sigma_min**inv - cfg.sigma_max**inv)) ** cfg.rho
        # pin the endpoints against rounding in the power
        ts[0], ts[-1] = cfg.sigma_max, cfg.sigma_min
    return np.append(ts, 0.0)


def gamma_schedule(cfg: DiffusionConfig, t_i: float, n_steps: Optional[int] = None) -> float:
    n = cfg.n_steps if n_steps is None else n_steps
    if cfg.s_tmin <= t_i <= cfg.s_tmax:
        return min(cfg.s_churn / n, math.sqrt(2.0) - 1.0)
    return 0.0


# ---------------------------------------------------------------------- encoding
def encode_bits(b) -> np.ndarray:
    return 2.0 * np.asarray(b, dtype=np.float64) - 1.0


def encode_sizes(v) -> np.ndarray:
    """Cluster sizes {1, 2} -> {-1, +1}."""
    return 2.0 * np.asarray(v, dtype=np.float64) - 3.0


def decode_bits(x) -> np.ndarray:
    """Sign threshold with ties going to 1."""
    return (np.asarray(x) >= 0).astype(np.int64)


def decode_sizes(x) -> np.ndarray:
    return 1 + decode_bits(x)


# ------------------------------------------------------------------ conditioning
@dataclass(eq=False)
class Conditioning:
    """Everything the network sees besides the noisy and self-conditioning channels."""

    mg: MessageGraph
    node_emb: torch.Tensor
    rho: torch.Tensor  # per graph
    target_n: list

    @property
    def n_nodes(self) -> int:
        return self.mg.n_nodes

    @property
    def n_edges(self) -> int:
        return self.mg.n_edges

    @property
    def size(self) -> int:
        return self.mg.n_nodes + self.mg.n_edges

    @property
    def elem_graph(self) -> torch.Tensor:
        return torch.cat([self.mg.node_graph, self.mg.edge_graph])

    def split(self, x: torch.Tensor):
        return x[: self.n_nodes], x[self.n_nodes :]


def denoiser_D(
    model: Denoiser,
    x_t: torch.Tensor,
    x_hat: torch.Tensor,
    t,
    cond: Conditioning,
    cfg: DiffusionConfig = DiffusionConfig(),
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """c_skip x_t + c_out F(c_in x_t, c_self x_hat, t); ``t`` is scalar or per graph."""
    if x_t.shape != (cond.size,) or x_hat.shape != (cond.size,):
        raise ValueError(f"feature vectors must have length {cond.size}")
    t_g = torch.as_tensor(t, dtype=DTYPE)
    if t_g.dim() == 0:
        t_g = t_g.expand(cond.mg.n_graphs)
    t_el = t_g[cond.elem_graph]
    c_in, c_out, c_skip, c_self = weightings(t_el, cfg)
    xin = c_in * x_t
    sc = c_self * x_hat
    f_v, f_e = model(
        cond.mg, xin[: cond.n_nodes], xin[cond.n_nodes :], sc[: cond.n_nodes], sc[cond.n_nodes :],
        torch.log(t_g) / 4.0, cond.rho, cond.target_n, cond.node_emb, generator,
    )
    return c_skip * x_t + c_out * torch.cat([f_v, f_e])


@dataclass(eq=False)
class LossDraws:
    t: torch.Tensor  # per graph
    x_t: torch.Tensor
    x_hat: torch.Tensor


def draw_loss_inputs(
    model: Denoiser, x0: torch.Tensor, cond: Conditioning, cfg: DiffusionConfig, generator: torch.Generator
) -> LossDraws:
    """Noise level, self-conditioning estimate (no gradient) and the noisy input."""
    b = cond.mg.n_graphs
    ln_t = cfg.p_mean + cfg.p_std * torch.randn(b, generator=generator, dtype=DTYPE)
    t = torch.clamp(torch.exp(ln_t), cfg.sigma_min, cfg.sigma_max)
    use_sc = torch.rand(b, generator=generator, dtype=DTYPE) < 0.5
    eps_sc = torch.randn(cond.size, generator=generator, dtype=DTYPE)
    eps = torch.randn(cond.size, generator=generator, dtype=DTYPE)
    t_el = t[cond.elem_graph]
    x_hat = torch.zeros(cond.size, dtype=DTYPE)
    if bool(use_sc.any()):
        with torch.no_grad():
            est = denoiser_D(model, x0 + t_el * eps_sc, x_hat, t, cond, cfg, generator)
        x_hat = torch.where(use_sc[cond.elem_graph], est, x_hat)
    return LossDraws(t, x0 + t_el * eps, x_hat)


def loss_from_draws(
    model: Denoiser, x0: torch.Tensor, cond: Conditioning, draws: LossDraws,
    cfg: DiffusionConfig = DiffusionConfig(), generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    d = denoiser_D(model, draws.x_t, draws.x_hat, draws.t, cond, cfg, generator)
    sq = (d - x0) ** 2
    per_graph = torch.zeros(cond.mg.n_graphs, dtype=DTYPE).index_add_(0, cond.elem_graph, sq)
    if cfg.loss_weighting == "edm":
        _, c_out, _, _ = weightings(draws.t, cfg)
        per_graph = per_graph / c_out**2
    return per_graph.mean()


def diffusion_loss(
    model: Denoiser, x0: torch.Tensor, cond: Conditioning,
    cfg: DiffusionConfig = DiffusionConfig(), generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Squared reconstruction error summed per graph, averaged over the batch."""
    draws = draw_loss_inputs(model, x0, cond, cfg, generator)
    return loss_from_draws(model, x0, cond, draws, cfg, generator)


def sde_sample(
    denoise: Callable[[torch.Tensor, torch.Tensor, float], torch.Tensor],
    size: int,
    cfg: DiffusionConfig = DiffusionConfig(),
    generator: Optional[torch.Generator] = None,
    n_steps: Optional[int] = None,
) -> torch.Tensor:
    """Stochastic Heun sampler with churn and self-conditioning.

    ``denoise(x, x_hat, t)`` is the preconditioned denoiser. Steps run over
    i = 0 .. N-1 of the schedule t_0 .. t_N with t_N = 0.
    """
    n = cfg.n_steps if n_steps is None else n_steps
    ts = time_schedule(cfg, n)
    x = cfg.sigma_max * torch.randn(size, generator=generator, dtype=DTYPE)
    x_hat = torch.zeros(size, dtype=DTYPE)
    for i in range(n):
        t_i, t_next = float(ts[i]), float(ts[i + 1])
        eps = cfg.s_noise * torch.randn(size, generator=generator, dtype=DTYPE)
        t_tilde = t_i + gamma_schedule(cfg, t_i, n) * t_i
        x_tilde = x + math.sqrt(max(t_tilde**2 - t_i**2, 0.0)) * eps
        x_hat = denoise(x_tilde, x_hat, t_tilde)
        d = (x_tilde - x_hat) / t_tilde
        x = x_tilde + (t_next - t_tilde) * d
        if t_next > 0:
            x_hat = denoise(x, x_hat, t_next)
            d2 = (x - x_hat) / t_next
            x = x_tilde + (t_next - t_tilde) * 0.5 * (d + d2)
    return x


def model_denoiser(model: Denoiser, cond: Conditioning, cfg: DiffusionConfig = DiffusionConfig()):
    """Inference-time closure for :func:`sde_sample`."""

    def denoise(x, x_hat, t):
        with torch.no_grad():
            return denoiser_D(model, x, x_hat, t, cond, cfg)

    return denoise

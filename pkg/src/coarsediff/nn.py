"""Small numerical kernels for the denoiser: layers, optimizer, EMA, checkpoints.

Autodiff is delegated to torch; everything runs in float64 unless a model is
explicitly cast down. Optimizer and EMA are written out so their exact update
rules are visible and testable.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
LN_VAR_FLOOR = 1e-5

# When set, every ReLU and layer-norm variance floor appends its active-branch
# mask here. Gradient checks use it to tell kinks from genuine mismatches.
_branch_log: Optional[list] = None


@contextmanager
def record_branches():
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def relu(x: torch.Tensor) -> torch.Tensor:
    if _branch_log is not None:
        _branch_log.append(x.detach() > 0)
    return torch.relu(x)


def layer_norm(x: torch.Tensor, weight=None, bias=None, floor: float = LN_VAR_FLOOR) -> torch.Tensor:
    # constant rows have zero centered values, so they map to zero before the affine part
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    if _branch_log is not None:
        _branch_log.append(var.detach() > floor)
    y = xc / torch.sqrt(torch.clamp(var, min=floor))
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias)


def linear(in_dim: int, out_dim: int, bias: bool = True) -> nn.Linear:
    return nn.Linear(in_dim, out_dim, bias=bias, dtype=DTYPE)


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    hidden_dim: int
    out_dim: int

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("MLP dims must be >= 1")


class MLP(nn.Module):
    """Two layers, each followed by layer norm and ReLU; the second has width out_dim."""

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        self.lin1 = linear(spec.in_dim, spec.hidden_dim)
        self.norm1 = LayerNorm(spec.hidden_dim)
        self.lin2 = linear(spec.hidden_dim, spec.out_dim)
        self.norm2 = LayerNorm(spec.out_dim)

    def forward(self, x):
        if x.shape[-1] != self.spec.in_dim:
            raise ValueError(f"MLP expects {self.spec.in_dim} input columns, got {x.shape[-1]}")
        h = relu(self.norm1(self.lin1(x)))
        return relu(self.norm2(self.lin2(h)))


def mlp_forward(mlp: MLP, x) -> torch.Tensor:
    return mlp(torch.as_tensor(x, dtype=DTYPE))


def dropout(x: torch.Tensor, p: float, training: bool, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout with an explicit generator; identity at inference."""
    if not training or p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def sinusoidal_encoding(value, dim: int) -> np.ndarray:
    """Interleaved [sin, cos] pairs at frequencies 10000^(-2i/dim)."""
    if dim % 2:
        raise ValueError("encoding dim must be even")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = float(value) * freqs
    out = np.empty(dim)
    out[0::2] = np.sin(ang)
    out[1::2] = np.cos(ang)
    return out


@dataclass
class AdamState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update applied in place; ``state.step`` is advanced first."""
    state.step += 1
    t = state.step
    b1, b2 = state.betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


def ema_update(shadow: dict, params: dict, coeff: float) -> None:
    if not 0.0 <= coeff < 1.0:
        raise ValueError("EMA coefficient must lie in [0, 1)")
    with torch.no_grad():
        for name, p in params.items():
            shadow[name].mul_(coeff).add_(p.detach(), alpha=1.0 - coeff)


class ParamStore:
    """Named parameters of a module plus EMA shadow and Adam moments."""

    def __init__(self, module: nn.Module, lr: float = 1e-4, ema: float = 0.99):
        self.module = module
        self.ema_coeff = ema
        self.adam = AdamState(lr=lr)
        self.shadow = {k: p.detach().clone() for k, p in self.params.items()}

    @property
    def params(self) -> dict:
        return dict(self.module.named_parameters())

    def grads(self) -> dict:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    def step(self) -> None:
        adam_step(self.params, self.grads(), self.adam)
        ema_update(self.shadow, self.params, self.ema_coeff)

    def load_shadow_into(self, module: nn.Module) -> None:
        with torch.no_grad():
            for k, p in module.named_parameters():
                p.copy_(self.shadow[k])

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, p in sorted(self.params.items()):
            h.update(k.encode())
            h.update(p.detach().numpy().astype("<f8").tobytes())
        return h.hexdigest()


def save_checkpoint(store: ParamStore, path, meta: Optional[dict] = None) -> None:
    """Write ``path`` (JSON manifest) and ``path.bin`` (little-endian float64 blob)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    groups = [("param", store.params), ("ema", store.shadow), ("adam_m", store.adam.m), ("adam_v", store.adam.v)]
    for group, tensors in groups:
        for name in sorted(tensors):
            arr = tensors[name].detach().numpy().astype("<f8")
            raw = arr.tobytes()
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": "coarsediff-ckpt-1",
        "dtype": "<f8",
        "ema_coeff": store.ema_coeff,
        "adam": {"lr": store.adam.lr, "betas": list(store.adam.betas), "eps": store.adam.eps, "step": store.adam.step},
        "blob": path.name + ".bin",
        "sha256": hashlib.sha256(blob).hexdigest(),
        "entries": entries,
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_name(path.name + ".bin").write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=1))


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def load_checkpoint(store: ParamStore, path) -> dict:
    """Restore params, EMA and optimizer state in place; returns the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = path.with_name(manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"checkpoint blob {manifest['blob']} is corrupt")
    params = store.params
    store.adam = AdamState(
        lr=manifest["adam"]["lr"], betas=tuple(manifest["adam"]["betas"]),
        eps=manifest["adam"]["eps"], step=manifest["adam"]["step"],
    )
    store.ema_coeff = manifest["ema_coeff"]
    seen = set()
    for ent in manifest["entries"]:
        arr = np.frombuffer(blob, dtype="<f8", count=ent["nbytes"] // 8, offset=ent["offset"])
        t = torch.from_numpy(arr.reshape(ent["shape"]).copy())
        name, group = ent["name"], ent["group"]
        if group == "param":
            if name not in params:
                raise ValueError(f"checkpoint has unknown parameter {name}")
            if tuple(params[name].shape) != tuple(t.shape):
                raise ValueError(f"shape mismatch for {name}: checkpoint {tuple(t.shape)}, model {tuple(params[name].shape)}")
            with torch.no_grad():
                params[name].copy_(t)
            seen.add(name)
        elif group == "ema":
            store.shadow[name] = t
        elif group == "adam_m":
            store.adam.m[name] = t
        else:
            store.adam.v[name] = t
    missing = set(params) - seen
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    return manifest


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: Optional[tuple] = None  # (name, flat index, analytic, numeric)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    params: dict,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheck:
    """Compare autograd gradients of ``fn`` with central differences.

    ``fn`` must be a deterministic scalar function of ``params``. The error of
    an entry is |a - n| / max(|a|, |n|, floor), where the floor is the
    round-off resolution of the difference quotient (machine eps * |f| / h)
    divided by ``tol``; gradients below that level cannot be resolved to
    ``tol`` relative accuracy by differencing. Entries whose stencil
    [x - h, x + h] switches a ReLU or variance-floor branch are counted in
    ``skipped_kinks`` instead, as the function is not smooth there.
    """
    for p in params.values():
        p.grad = None
    with record_branches() as base_branches:
        f0 = fn()
    f0.backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
    slots = [(k, i) for k, p in params.items() for i in range(p.numel())]
    if max_entries is not None and len(slots) > max_entries:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(slots), size=max_entries, replace=False)
        slots = [slots[i] for i in sorted(pick)]
    floor = np.finfo(np.float64).eps * max(abs(f0.item()), 1.0) / h / tol
    out = GradCheck(0.0, 0, 0)
    with torch.no_grad():
        for k, i in slots:
            flat = params[k].view(-1)
            old = flat[i].item()
            flat[i] = old + h
            with record_branches() as bp:
                fp = fn().item()
            flat[i] = old - h
            with record_branches() as bm:
                fm = fn().item()
            flat[i] = old
            if not (_same_branches(bp, base_branches) and _same_branches(bm, base_branches)):
                out.skipped_kinks += 1
                continue
            num = (fp - fm) / (2 * h)
            a = analytic[k].view(-1)[i].item()
            err = abs(a - num) / max(abs(a), abs(num), floor)
            out.checked += 1
            if err >= out.max_rel_error:
                out.max_rel_error = err
                out.worst = (k, i, a, num)
    return out


def set_threads_from_env(var: str = "COARSEDIFF_THREADS") -> None:
    import os

    val = os.environ.get(var)
    if val:
        k = int(val)
        if k < 1:
            raise ValueError(f"{var}={val}")
        torch.set_num_threads(k)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

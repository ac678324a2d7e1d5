"""Run configuration: nested dataclasses stored as YAML."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .diffusion import DiffusionConfig
from .gnn import DenoiserSpec


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "tree"  # tree | planar | sbm
    count: int = 200
    n_min: int = 64
    n_max: int = 64
    communities: tuple = (2, 5)
    community_size: tuple = (20, 40)
    p_in: float = 0.3
    p_out: float = 0.05
    data_dir: Optional[str] = None  # read graphs from here instead of generating


@dataclass
class CoarsenConfig:
    family: str = "edge"
    cost: str = "local_variation"
    k: int = 8
    rho_min: float = 0.1
    rho_max: float = 0.3
    lam: float = 0.3
    small_graph: int = 16
    perturb: bool = False
    perturb_r: int = 2
    perturb_p: float = 0.1


@dataclass
class TrainConfig:
    steps: int = 100_000
    batch_size: int = 32
    lr: float = 1e-4
    ema: float = 0.99
    time_budget_s: Optional[float] = None
    eval_every: int = 0  # 0 disables periodic validation
    val_samples: int = 32
    log_every: int = 100


@dataclass
class SampleConfig:
    mode: str = "deterministic"  # deterministic | stochastic
    n_steps: int = 256
    use_ema: bool = True
    max_iterations: Optional[int] = None
    batch_size: int = 128


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    coarsen: CoarsenConfig = field(default_factory=CoarsenConfig)
    model: DenoiserSpec = field(default_factory=lambda: DenoiserSpec(k_eig=2))
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    out_dir: str = "runs/default"

    @property
    def rho_range(self) -> tuple:
        return (self.coarsen.rho_min, self.coarsen.rho_max)


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            val = to_dict(val)
        elif isinstance(val, tuple):
            val = list(val)
        out[f.name] = val
    return out


def from_dict(cls, data: Optional[dict], path: str = ""):
    """Build ``cls`` from a (possibly partial) dict; unknown keys are errors."""
    data = dict(data or {})
    proto = cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys under '{path or '<root>'}': {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        default = getattr(proto, f.name)
        if f.name not in data:
            kwargs[f.name] = default
            continue
        val = data[f.name]
        key = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(default):
            if not isinstance(val, dict):
                raise ConfigError(f"'{key}' must be a mapping")
            val = from_dict(type(default), val, key)
        elif isinstance(default, tuple):
            val = tuple(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"'{key}' must be true/false")
        elif isinstance(default, int) and not isinstance(val, bool):
            if isinstance(val, float) and val.is_integer():
                val = int(val)
            if not isinstance(val, int):
                raise ConfigError(f"'{key}' must be an integer")
        elif isinstance(default, float) or f.type == "Optional[float]":
            if isinstance(val, str):
                # YAML 1.1 reads "1e-05" as a string
                try:
                    val = float(val)
                except ValueError:
                    pass
            if val is not None:
                if not isinstance(val, (int, float)) or isinstance(val, bool):
                    raise ConfigError(f"'{key}' must be a number")
                val = float(val)
        kwargs[f.name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid values under '{path or '<root>'}': {exc}") from exc


def dump_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load_yaml(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(RunConfig, data)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    return load_yaml(p.read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_yaml(cfg))


def apply_overrides(cfg: RunConfig, items) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = to_dict(cfg)
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(RunConfig, data)


def config_hash(obj) -> str:
    data = to_dict(obj) if dataclasses.is_dataclass(obj) else obj
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


def stream_seed(root: int, name: str) -> int:
    """Independent 63-bit seed for the named random stream under ``root``."""
    ss = np.random.SeedSequence(entropy=root, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def np_stream(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name))


def torch_stream(root: int, name: str):
    import torch

    g = torch.Generator()
    g.manual_seed(stream_seed(root, name))
    return g

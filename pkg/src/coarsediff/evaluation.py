"""Sample-quality metrics: statistic MMDs, validity, uniqueness and novelty."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .graph import Graph, is_connected, is_isomorphic, normalized_laplacian, wl_hash

CLUSTERING_BINS = 100
SPECTRAL_BINS = 200


# -------------------------------------------------------------------- statistics
def degree_histogram(g: Graph) -> np.ndarray:
    return np.bincount(g.degrees, minlength=1).astype(np.float64)


def clustering_histogram(g: Graph, bins: int = CLUSTERING_BINS) -> np.ndarray:
    import networkx as nx

    coeffs = list(nx.clustering(g.to_networkx()).values()) if g.n else []
    hist, _ = np.histogram(coeffs, bins=bins, range=(0.0, 1.0))
    return hist.astype(np.float64)


def spectral_histogram(g: Graph, bins: int = SPECTRAL_BINS) -> np.ndarray:
    lam = np.linalg.eigvalsh(normalized_laplacian(g)) if g.n else np.zeros(0)
    hist, _ = np.histogram(np.clip(lam, 0.0, 2.0), bins=bins, range=(0.0, 2.0))
    return hist.astype(np.float64)


STATISTICS = {
    "degree": degree_histogram,
    "clustering": clustering_histogram,
    "spectral": spectral_histogram,
}


def _normalize(hists: Sequence[np.ndarray], width: int) -> np.ndarray:
    out = np.zeros((len(hists), width))
    for i, h in enumerate(hists):
        out[i, : len(h)] = h
        s = out[i].sum()
        if s > 0:
            out[i] /= s
    return out


def gaussian_tv_kernel(x: np.ndarray, y: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """exp(-TV(x, y)^2 / (2 sigma^2)) for all row pairs of two normalized histogram stacks."""
    tv = 0.5 * np.abs(x[:, None, :] - y[None, :, :]).sum(axis=-1)
    return np.exp(-(tv**2) / (2.0 * sigma**2))


def mmd(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray], sigma: float = 1.0) -> float:
    """Squared MMD (V-statistic) between two sets of histograms.

    Histograms are zero-padded to a common length and normalized to sum 1.
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("MMD needs two nonempty sets")
    width = max(max(len(h) for h in set_a), max(len(h) for h in set_b))
    a = _normalize(set_a, width)
    b = _normalize(set_b, width)
    kaa = gaussian_tv_kernel(a, a, sigma).mean()
    kbb = gaussian_tv_kernel(b, b, sigma).mean()
    kab = gaussian_tv_kernel(a, b, sigma).mean()
    return float(kaa + kbb - 2.0 * kab)


def graph_mmd(gen: Sequence[Graph], ref: Sequence[Graph], stat: str, sigma: float = 1.0) -> float:
    fn = STATISTICS[stat]
    return mmd([fn(g) for g in gen], [fn(g) for g in ref], sigma)


# ---------------------------------------------------------------------- validity
def is_planar(g: Graph) -> bool:
    import networkx as nx

    planar, _ = nx.check_planarity(g.to_networkx())
    return bool(planar)


def is_valid_tree(g: Graph) -> bool:
    return g.m == g.n - 1 and is_connected(g)


VALIDITY = {"tree": is_valid_tree, "planar": lambda g: is_planar(g) and is_connected(g), "sbm": is_connected}


def iso_classes(graphs: Sequence[Graph]) -> list:
    """Class id per graph; graphs share an id iff they are isomorphic."""
    hashes = [wl_hash(g) for g in graphs]
    reps = defaultdict(list)  # hash -> [(class id, representative index)]
    out = []
    next_id = 0
    for i, (g, h) in enumerate(zip(graphs, hashes)):
        for cid, j in reps[h]:
            if is_isomorphic(g, graphs[j], h, hashes[j]):
                out.append(cid)
                break
        else:
            reps[h].append((next_id, i))
            out.append(next_id)
            next_id += 1
    return out


def vun(generated: Sequence[Graph], train_set: Sequence[Graph], validity_fn: Callable[[Graph], bool]) -> dict:
    """Valid, unique, novel and V.U.N. percentages.

    A graph counts as unique when it is the first of its isomorphism class in
    ``generated``, and as novel when no training graph is isomorphic to it.
    """
    total = len(generated)
    if total == 0:
        return {"valid": 0.0, "unique": 0.0, "novel": 0.0, "vun": 0.0}
    valid = np.array([bool(validity_fn(g)) for g in generated])
    classes = iso_classes(generated)
    first = np.zeros(total, dtype=bool)
    seen = set()
    for i, c in enumerate(classes):
        if c not in seen:
            seen.add(c)
            first[i] = True
    train_hash = defaultdict(list)
    for t in train_set:
        train_hash[wl_hash(t)].append(t)
    novel = np.ones(total, dtype=bool)
    for i, g in enumerate(generated):
        h = wl_hash(g)
        novel[i] = not any(is_isomorphic(g, t, h, h) for t in train_hash.get(h, ()))
    pct = lambda mask: 100.0 * float(mask.mean())  # noqa: E731
    return {"valid": pct(valid), "unique": pct(first), "novel": pct(novel), "vun": pct(valid & first & novel)}


# ------------------------------------------------------------------------ report
@dataclass
class MetricReport:
    mmd: dict = field(default_factory=dict)
    train_mmd: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    mean_ratio: Optional[float] = None
    valid: Optional[float] = None
    unique: Optional[float] = None
    novel: Optional[float] = None
    vun: Optional[float] = None
    n_generated: int = 0
    note: str = "mean ratio over the statistics whose train-vs-test MMD is nonzero"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        lines = [f"{'statistic':<12}{'mmd':>14}{'train mmd':>14}{'ratio':>10}"]
        for k, v in self.mmd.items():
            ref = self.train_mmd.get(k)
            r = self.ratios.get(k)
            lines.append(
                f"{k:<12}{v:>14.6g}{'' if ref is None else format(ref, '.6g'):>14}"
                f"{'' if r is None else format(r, '.3f'):>10}"
            )
        if self.mean_ratio is not None:
            lines.append(f"mean ratio  {self.mean_ratio:.3f}")
        for k in ("valid", "unique", "novel", "vun"):
            val = getattr(self, k)
            if val is not None:
                lines.append(f"{k:<12}{val:>6.1f}%")
        return "\n".join(lines)


def evaluate(
    generated: Sequence[Graph],
    test_set: Sequence[Graph],
    train_set: Optional[Sequence[Graph]] = None,
    kind: Optional[str] = None,
    sigma: float = 1.0,
) -> MetricReport:
    rep = MetricReport(n_generated=len(generated))
    for stat in STATISTICS:
        rep.mmd[stat] = graph_mmd(generated, test_set, stat, sigma)
        if train_set:
            ref = graph_mmd(train_set, test_set, stat, sigma)
            rep.train_mmd[stat] = ref
            if ref > 0:  # e.g. clustering of trees is identically zero
                rep.ratios[stat] = rep.mmd[stat] / ref
    if rep.ratios:
        rep.mean_ratio = float(np.mean(list(rep.ratios.values())))
    if kind is not None:
        scores = vun(generated, train_set or [], VALIDITY[kind])
        rep.valid, rep.unique, rep.novel, rep.vun = scores["valid"], scores["unique"], scores["novel"], scores["vun"]
    return rep

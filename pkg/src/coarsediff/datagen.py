"""Synthetic datasets: Delaunay planar graphs, uniform random trees, SBM graphs."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import Graph, is_connected, load_graph, write_graph


def gen_planar(n: int, rng: np.random.Generator, max_tries: int = 100) -> Graph:
    """Delaunay triangulation of ``n`` uniform points in the unit square."""
    from scipy.spatial import Delaunay, QhullError

    if n < 3:
        raise ValueError("planar graphs need n >= 3")
    for _ in range(max_tries):
        pts = rng.random((n, 2))
        try:
            tri = Delaunay(pts)
        except QhullError:
            continue  # collinear or otherwise degenerate draw
        if len(tri.coplanar):
            continue
        s = tri.simplices
        pairs = np.concatenate([s[:, [0, 1]], s[:, [1, 2]], s[:, [0, 2]]])
        g = Graph.from_edges(n, np.unique(np.sort(pairs, axis=1), axis=0))
        if is_connected(g):
            return g
    raise RuntimeError(f"no valid triangulation after {max_tries} draws")


def prufer_to_tree(seq: Sequence[int], n: int) -> Graph:
    """Decode a Prüfer sequence of length n-2 over 0..n-1."""
    if n == 1:
        return Graph.empty(1)
    if n == 2:
        return Graph.from_edges(2, [(0, 1)])
    seq = list(seq)
    if len(seq) != n - 2:
        raise ValueError("Prüfer sequence must have length n - 2")
    degree = np.ones(n, dtype=np.int64)
    for s in seq:
        degree[s] += 1
    leaves = [i for i in range(n) if degree[i] == 1]
    heapq.heapify(leaves)
    pairs = []
    for s in seq:
        leaf = heapq.heappop(leaves)
        pairs.append((leaf, s))
        degree[s] -= 1
        if degree[s] == 1:
            heapq.heappush(leaves, s)
    pairs.append((heapq.heappop(leaves), heapq.heappop(leaves)))
    return Graph.from_edges(n, pairs)


def gen_tree(n: int, rng: np.random.Generator) -> Graph:
    """Uniform random labelled tree on ``n`` nodes."""
    if n < 1:
        raise ValueError("trees need n >= 1")
    return prufer_to_tree(rng.integers(0, n, size=max(n - 2, 0)).tolist(), n)


def gen_sbm_raw(sizes: Sequence[int], p_in: float, p_out: float, rng: np.random.Generator) -> Graph:
    """One Bernoulli draw of a stochastic block model, connectivity not enforced."""
    sizes = np.asarray(sizes, dtype=np.int64)
    n = int(sizes.sum())
    block = np.repeat(np.arange(len(sizes)), sizes)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(block[iu] == block[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    return Graph.from_edges(n, np.stack([iu[keep], ju[keep]], axis=1))


def gen_sbm(
    sizes: Optional[Sequence[int]] = None,
    p_in: float = 0.3,
    p_out: float = 0.05,
    rng: Optional[np.random.Generator] = None,
    communities=(2, 5),
    community_size=(20, 40),
    max_tries: int = 1000,
) -> Graph:
    """SBM graph, redrawn until connected. Community sizes are drawn when not given."""
    rng = rng if rng is not None else np.random.default_rng()
    if sizes is None:
        k = int(rng.integers(communities[0], communities[1] + 1))
        sizes = rng.integers(community_size[0], community_size[1] + 1, size=k).tolist()
    for _ in range(max_tries):
        g = gen_sbm_raw(sizes, p_in, p_out, rng)
        if is_connected(g):
            return g
    raise RuntimeError("could not draw a connected SBM graph")


def split_counts(count: int) -> tuple:
    test = int(0.2 * count)
    train = int(0.8 * (count - test))
    return train, count - test - train, test


def split(dataset: Sequence, seed: int):
    """Shuffled (train, val, test) split: 20% test, then 80/20 train/validation of the rest.

    Both shares are floored and validation takes the remainder: 200 -> 128/32/40, 10 -> 6/2/2.
    """
    n_train, n_val, _ = split_counts(len(dataset))
    perm = np.random.default_rng(seed).permutation(len(dataset))
    items = [dataset[i] for i in perm]
    return items[:n_train], items[n_train : n_train + n_val], items[n_train + n_val :]


def split_indices(count: int, seed: int):
    n_train, n_val, _ = split_counts(count)
    perm = np.random.default_rng(seed).permutation(count)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    count: int
    n_min: int = 64
    n_max: int = 64
    p_in: float = 0.3
    p_out: float = 0.05
    communities: tuple = (2, 5)
    community_size: tuple = (20, 40)

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("dataset count must be positive")
        if self.kind not in ("planar", "tree", "sbm"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")


def generate(spec: DatasetSpec, rng: np.random.Generator) -> list:
    out = []
    for _ in range(spec.count):
        if spec.kind == "sbm":
            out.append(gen_sbm(None, spec.p_in, spec.p_out, rng, spec.communities, spec.community_size))
            continue
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        out.append(gen_planar(n, rng) if spec.kind == "planar" else gen_tree(n, rng))
    return out


# named recipes for the size-generalization experiments
PRESETS = {
    "planar": DatasetSpec("planar", 200, 64, 64),
    "tree": DatasetSpec("tree", 200, 64, 64),
    "sbm": DatasetSpec("sbm", 200),
}
EXTRAPOLATION_TRAIN = [(32, 64)]
INTERPOLATION_TRAIN = [(32, 64), (128, 160)]
GENERALIZATION_EVAL_SIZES = list(range(48, 145, 16))
GENERALIZATION_TRAIN_COUNT = 128
GENERALIZATION_VAL_PER_SIZE = 32
GENERALIZATION_TEST_PER_SIZE = 40


def generalization_train_sizes(ranges, count: int, rng: np.random.Generator) -> list:
    """Sizes drawn uniformly over the union of the given inclusive ranges."""
    pool = np.concatenate([np.arange(a, b + 1) for a, b in ranges])
    return rng.choice(pool, size=count).tolist()


def write_dataset(graphs: Sequence[Graph], out_dir, seed: int, meta: Optional[dict] = None) -> dict:
    """Write one graph file per item plus ``manifest.json`` with the split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, va, te = split_indices(len(graphs), seed)
    member = {}
    for name, idx in (("train", tr), ("val", va), ("test", te)):
        for i in idx:
            member[int(i)] = name
    files = []
    for i, g in enumerate(graphs):
        fname = f"graph_{i:05d}.txt"
        write_graph(g, out / fname)
        files.append({"file": fname, "n": g.n, "m": g.m, "split": member[i]})
    manifest = {"seed": seed, "count": len(graphs), "graphs": files, **(meta or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_dataset(data_dir) -> dict:
    """Graphs of a written dataset grouped by split name."""
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    out = {"train": [], "val": [], "test": []}
    for ent in manifest["graphs"]:
        out[ent["split"]].append(load_graph(d / ent["file"]))
    return out


def read_graph_dir(path) -> list:
    """All graph files in a directory, sorted by name (manifest-less sets)."""
    p = Path(path)
    if (p / "manifest.json").exists():
        data = read_dataset(p)
        return data["train"] + data["val"] + data["test"]
    files = sorted(f for f in p.iterdir() if f.suffix in (".txt", ".json") and f.name != "manifest.json")
    return [load_graph(f) for f in files]

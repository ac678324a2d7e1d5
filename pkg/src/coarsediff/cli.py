"""Command-line entry point: ``coarsediff <command> [options]``.

Every option that corresponds to a config key overrides it; ``--set a.b=v``
reaches the rest. The merged config is written next to every output.
Errors are reported as one JSON object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import (
    ConfigError, RunConfig, apply_overrides, config_hash, from_dict, load_config, np_stream,
    save_config, to_dict,
)
from .graph import GraphError, load_graph, write_graph

log = logging.getLogger("coarsediff")

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_SAMPLING = 4


class InputError(Exception):
    pass


# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "kind": "dataset.kind",
    "count": "dataset.count",
    "n_min": "dataset.n_min",
    "n_max": "dataset.n_max",
    "data": "dataset.data_dir",
    "steps": "train.steps",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "ema": "train.ema",
    "time_budget": "train.time_budget_s",
    "eval_every": "train.eval_every",
    "mode": "sample.mode",
    "n_steps": "sample.n_steps",
    "max_iterations": "sample.max_iterations",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kind", choices=["planar", "tree", "sbm"])
    p.add_argument("--count", type=int)
    p.add_argument("--n-min", type=int)
    p.add_argument("--n-max", type=int)


def _merged_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(args.config) if args.config else (base or RunConfig())
    items = list(args.set)
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            items.append(f"{key}={json.dumps(val)}")
    return apply_overrides(cfg, items)


def _write_effective(cfg: RunConfig, out_dir: Path) -> None:
    save_config(cfg, out_dir / "config.yaml")


# ------------------------------------------------------------------ data helpers
def _load_splits(cfg: RunConfig) -> dict:
    from .datagen import DatasetSpec, generate, read_dataset, split

    if cfg.dataset.data_dir:
        d = Path(cfg.dataset.data_dir)
        if not (d / "manifest.json").exists():
            raise InputError(f"dataset directory {d} has no manifest.json")
        return read_dataset(d)
    ds = cfg.dataset
    spec = DatasetSpec(ds.kind, ds.count, ds.n_min, ds.n_max, ds.p_in, ds.p_out, tuple(ds.communities), tuple(ds.community_size))
    graphs = generate(spec, np_stream(cfg.seed, "dataset"))
    tr, va, te = split(graphs, cfg.seed)
    return {"train": tr, "val": va, "test": te}


def _read_graphs(path) -> list:
    from .datagen import read_graph_dir

    p = Path(path)
    if not p.exists():
        raise InputError(f"{p} does not exist")
    return read_graph_dir(p) if p.is_dir() else [load_graph(p)]


def _load_model(cfg: RunConfig, checkpoint: Path):
    from .nn import ParamStore, load_checkpoint
    from .pipeline import build_model

    if not checkpoint.exists():
        raise InputError(f"checkpoint {checkpoint} not found")
    model = build_model(cfg.model, 0)
    store = ParamStore(model)
    try:
        load_checkpoint(store, checkpoint)
    except ValueError as exc:
        raise InputError(f"checkpoint does not match the configured model: {exc}") from exc
    if cfg.sample.use_ema:
        store.load_shadow_into(model)
    return model.eval()


def _checkpoint_config(checkpoint: Path) -> RunConfig | None:
    from .nn import read_manifest

    if not checkpoint.exists():
        return None
    meta = read_manifest(checkpoint).get("meta", {})
    return from_dict(RunConfig, meta["config"]) if "config" in meta else None


def _write_graph_set(graphs, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, g in enumerate(graphs):
        write_graph(g, out_dir / f"graph_{i:05d}.txt")


# ---------------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    from .datagen import DatasetSpec, generate, write_dataset

    cfg = _merged_config(args)
    ds = cfg.dataset
    spec = DatasetSpec(ds.kind, ds.count, ds.n_min, ds.n_max, ds.p_in, ds.p_out, tuple(ds.communities), tuple(ds.community_size))
    graphs = generate(spec, np_stream(cfg.seed, "dataset"))
    out = Path(args.out)
    man = write_dataset(graphs, out, cfg.seed, {"kind": ds.kind})
    _write_effective(cfg, out)
    counts = {s: sum(1 for g in man["graphs"] if g["split"] == s) for s in ("train", "val", "test")}
    print(f"wrote {len(graphs)} {ds.kind} graphs to {out} ({counts['train']}/{counts['val']}/{counts['test']})")
    return 0


def cmd_train(args) -> int:
    from .evaluation import VALIDITY, vun
    from .nn import save_checkpoint
    from .pipeline import build_model, init_state, sample_deterministic, train

    cfg = _merged_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_effective(cfg, out)
    data = _load_splits(cfg)
    kind = cfg.dataset.kind

    def validate(state) -> float:
        m = build_model(cfg.model, 0)
        state.store.load_shadow_into(m)
        sizes = [g.n for g in data["val"]][: cfg.train.val_samples]
        gen = sample_deterministic(m.eval(), sizes, cfg, seed=cfg.seed)
        score = vun(gen, data["train"], VALIDITY[kind])["vun"]
        log.info("step %d validation V.U.N. %.1f", state.step, score)
        return score

    def progress(state, loss):
        log.info("step %d loss %.4f", state.step, loss)
        curve.append((state.step, loss))

    curve = []
    state = init_state(cfg)
    t0 = time.monotonic()
    train(data["train"], cfg, state, validate if data["val"] and cfg.train.eval_every else None, progress)
    seconds = time.monotonic() - t0
    if state.best_shadow is not None:
        state.store.shadow = state.best_shadow
    meta = {"config": to_dict(cfg), "config_hash": config_hash(cfg), "step": state.step, "best_step": state.best_step}
    save_checkpoint(state.store, out / "checkpoint.json", meta)
    (out / "train_log.json").write_text(json.dumps(
        {"steps": state.step, "seconds": seconds, "loss_curve": curve, "validation": state.history,
         "sequences_drawn": state.cache.n_sequences if state.cache else 0}, indent=1))
    print(f"trained {state.step} steps in {seconds:.1f}s; checkpoint {out / 'checkpoint.json'}")
    return 0


def cmd_sample(args) -> int:
    from .pipeline import sample_deterministic, sample_stochastic

    ckpt = Path(args.checkpoint)
    cfg = _merged_config(args, base=_checkpoint_config(ckpt))
    model = _load_model(cfg, ckpt)
    if args.sizes_from:
        ref = _read_graphs(args.sizes_from)
        if not ref:
            raise InputError(f"no graphs in {args.sizes_from}")
        sizes = [ref[i % len(ref)].n for i in range(args.n_samples or len(ref))]
    elif args.target_n is not None:
        sizes = [args.target_n] * (args.n_samples or 1)
    else:
        raise InputError("give --target-n or --sizes-from")
    sampler = sample_deterministic if cfg.sample.mode == "deterministic" else sample_stochastic
    graphs = sampler(model, sizes, cfg, seed=cfg.seed)
    out = Path(args.out)
    _write_graph_set(graphs, out)
    _write_effective(cfg, out)
    print(f"wrote {len(graphs)} graphs to {out}")
    return 0


def cmd_eval(args) -> int:
    from .datagen import read_dataset
    from .evaluation import evaluate

    generated = _read_graphs(args.generated)
    train_set = None
    if args.reference:
        ref = read_dataset(args.reference)
        test_set, train_set = ref["test"], ref["train"]
    elif args.test:
        test_set = _read_graphs(args.test)
        train_set = _read_graphs(args.train) if args.train else None
    else:
        raise InputError("give --reference DATASET or --test DIR")
    if not generated or not test_set:
        raise InputError("generated and test sets must be nonempty")
    rep = evaluate(generated, test_set, train_set, args.kind, args.sigma)
    print(rep.to_text())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rep.to_json())
    return 0


def cmd_coarsen_demo(args) -> int:
    from .coarsen import rnd_red_seq, spectral_error_bound

    cfg = _merged_config(args)
    g = load_graph(args.graph)
    c = cfg.coarsen
    seq = rnd_red_seq(g, np_stream(cfg.seed, "coarsening"), family=c.family, cost=c.cost, k=c.k,
                      rho_range=cfg.rho_range, lam=c.lam, small_graph=c.small_graph)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for lvl, h in enumerate(seq.levels):
        write_graph(h, out / f"level_{lvl:02d}.txt")
        eps = spectral_error_bound(seq, upto=lvl)
        rows.append({"level": lvl, "n": h.n, "m": h.m, "epsilon": eps})
        print(f"level {lvl:>2}  n={h.n:<5} m={h.m:<6} eps={eps:.4g}")
    (out / "levels.json").write_text(json.dumps(rows, indent=1))
    _write_effective(cfg, out)
    return 0


def cmd_bench(args) -> int:
    import torch

    from .bench import DensePPGN, dense_generator, overfit_generator, scaling_benchmark
    from .datagen import gen_planar
    from .pipeline import build_model

    ckpt = Path(args.checkpoint) if args.checkpoint else None
    cfg = _merged_config(args, base=_checkpoint_config(ckpt) if ckpt else None)
    model = _load_model(cfg, ckpt) if ckpt else build_model(cfg.model, cfg.seed)
    rng = np_stream(cfg.seed, "bench")
    sizes = [int(s) for s in args.sizes.split(",")]
    n_steps = cfg.sample.n_steps
    graphs = {n: gen_planar(n, rng) for n in sizes}
    res = scaling_benchmark(overfit_generator(model, graphs, cfg, n_steps, cfg.seed), sizes, args.repeats)
    report = {"pipeline": res.to_dict(), "n_steps": n_steps}
    print("iterative pipeline (overfit replay)")
    print(res.to_text())
    if args.dense_sizes:
        dsizes = [int(s) for s in args.dense_sizes.split(",")]
        torch.manual_seed(cfg.seed)
        dense = DensePPGN(cfg.model.d_hidden, cfg.model.d_ppgn, cfg.model.layers)
        dres = scaling_benchmark(dense_generator(dense, cfg.diffusion, n_steps, cfg.seed), dsizes, args.repeats)
        report["dense"] = dres.to_dict()
        print("dense one-shot PPGN")
        print(dres.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(report, indent=1))
        _write_effective(cfg, out)
    return 0


# ------------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coarsediff", description="Graph generation by reversing spectral coarsening.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_config_args(g)
    _add_dataset_args(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a denoiser")
    _add_config_args(t)
    _add_dataset_args(t)
    t.add_argument("--data", help="dataset directory written by gen-data")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--ema", type=float)
    t.add_argument("--time-budget", type=float, help="seconds")
    t.add_argument("--eval-every", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate graphs from a checkpoint")
    _add_config_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--target-n", type=int)
    s.add_argument("--sizes-from", help="match the node counts of a graph directory")
    s.add_argument("--count", type=int, dest="n_samples", help="number of graphs")
    s.add_argument("--mode", choices=["deterministic", "stochastic"])
    s.add_argument("--n-steps", type=int)
    s.add_argument("--max-iterations", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generated graphs")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", help="dataset directory (uses its test and train splits)")
    e.add_argument("--test")
    e.add_argument("--train")
    e.add_argument("--kind", choices=["planar", "tree", "sbm"])
    e.add_argument("--sigma", type=float, default=1.0)
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("coarsen-demo", help="write the coarsening sequence of one graph")
    _add_config_args(c)
    c.add_argument("--graph", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_coarsen_demo)

    b = sub.add_parser("bench", help="generation time versus graph size")
    _add_config_args(b)
    b.add_argument("--checkpoint")
    b.add_argument("--sizes", default="64,128,256,512,1024")
    b.add_argument("--dense-sizes", default="")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--n-steps", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    from .nn import set_threads_from_env
    from .pipeline import SamplingError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        try:
            set_threads_from_env()
        except ValueError as exc:
            raise ConfigError(f"COARSEDIFF_THREADS must be a positive integer: {exc}") from exc
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (InputError, GraphError, FileNotFoundError, json.JSONDecodeError) as exc:
        return _fail(EXIT_INPUT, exc)
    except SamplingError as exc:
        return _fail(EXIT_SAMPLING, exc)


if __name__ == "__main__":
    sys.exit(main())

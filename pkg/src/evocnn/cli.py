"""Command-line entry point: ``evocnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import topology as topo
from .analysis import format_table, graph_stats, population_stats
from .constructor import (
    FAMILY,
    SKIP_MODES,
    BlockSpec,
    StackPlan,
    check_family,
    default_block,
    evo_family,
    ordering_verdicts,
    stack,
)
from .data import DatasetError, make_synthetic, read_dataset, write_dataset
from .engine import ConfigError, RunConfig, load_run, run_evolution, write_run
from .gradcheck import check_random_graphs
from .knowledge import DEFAULT_SPACE, init_weights
from .micronn import BudgetExceeded, TrainBudget, train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_BUDGET = 4


class UsageError(Exception):
    pass


def _echo_config(doc: dict) -> None:
    print("# config " + json.dumps(doc, sort_keys=True), file=sys.stderr)


def _write_or_print(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# -- evolve ----------------------------------------------------------------------

def cmd_evolve(args) -> int:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
    overrides = {
        "backend": args.backend,
        "selection": args.selection,
        "lam": args.lam,
        "capacity": args.capacity,
        "max_concurrent": args.workers,
        "max_evals": args.max_evals,
        "seed": args.seed,
        "dataset_path": args.dataset,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    config = RunConfig.from_dict(doc)
    _echo_config(config.to_dict())
    result = run_evolution(config)
    paths = write_run(result, args.out)
    best = result.best
    print(f"stop: {result.stop_reason}; evaluations: {len(result.entries)}; "
          f"admitted: {len(result.store.members)}")
    print(f"seed score {result.seed_score:.4f}; best score {best.fitness.score:.4f} "
          f"(id {best.id}, generation {best.generation})")
    print(f"log: {paths['log']}")
    return EXIT_OK


# -- analyze ---------------------------------------------------------------------

def _load_column(path: str, selector: str, k: int | None):
    p = Path(path)
    if p.is_dir() or p.suffix == ".jsonl":
        return population_stats(load_run(p), selector, k)
    g = topo.from_json(p.read_text())
    return graph_stats(g)


def cmd_analyze(args) -> int:
    if not args.paths:
        raise UsageError("analyze needs at least one topology file or run directory")
    selector, k = "all", None
    if args.select:
        selector, _, kk = args.select.partition(":")
        k = int(kk) if kk else None
    columns = {}
    for path in args.paths:
        label = Path(path).name
        while label in columns:
            label += "'"
        columns[label] = _load_column(path, selector, k)
    _write_or_print(format_table(columns, csv=args.csv), args.out)
    return EXIT_OK


# -- construct -------------------------------------------------------------------

def cmd_construct(args) -> int:
    block = BlockSpec.load(args.block) if args.block else None
    if args.check:
        rows = check_family(block)
        print(f"{'network':10}{'depth':>8}{'paper':>8}{'shortest':>10}{'paper':>8}   (edges; +1 = nodes)")
        for r in rows:
            pd = "-" if r["paper_depth"] is None else r["paper_depth"]
            print(f"{r['name']:10}{r['longest_edges']:>8}{pd:>8}{r['shortest_edges']:>10}{r['paper_shortest']:>8}")
        verdicts = ordering_verdicts(rows)
        for claim, ok in verdicts.items():
            print(f"{'PASS' if ok else 'FAIL'}  {claim}")
        if not args.family and not args.count:
            return EXIT_OK if all(verdicts.values()) else EXIT_FAILURE
    shape = tuple(int(v) for v in args.input.split(","))
    if args.family:
        if args.family not in FAMILY:
            raise UsageError(f"unknown family {args.family!r}; valid: {', '.join(FAMILY)}")
        g = evo_family(args.family, block, shape, args.classes)
    else:
        if not args.count:
            raise UsageError("give --family or --count")
        pools = frozenset(int(p) for p in args.pool.split(",") if p) if args.pool else frozenset()
        plan = StackPlan(block or default_block(), args.count, args.skip, pools)
        g = stack(plan, shape, args.classes)
    _write_or_print(topo.to_json(g, indent=2) + "\n", args.out)
    if args.dot:
        Path(args.dot).write_text(topo.to_dot(g))
    return EXIT_OK


# -- train / gradcheck / gendata -------------------------------------------------

def cmd_train(args) -> int:
    g = topo.from_json(Path(args.topology).read_text())
    ds = read_dataset(args.dataset)
    if tuple(ds.input_shape) != tuple(g.input_shape) or ds.num_classes != g.num_classes:
        raise UsageError("dataset shape/classes do not match the topology")
    choice = {
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "optimizer": args.optimizer,
        "dropout": args.dropout,
    }
    budget = TrainBudget(max_steps=args.max_steps, max_params=args.max_params, epochs=args.epochs)
    _echo_config({"choice": choice, "budget": budget.__dict__, "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    w = init_weights(g, rng, np.float64 if args.double else np.float32)
    try:
        _, stats = train(g, w, ds.astype(w.kernels[g.edges[0].id].dtype), choice, budget, rng)
    except BudgetExceeded as exc:
        print(f"discarded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    print(json.dumps(stats.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = check_random_graphs(args.graphs, seed=args.seed)
    worst = max(r.max_rel_error for r in results)
    for i, r in enumerate(results):
        print(f"graph {i:3d}: params {r.n_params:6d}  max rel {r.max_rel_error:.3e}  max abs {r.max_abs_error:.3e}")
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {args.tol:g})")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_gendata(args) -> int:
    ds = make_synthetic(args.classes, args.size, args.n, channels=args.channels,
                        noise=args.noise, seed=args.seed)
    write_dataset(ds, args.out)
    print(f"wrote {args.n} examples ({ds.train_x.shape[0]} train / {ds.val_x.shape[0]} val) to {args.out}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")

    p = argparse.ArgumentParser(prog="evocnn", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evolve", parents=[common], help="run an evolution")
    ev.add_argument("--config", help="JSON run configuration; flags override it")
    ev.add_argument("--backend", choices=("micro", "surrogate"), help="fitness backend")
    ev.add_argument("--selection", choices=("boltzmann", "random"), help="parent selection rule")
    ev.add_argument("--lambda", dest="lam", type=float, help="selection shape parameter")
    ev.add_argument("--capacity", type=int, help="population size")
    ev.add_argument("--workers", type=int, help="concurrently evaluated individuals")
    ev.add_argument("--max-evals", type=int, help="hard cap on evaluations")
    ev.add_argument("--dataset", help="dataset file (micro backend); synthetic if omitted")
    ev.add_argument("--out", required=True, help="output directory")
    ev.set_defaults(func=cmd_evolve)

    an = sub.add_parser("analyze", parents=[common], help="graph statistics table")
    an.add_argument("paths", nargs="*", help="topology JSON files or run directories")
    an.add_argument("--select", help="best:K or last:K for run directories")
    an.add_argument("--csv", action="store_true", help="emit CSV instead of text")
    an.add_argument("--out", help="write the table here instead of stdout")
    an.set_defaults(func=cmd_analyze)

    co = sub.add_parser("construct", parents=[common], help="build a stacked-block network")
    co.add_argument("--family", help=f"one of {', '.join(FAMILY)}")
    co.add_argument("--block", help="block spec JSON (default block if omitted)")
    co.add_argument("--count", type=int, help="number of stacked blocks")
    co.add_argument("--skip", choices=SKIP_MODES, default="none", help="cross-block skip edges")
    co.add_argument("--pool", help="comma-separated 1-based block numbers whose output is pooled")
    co.add_argument("--input", default="32,32,3", help="H,W,C of the input")
    co.add_argument("--classes", type=int, default=10, help="number of output classes")
    co.add_argument("--check", action="store_true", help="compare measured distances with published ones")
    co.add_argument("--out", help="topology JSON path (stdout if omitted)")
    co.add_argument("--dot", help="also write Graphviz DOT here")
    co.set_defaults(func=cmd_construct)

    tr = sub.add_parser("train", parents=[common], help="train one topology on a dataset file")
    tr.add_argument("topology", help="topology JSON file")
    tr.add_argument("dataset", help="dataset file written by gendata")
    tr.add_argument("--epochs", type=int, default=1, help="passes over the training split")
    tr.add_argument("--max-steps", type=int, default=1_000_000, help="cap on minibatch updates")
    tr.add_argument("--max-params", type=int, default=10_000_000,
                    help="refuse topologies with more parameters (exit 4)")
    tr.add_argument("--lr", type=float, default=DEFAULT_SPACE["learning_rate"][1], help="learning rate")
    tr.add_argument("--batch-size", type=int, default=64, help="minibatch size")
    tr.add_argument("--optimizer", choices=DEFAULT_SPACE["optimizer"], default="adam", help="update rule")
    tr.add_argument("--dropout", type=float, default=0.0, help="dropout rate on the classifier inputs")
    tr.add_argument("--double", action="store_true", help="float64 arithmetic")
    tr.set_defaults(func=cmd_train)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--graphs", type=int, default=20, help="number of random graphs")
    gc.add_argument("--tol", type=float, default=1e-4, help="maximum allowed relative error")
    gc.set_defaults(func=cmd_gradcheck)

    gd = sub.add_parser("gendata", parents=[common], help="write a synthetic dataset file")
    gd.add_argument("--classes", type=int, default=4, help="number of pattern classes (2-8)")
    gd.add_argument("--size", type=int, default=16, help="image side, a power of two")
    gd.add_argument("--n", type=int, default=2000, help="number of examples")
    gd.add_argument("--channels", type=int, default=1, help="image channels")
    gd.add_argument("--noise", type=float, default=0.35, help="Gaussian noise level")
    gd.add_argument("--out", required=True, help="output file")
    gd.set_defaults(func=cmd_gendata)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command != "evolve":
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"evocnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"evocnn {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (topo.TopologyError, DatasetError, FileNotFoundError) as exc:
        print(f"evocnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

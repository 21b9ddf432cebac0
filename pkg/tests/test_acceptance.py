"""Acceptance criteria 1-10.

Each test records one pass/fail line (shown in the pytest summary and printed
as it finishes) and then asserts the same condition.  The toy evolution runs
are shared between criteria 6 and 7 and take roughly half an hour on one core.
"""

import json
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE, evolve_random
from evocnn import mutation as mut
from evocnn import topology as topo
from evocnn.analysis import algebraic_connectivity, longest_distance, population_stats, shortest_distance
from evocnn.cli import main as cli_main
from evocnn.constructor import DENSE, FAMILY, StackPlan, default_block, evo_family, stack
from evocnn.engine import RunConfig, restore, run_evolution, snapshot, snapshot_dict
from evocnn.gradcheck import check_random_graphs
from evocnn.knowledge import PRESERVING, inherit_weights, init_posterior, init_weights, update_posterior
from evocnn.micronn import forward
from evocnn.selection import SelectionPolicy, rank_pmf, sample_parent, Fitness

DATA = Path(__file__).parent / "data"
TOY_SEEDS = (0, 1, 2, 3, 4)


def record(number, ok, detail, capsys=None):
    ACCEPTANCE[number] = (bool(ok), detail)
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)


def toy_config(seed, selection):
    """16x16 4-class synthetic data, capacity 100, 1,000 one-epoch evaluations."""
    return RunConfig(
        backend="micro", selection=selection, capacity=100, max_evals=1000, lam=0.05,
        max_concurrent=1, seed=seed, data_size=16, data_classes=4, data_n=384,
        max_params=10_000, stagnation_window=1000,
    )


@pytest.fixture(scope="session")
def toy_runs():
    runs = {}
    for selection in ("boltzmann", "random"):
        for seed in TOY_SEEDS:
            t0 = time.perf_counter()
            res = run_evolution(toy_config(seed, selection))
            runs[selection, seed] = (res, time.perf_counter() - t0)
    return runs


# 1 ---------------------------------------------------------------------------

def test_c01_mutation_closure(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    calls = valid = lost_terminals = 0
    while calls < 10_000:
        parent = evolve_random(rng, int(rng.integers(0, 60)))
        for _ in range(100):
            try:
                child, _ = mut.reproduce(parent, rng)
            except mut.ReproductionError:
                calls += 1
                continue
            calls += 1
            valid += topo.validate(child).valid
            lost_terminals += not (child.has_node(parent.source.id) and child.has_node(parent.sink.id))
    elapsed = time.perf_counter() - t0
    ok = valid == calls and lost_terminals == 0 and elapsed < 60
    record(1, ok, f"{valid}/{calls} valid offspring, {lost_terminals} source/sink deletions, "
                  f"{elapsed:.1f}s", capsys)
    assert ok


# 2 ---------------------------------------------------------------------------

def test_c02_selection_pmf(capsys):
    pop = [type("M", (), {"fitness": Fitness(s, s), "eval_seq": i, "name": n})()
           for i, (n, s) in enumerate([("b", 0.5), ("a", 0.9), ("c", 0.1)])]
    rng = np.random.default_rng(2)
    policy = SelectionPolicy(1.0)
    draws = [sample_parent(pop, policy, rng).name for _ in range(100_000)]
    counts = [draws.count(n) for n in "abc"]
    expected = rank_pmf(1.0, 3)
    _, p = stats.chisquare(counts, expected * len(draws))
    worst_sum = max(abs(rank_pmf(lam, n).sum() - 1.0)
                    for lam in (1e-4, 0.01, 0.1, 1.0, 10.0) for n in range(1, 1001))
    ok = (p > 0.01 and worst_sum <= 1e-12
          and np.allclose(expected, [0.6652, 0.2447, 0.0900], atol=1e-4))
    record(2, ok, f"pmf {np.round(expected, 4).tolist()}, chi2 p={p:.3f}, "
                  f"max |sum-1|={worst_sum:.1e} for N<=1000", capsys)
    assert ok


# 3 ---------------------------------------------------------------------------

def test_c03_inheritance_identity(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    cases = 0
    for _ in range(50):
        g = evolve_random(rng, int(rng.integers(0, 30)), shape=(8, 8, 2), channels=2, max_nodes=12)
        w = init_weights(g, rng, np.float64)
        for b in w.biases.values():
            b[...] = rng.normal(0.0, 0.1, b.shape)
        x = rng.random((8, 8, 8, 2))
        base = forward(g, w, x)
        for kind in (mut.ADD_EDGE, mut.ADD_NODE, mut.DOUBLE_CHANNELS):
            for _ in range(25):
                try:
                    child, rec = mut.apply_mutation(kind, g, rng)
                    break
                except mut.MutationRejected:
                    continue
            else:
                continue  # e.g. AddEdge on a chain with no legal pair
            cw = inherit_weights(w, g, child, rec, rng, PRESERVING)
            worst = max(worst, float(np.max(np.abs(forward(child, cw, x) - base))))
            cases += 1
    ok = worst <= 1e-6 and cases >= 120
    record(3, ok, f"{cases} parent/mutation cases, max |logit diff| = {worst:.2e}", capsys)
    assert ok


# 4 ---------------------------------------------------------------------------

def test_c04_gradient_check(capsys):
    t0 = time.perf_counter()
    results = check_random_graphs(20, seed=4)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    ok = worst <= 1e-4 and elapsed < 300
    record(4, ok, f"20 graphs, {sum(r.n_params for r in results)} params, "
                  f"max rel error {worst:.2e}, {elapsed:.0f}s", capsys)
    assert ok


# 5 ---------------------------------------------------------------------------

def test_c05_posterior(capsys):
    prior = init_posterior()
    uniform = all(np.array_equal(p, np.full(len(p), 1.0 / len(p))) for p in prior.probs.values())
    post = update_posterior(prior, [{"optimizer": "adam"} for _ in range(10)])
    vals = list(post.values["optimizer"])
    p = post.probs["optimizer"]
    err = max(abs(p[vals.index("adam")] - 11 / 13),
              *(abs(p[i] - 1 / 13) for i, v in enumerate(vals) if v != "adam"))
    ok = uniform and err <= 1e-12
    record(5, ok, f"uniform prior exact: {uniform}; adam mass {p[vals.index('adam')]:.12f} "
                  f"(11/13), max err {err:.1e}", capsys)
    assert ok


# 6 ---------------------------------------------------------------------------

def test_c06_toy_evolution_improves(toy_runs, capsys):
    gains, seeds, bests, elapsed = [], [], [], 0.0
    for seed in TOY_SEEDS:
        res, dt = toy_runs["boltzmann", seed]
        elapsed += dt
        seeds.append(res.seed_score)
        bests.append(res.best.fitness.score)
        gains.append(res.best.fitness.score - res.seed_score)
    median_gain = statistics.median(gains)
    ok = median_gain >= 0.15 and elapsed <= 1800
    record(6, ok, f"seed scores {np.round(seeds, 3).tolist()}, best {np.round(bests, 3).tolist()}, "
                  f"median gain {median_gain:.3f}, 5 runs in {elapsed / 60:.1f} min", capsys)
    assert ok


# 7 ---------------------------------------------------------------------------

def test_c07_table_direction(toy_runs, capsys):
    wins = 0
    rows = []
    for seed in TOY_SEEDS:
        fit = population_stats(toy_runs["boltzmann", seed][0].entries, "best", 100)
        rnd = population_stats(toy_runs["random", seed][0].entries, "last", 100)
        win = (fit.nodes > rnd.nodes and fit.edges > rnd.edges and fit.generations > rnd.generations)
        wins += win
        rows.append(f"s{seed}:{fit.nodes:.1f}/{rnd.nodes:.1f},{fit.edges:.1f}/{rnd.edges:.1f},"
                    f"{fit.generations:.1f}/{rnd.generations:.1f}{'+' if win else '-'}")
    ok = wins >= 4
    record(7, ok, f"{wins}/5 pairs with more nodes, edges and generations "
                  f"(nodes,edges,gens fitness/random: {' '.join(rows)})", capsys)
    assert ok


# 8 ---------------------------------------------------------------------------

def _enumerate_paths(g):
    lengths = []
    stack_ = [(g.source.id, 0)]
    while stack_:
        nid, d = stack_.pop()
        if nid == g.sink.id:
            lengths.append(d)
            continue
        stack_.extend((e.dst, d + 1) for e in g.out_edges(nid))
    return lengths


def test_c08_analysis_oracles(capsys):
    p3 = topo.new_minimal((8, 8, 1), 2)
    k3 = p3.with_nodes_edges(p3.nodes, p3.edges + (topo.Edge("e" * 32, p3.source.id, p3.sink.id, 0, 1),))
    c_p3, c_k3 = algebraic_connectivity(p3), algebraic_connectivity(k3)
    graphs = [topo.from_json(line) for line in (DATA / "small_graphs.jsonl").read_text().splitlines()]
    mismatches = 0
    for g in graphs:
        lengths = _enumerate_paths(g)
        mismatches += (longest_distance(g), shortest_distance(g)) != (max(lengths), min(lengths))
    ok = abs(c_p3 - 1.0) <= 1e-9 and abs(c_k3 - 3.0) <= 1e-9 and mismatches == 0 and graphs
    record(8, ok, f"P3 {c_p3:.12f}, K3 {c_k3:.12f}; distances match enumeration on "
                  f"{len(graphs) - mismatches}/{len(graphs)} stored graphs", capsys)
    assert ok


# 9 ---------------------------------------------------------------------------

def test_c09_constructor(capsys):
    graphs = {name: evo_family(name) for name in FAMILY}
    all_valid = all(topo.validate(g).valid for g in graphs.values())
    short = {name: shortest_distance(g) for name, g in graphs.items()}
    ordered = all(short[f] > short[f + "a"] > short[f + "b"] for f in ("EVO-44", "EVO-91"))
    dense = {c: shortest_distance(stack(StackPlan(default_block(8), c, DENSE), (8, 8, 1), 2))
             for c in range(2, 16)}
    constant = len(set(dense.values())) == 1
    with capsys.disabled():
        code = cli_main(["construct", "--check"])
    ok = all_valid and ordered and constant and code == 0
    record(9, ok, f"valid: {all_valid}; shortest {short}; dense shortest for 2-15 blocks "
                  f"{sorted(set(dense.values()))}; construct --check exit {code}", capsys)
    assert ok


# 10 --------------------------------------------------------------------------

def test_c10_determinism_and_persistence(tmp_path, capsys):
    logs = []
    for name in ("a", "b"):
        code = cli_main(["evolve", "--backend", "micro", "--max-evals", "40", "--capacity", "10",
                         "--workers", "1", "--seed", "10", "--out", str(tmp_path / name)])
        assert code == 0
        logs.append((tmp_path / name / "population.jsonl").read_bytes())
    same_log = logs[0] == logs[1]

    res = run_evolution(RunConfig(backend="micro", capacity=10, max_evals=30, max_concurrent=1,
                                  seed=11, data_n=128, data_size=8))
    snapshot(res.store, tmp_path / "snap.json")
    back = restore(tmp_path / "snap.json")
    same_state = snapshot_dict(back) == snapshot_dict(res.store)
    same_weights = all(
        (w is None and back.weights[k] is None) or w.equals(back.weights[k])
        for k, w in res.store.weights.items()
    )
    ok = same_log and same_state and same_weights
    record(10, ok, f"evolve logs byte-identical: {same_log} ({len(logs[0])} bytes); "
                   f"snapshot round trip exact: {same_state and same_weights}", capsys)
    assert ok

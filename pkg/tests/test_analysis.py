from dataclasses import dataclass

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from conftest import evolve_random
from evocnn.analysis import (
    GraphStats,
    algebraic_connectivity,
    density,
    format_table,
    graph_stats,
    jacobi_eigenvalues,
    laplacian,
    longest_distance,
    mean_channels,
    population_stats,
    select_individuals,
    shortest_distance,
)
from evocnn.selection import Fitness
from evocnn.topology import Edge, assemble, new_minimal


def all_paths(g):
    """Edge counts of every source->sink path, by exhaustive depth-first enumeration."""
    out = []

    def walk(nid, length):
        if nid == g.sink.id:
            out.append(length)
            return
        for e in g.out_edges(nid):
            walk(e.dst, length + 1)

    walk(g.source.id, 0)
    return out


def sympy_fiedler(g):
    lap = sympy.Matrix(laplacian(g).astype(int).tolist())
    lam = sympy.symbols("lam")
    roots = sympy.real_roots(sympy.Poly(lap.charpoly(lam).as_expr(), lam))
    return float(sorted(roots, key=lambda r: float(r.evalf(30)))[1].evalf(30))


def path3():
    return new_minimal((8, 8, 1), 2)


def triangle():
    """Complete DAG on three nodes; source->sink is not a legal genome edge, so it is added by hand."""
    g = path3()
    extra = Edge("e" * 32, g.source.id, g.sink.id, 0, 1)
    return g.with_nodes_edges(g.nodes, g.edges + (extra,))


class TestDensity:
    def test_minimal(self):
        assert density(path3()) == pytest.approx(1 / 3)

    def test_complete_three_node_dag(self):
        assert density(triangle()) == pytest.approx(0.5)

    def test_adding_edge_increases(self):
        g, ids = assemble((8, 8, 1), 2, [("a", 2, False), ("b", 2, False)],
                          [("source", "a", 3), ("a", "b", 3), ("b", "sink", 0)])
        h, _ = assemble((8, 8, 1), 2, [("a", 2, False), ("b", 2, False)],
                        [("source", "a", 3), ("a", "b", 3), ("b", "sink", 0), ("a", "sink", 0)])
        assert density(h) > density(g)


class TestConnectivity:
    def test_path3(self):
        assert abs(algebraic_connectivity(path3()) - 1.0) <= 1e-9

    def test_k3(self):
        assert abs(algebraic_connectivity(triangle()) - 3.0) <= 1e-9

    def test_disconnected_skeleton(self):
        lap = np.diag([1.0, 1.0, 0.0]) - np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        assert abs(jacobi_eigenvalues(lap)[1]) <= 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 30))
    def test_matches_characteristic_polynomial(self, seed, steps):
        g = evolve_random(np.random.default_rng(seed), steps, max_nodes=9)
        assert algebraic_connectivity(g) == pytest.approx(sympy_fiedler(g), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 25), st.integers(0, 2**32 - 1))
    def test_jacobi_matches_lapack(self, n, seed):
        rng = np.random.default_rng(seed)
        a = np.triu((rng.random((n, n)) < rng.random()).astype(float), 1)
        a = a + a.T
        lap = np.diag(a.sum(1)) - a
        assert np.allclose(jacobi_eigenvalues(lap), np.linalg.eigvalsh(lap), atol=1e-9)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            jacobi_eigenvalues(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestDistances:
    def test_minimal(self):
        g = path3()
        assert (longest_distance(g), shortest_distance(g)) == (2, 2)

    def test_unequal_diamond(self):
        g, _ = assemble(
            (8, 8, 1), 2, [("a", 2, False), ("b", 2, False), ("c", 2, False)],
            [("source", "a", 3), ("a", "b", 3), ("b", "sink", 0), ("source", "c", 3), ("c", "sink", 0)],
        )
        assert (longest_distance(g), shortest_distance(g)) == (3, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 40))
    def test_against_enumeration(self, seed, steps):
        g = evolve_random(np.random.default_rng(seed), steps, max_nodes=8)
        lengths = all_paths(g)
        assert longest_distance(g) == max(lengths)
        assert shortest_distance(g) == min(lengths)

    def test_skip_never_lengthens_shortest(self):
        base = [("source", "a", 3), ("a", "b", 3), ("b", "c", 3), ("c", "sink", 0)]
        convs = [("a", 2, False), ("b", 2, False), ("c", 2, False)]
        g, _ = assemble((8, 8, 1), 2, convs, base)
        h, _ = assemble((8, 8, 1), 2, convs, base + [("a", "c", 1)])
        assert shortest_distance(h) <= shortest_distance(g)


class TestChannels:
    def test_single(self):
        assert mean_channels(new_minimal((8, 8, 1), 2, channels=16)) == 16

    def test_pair(self):
        g, _ = assemble((8, 8, 3), 2, [("a", 8, False), ("b", 24, False)],
                        [("source", "a", 3), ("a", "b", 3), ("b", "sink", 0)])
        assert mean_channels(g) == 16


@dataclass
class Ind:
    topology: object
    fitness: Fitness | None
    eval_seq: int
    generation: int


class TestPopulation:
    def test_singleton(self):
        g = evolve_random(np.random.default_rng(0), 10)
        stats = population_stats([Ind(g, Fitness(0.5, 0.5), 0, 3)])
        assert stats == graph_stats(g, 3)

    def test_identical_pair(self):
        g = evolve_random(np.random.default_rng(1), 10)
        pop = [Ind(g, Fitness(0.5, 0.5), 0, 2), Ind(g, Fitness(0.4, 0.4), 1, 2)]
        assert population_stats(pop) == graph_stats(g, 2)

    def test_selectors(self):
        g = path3()
        pop = [Ind(g, Fitness(s, s), i, i) for i, s in enumerate([0.2, 0.9, 0.5, 0.9])]
        pop.append(Ind(g, None, 4, 4))
        assert [i.eval_seq for i in select_individuals(pop, "best", 2)] == [1, 3]
        assert [i.eval_seq for i in select_individuals(pop, "last", 2)] == [3, 2]
        assert len(select_individuals(pop, "all")) == 5
        with pytest.raises(ValueError):
            select_individuals(pop, "median")

    def test_empty(self):
        with pytest.raises(ValueError):
            population_stats([])


def test_table_layout():
    s = graph_stats(path3(), 0)
    text = format_table({"fitness": s, "random": s})
    labels = [line.split("  ")[0].strip() for line in text.splitlines()[1:]]
    assert labels == ["nodes", "edges", "density", "connectivity", "channels",
                      "longest dist.", "shortest dist.", "generations"]
    csv = format_table({"a": s}, csv=True).splitlines()
    assert csv[0] == "metric,a"
    assert csv[3] == "density,0.3333"
    assert isinstance(s, GraphStats)

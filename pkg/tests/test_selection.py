import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from evocnn.selection import (
    BOLTZMANN,
    RANDOM,
    Fitness,
    SelectionPolicy,
    admit,
    rank_pmf,
    ranked,
    sample_parent,
)


@dataclass
class Member:
    name: str
    fitness: Fitness
    eval_seq: int


def member(name, score, seq):
    return Member(name, Fitness(score, score), seq)


class TestRankPmf:
    def test_single(self):
        assert rank_pmf(0.3, 1).tolist() == [1.0]

    def test_lambda_one_three(self):
        raw = [math.exp(-k) for k in range(3)]
        oracle = [r / sum(raw) for r in raw]
        p = rank_pmf(1.0, 3)
        assert p == pytest.approx(oracle, abs=1e-15)
        assert p == pytest.approx([0.6652, 0.2447, 0.0900], abs=1e-4)

    def test_large_lambda_nearly_deterministic(self):
        p = rank_pmf(50.0, 3)
        assert p[0] == pytest.approx(1.0, abs=1e-15)
        assert p[1] == pytest.approx(math.exp(-50), rel=1e-9)

    @pytest.mark.parametrize("lam", [1e-6, 0.01, 0.5, 3.0])
    def test_sums_to_one(self, lam):
        for n in (1, 2, 10, 100, 999, 1000):
            assert abs(rank_pmf(lam, n).sum() - 1.0) <= 1e-12

    @given(st.floats(1e-4, 20.0), st.integers(1, 500))
    def test_matches_direct_normalisation(self, lam, n):
        w = np.exp(-lam * np.arange(n))
        assert np.allclose(rank_pmf(lam, n), w / w.sum(), rtol=1e-10, atol=1e-300)

    @given(st.floats(1e-4, 20.0), st.integers(2, 200))
    def test_non_increasing(self, lam, n):
        p = rank_pmf(lam, n)
        assert np.all(np.diff(p) <= 0)

    @pytest.mark.parametrize("lam,n", [(0.0, 3), (-1.0, 3), (1.0, 0)])
    def test_rejects_bad_args(self, lam, n):
        with pytest.raises(ValueError):
            rank_pmf(lam, n)


class TestSampleParent:
    def test_single_member(self):
        pop = [member("only", 0.4, 0)]
        rng = np.random.default_rng(0)
        assert all(sample_parent(pop, SelectionPolicy(1.0), rng) is pop[0] for _ in range(50))

    def test_boltzmann_frequencies(self):
        pop = [member("c", 0.2, 2), member("a", 0.9, 0), member("b", 0.5, 1)]
        rng = np.random.default_rng(123)
        draws = [sample_parent(pop, SelectionPolicy(1.0), rng).name for _ in range(100_000)]
        counts = [draws.count(x) for x in "abc"]
        _, p = stats.chisquare(counts, rank_pmf(1.0, 3) * len(draws))
        assert p > 0.01

    def test_random_mode_uniform(self):
        pop = [member(str(i), i / 10, i) for i in range(5)]
        rng = np.random.default_rng(7)
        policy = SelectionPolicy(50.0, mode=RANDOM)
        draws = [sample_parent(pop, policy, rng).name for _ in range(50_000)]
        counts = [draws.count(str(i)) for i in range(5)]
        _, p = stats.chisquare(counts)
        assert p > 0.01

    def test_empty(self):
        with pytest.raises(ValueError):
            sample_parent([], SelectionPolicy(), np.random.default_rng(0))

    def test_ties_broken_by_eval_order(self):
        pop = [member("late", 0.5, 9), member("early", 0.5, 1)]
        assert [m.name for m in ranked(pop)] == ["early", "late"]

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            SelectionPolicy(1.0, mode="tournament")
        assert SelectionPolicy().mode == BOLTZMANN


class TestAdmit:
    def test_empty_store(self):
        members = []
        assert admit(members, member("x", 0.0, 0), 3)
        assert len(members) == 1

    def test_full_store_rejects_worse(self):
        members = []
        for i, s in enumerate([0.5, 0.7, 0.6]):
            admit(members, member(str(i), s, i), 3)
        before = list(members)
        assert not admit(members, member("low", 0.4, 9), 3)
        assert not admit(members, member("tie", 0.5, 9), 3)
        assert members == before

    def test_full_store_evicts_minimum(self):
        members = []
        for i, s in enumerate([0.5, 0.7, 0.6]):
            admit(members, member(str(i), s, i), 3)
        assert admit(members, member("new", 0.65, 9), 3)
        assert len(members) == 3
        assert min(m.fitness.score for m in members) == 0.6
        assert [m.name for m in members] == ["1", "new", "2"]

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.integers(1, 10))
    def test_keeps_top_scores(self, scores, cap):
        members = []
        for i, s in enumerate(scores):
            admit(members, member(str(i), s, i), cap)
        assert len(members) == min(cap, len(scores))
        assert members == ranked(members)
        best = sorted(scores, reverse=True)[:cap]
        assert sorted((m.fitness.score for m in members), reverse=True) == best


def test_fitness_score_is_mean():
    assert Fitness(1.0, 0.5).score == 0.75
    with pytest.raises(ValueError):
        Fitness(1.2, 0.5)


@pytest.mark.parametrize("lam", [0.01, 0.1, 1.0])
def test_boltzmann_prefers_better_ranks(lam):
    pop = [member(str(i), s, i) for i, s in enumerate([0.1, 0.9, 0.4, 0.4, 0.7, 0.2])]
    order = {m.name: r for r, m in enumerate(ranked(pop))}
    rng = np.random.default_rng(0)
    draws = 100_000
    boltz = np.mean([order[sample_parent(pop, SelectionPolicy(lam), rng).name] for _ in range(draws)])
    uniform = np.mean([order[sample_parent(pop, SelectionPolicy(lam, mode=RANDOM), rng).name]
                       for _ in range(draws)])
    assert boltz < uniform

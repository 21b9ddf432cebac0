"""Rank-proportional parent selection and elite admission."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

BOLTZMANN = "boltzmann"
RANDOM = "random"


@dataclass(frozen=True)
class SelectionPolicy:
    lam: float = 0.01
    capacity: int = 1000
    mode: str = BOLTZMANN

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.capacity < 1:
            raise ValueError("capacity must be at least 1")
        if self.mode not in (BOLTZMANN, RANDOM):
            raise ValueError(f"unknown selection mode {self.mode!r}")


@dataclass(frozen=True)
class Fitness:
    train_acc: float
    val_acc: float

    def __post_init__(self):
        for v in (self.train_acc, self.val_acc):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")

    @property
    def score(self) -> float:
        return (self.train_acc + self.val_acc) / 2


def rank_pmf(lam: float, n: int) -> np.ndarray:
    """Truncated geometric pmf p(k) = (1 - e^-lam) e^(-lam k) / (1 - e^(-lam n)).

    Rank 0 is the best individual.
    """
    if n < 1:
        raise ValueError("population size must be at least 1")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    k = np.arange(n, dtype=float)
    # expm1 keeps the normalizer accurate for small lam
    norm = -math.expm1(-lam) / -math.expm1(-lam * n)
    return norm * np.exp(-lam * k)


def rank_key(ind) -> tuple[float, int]:
    """Descending score, earlier evaluation first on ties."""
    return (-ind.fitness.score, ind.eval_seq)


def ranked(population: Sequence) -> list:
    return sorted(population, key=rank_key)


def sample_index(n: int, policy: SelectionPolicy, rng: np.random.Generator) -> int:
    if n < 1:
        raise ValueError("cannot sample from an empty population")
    if policy.mode == RANDOM:
        return int(rng.integers(n))
    p = rank_pmf(policy.lam, n)
    # searchsorted on the cdf keeps the draw to a single uniform
    u = rng.random()
    return min(int(np.searchsorted(np.cumsum(p), u, side="right")), n - 1)


def sample_parent(population: Sequence, policy: SelectionPolicy, rng: np.random.Generator):
    """Draw a parent; ``population`` need not be sorted."""
    if not population:
        raise ValueError("cannot sample from an empty population")
    order = ranked(population)
    return order[sample_index(len(order), policy, rng)]


def admit(members: list, individual, capacity: int) -> bool:
    """Insert ``individual`` into the rank-sorted ``members`` list in place.

    Admits when below capacity or when the score beats the current worst,
    evicting the worst member in the latter case.
    """
    if len(members) >= capacity:
        worst = members[-1]
        if not individual.fitness.score > worst.fitness.score:
            return False
        members.pop()
    key = rank_key(individual)
    lo, hi = 0, len(members)
    while lo < hi:
        mid = (lo + hi) // 2
        if rank_key(members[mid]) < key:
            lo = mid + 1
        else:
            hi = mid
    members.insert(lo, individual)
    return True

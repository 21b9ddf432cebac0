"""Central finite-difference check of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .knowledge import init_weights
from .micronn import backward, loss, forward
from .mutation import reproduce
from .topology import TopologyGraph, new_minimal


@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    max_abs_error: float
    n_params: int


# Central differences of an O(1) loss at eps=1e-5 carry ~1e-10 round-off, so
# entries smaller than this floor are compared on an absolute scale.
REL_FLOOR = 1e-6


def relative_error(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(g: TopologyGraph, w, x, y, eps: float = 1e-5) -> GradCheckResult:
    """Compare every analytic gradient entry with a central difference."""
    grads = backward(g, w, x, y)
    worst_rel = worst_abs = 0.0
    n = 0
    for (kind, key, arr), (_, _, garr) in zip(w.arrays(), grads.arrays()):
        flat = arr.reshape(-1)
        gflat = garr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss(forward(g, w, x), y)
            flat[i] = old - eps
            down = loss(forward(g, w, x), y)
            flat[i] = old
            num = (up - down) / (2 * eps)
            worst_rel = max(worst_rel, relative_error(float(gflat[i]), num))
            worst_abs = max(worst_abs, abs(float(gflat[i]) - num))
            n += 1
    return GradCheckResult(worst_rel, worst_abs, n)


def random_small_graph(rng: np.random.Generator, max_convs: int = 6, size: int = 4,
                       channels: int = 2, classes: int = 3, steps: int = 12) -> TopologyGraph:
    """Random evolved graph with at most ``max_convs`` conv nodes."""
    g = new_minimal((size, size, 2), classes, channels=channels, rng=rng)
    for _ in range(steps):
        child, _ = reproduce(g, rng)
        if len(child.conv_nodes) <= max_convs and max(n.channels for n in child.conv_nodes) <= 8:
            g = child
    return g


def check_random_graphs(n_graphs: int = 20, seed: int = 0, batch: int = 3,
                        eps: float = 1e-5) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_graphs):
        g = random_small_graph(rng)
        w = init_weights(g, rng, np.float64)
        for b in w.biases.values():
            b[...] = rng.normal(0.0, 0.1, b.shape)
        x = rng.random((batch,) + g.input_shape)
        y = rng.integers(0, g.num_classes, batch)
        out.append(finite_difference_check(g, w, x, y, eps))
    return out

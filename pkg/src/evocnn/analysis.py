"""Graph properties of evolved topologies.

Distances count edges along directed source->sink paths.  Density and
connectivity include the source and sink nodes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .topology import CONV, TopologyGraph

TABLE_ROWS = (
    ("nodes", "nodes"),
    ("edges", "edges"),
    ("density", "density"),
    ("connectivity", "connectivity"),
    ("channels", "mean_channels"),
    ("longest dist.", "longest_dist"),
    ("shortest dist.", "shortest_dist"),
    ("generations", "generations"),
)


@dataclass(frozen=True)
class GraphStats:
    nodes: float
    edges: float
    density: float
    connectivity: float
    mean_channels: float
    longest_dist: float
    shortest_dist: float
    generations: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def density(g: TopologyGraph) -> float:
    n = len(g.nodes)
    if n < 2:
        raise ValueError("density needs at least two nodes")
    return len(g.edges) / (n * (n - 1))


def laplacian(g: TopologyGraph) -> np.ndarray:
    """Laplacian D - A of the undirected skeleton."""
    index = {n.id: i for i, n in enumerate(g.nodes)}
    a = np.zeros((len(index), len(index)))
    for e in g.edges:
        i, j = index[e.src], index[e.dst]
        if i != j:
            a[i, j] = a[j, i] = 1.0
    return np.diag(a.sum(axis=1)) - a


def jacobi_eigenvalues(m: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm is at most ``tol`` times
    ``max(1, ||m||_F)``.
    Returns the eigenvalues in ascending order.
    """
    a = np.array(m, dtype=float, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T):
        raise ValueError("matrix must be symmetric")
    scale = max(1.0, float(np.linalg.norm(a)))
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = math.sqrt(float((a[off_mask] ** 2).sum()))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * (abs(a[p, p]) + abs(a[q, q])) or abs(apq) < 1e-300:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                a[p, q] = a[q, p] = 0.0
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    return np.sort(np.diag(a))


def algebraic_connectivity(g: TopologyGraph) -> float:
    """Second-smallest Laplacian eigenvalue of the undirected skeleton."""
    if len(g.nodes) < 2:
        return 0.0
    vals = jacobi_eigenvalues(laplacian(g))
    return max(float(vals[1]), 0.0)


def longest_distance(g: TopologyGraph) -> int:
    """Edges on the longest source->sink path (the depth)."""
    dist = {g.source.id: 0}
    for nid in g.topo_order():
        if nid not in dist:
            continue
        for e in g.out_edges(nid):
            dist[e.dst] = max(dist.get(e.dst, -1), dist[nid] + 1)
    return dist[g.sink.id]


def shortest_distance(g: TopologyGraph) -> int:
    """Edges on the shortest source->sink path (breadth-first search)."""
    src, snk = g.source.id, g.sink.id
    dist = {src: 0}
    todo = deque([src])
    while todo:
        cur = todo.popleft()
        if cur == snk:
            return dist[cur]
        for e in g.out_edges(cur):
            if e.dst not in dist:
                dist[e.dst] = dist[cur] + 1
                todo.append(e.dst)
    raise ValueError("sink is unreachable from source")


def mean_channels(g: TopologyGraph) -> float:
    convs = [n for n in g.nodes if n.kind == CONV]
    if not convs:
        raise ValueError("graph has no convolutional nodes")
    return sum(n.channels for n in convs) / len(convs)


def graph_stats(g: TopologyGraph, generation: int | None = None) -> GraphStats:
    return GraphStats(
        nodes=len(g.nodes),
        edges=len(g.edges),
        density=density(g),
        connectivity=algebraic_connectivity(g),
        mean_channels=mean_channels(g),
        longest_dist=longest_distance(g),
        shortest_dist=shortest_distance(g),
        generations=generation,
    )


def select_individuals(individuals: Sequence, selector: str = "all", k: int | None = None) -> list:
    """``best`` = top-k by score, ``last`` = the k most recently evaluated."""
    evaluated = [i for i in individuals if i.fitness is not None]
    if selector == "all":
        return list(individuals)
    if selector == "best":
        chosen = sorted(evaluated, key=lambda i: (-i.fitness.score, i.eval_seq))
    elif selector == "last":
        chosen = sorted(evaluated, key=lambda i: i.eval_seq, reverse=True)
    else:
        raise ValueError(f"unknown selector {selector!r}")
    return chosen if k is None else chosen[:k]


def population_stats(individuals: Iterable, selector: str = "all", k: int | None = None) -> GraphStats:
    """Arithmetic mean of every metric over the chosen individuals."""
    chosen = select_individuals(list(individuals), selector, k)
    if not chosen:
        raise ValueError("no individuals to summarise")
    rows = [graph_stats(i.topology, i.generation) for i in chosen]
    means = {}
    for f in fields(GraphStats):
        vals = [getattr(r, f.name) for r in rows]
        if f.name == "generations" and any(v is None for v in vals):
            means[f.name] = None
        else:
            means[f.name] = sum(vals) / len(vals)
    return GraphStats(**means)


def format_table(columns: dict[str, GraphStats], csv: bool = False) -> str:
    """Rows in the order nodes, edges, density, connectivity, channels, distances, generations."""
    names = list(columns)
    if csv:
        lines = [",".join(["metric"] + names)]
    else:
        lines = ["".join([f"{'':16}"] + [f"{n:>20}" for n in names])]
    for label, attr in TABLE_ROWS:
        vals = [getattr(columns[n], attr) for n in names]
        cells = ["" if v is None else f"{v:.4g}" for v in vals]
        if csv:
            lines.append(",".join([label] + cells))
        else:
            lines.append("".join([f"{label:16}"] + [f"{c:>20}" for c in cells]))
    return "\n".join(lines) + "\n"

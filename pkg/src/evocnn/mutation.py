"""The five topology mutations and retry-until-valid asexual reproduction."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .topology import (
    CONV,
    FC_KERNEL,
    KERNEL_CHOICES,
    POOL_MAX2,
    SINK,
    SOURCE,
    Edge,
    GeometryError,
    Node,
    TopologyGraph,
    TopologyError,
    new_id,
    on_path_nodes,
    rederive_strides,
    stride_between,
    validate,
)

DOUBLE_CHANNELS = "DoubleChannels"
ADD_NODE = "AddNode"
ADD_EDGE = "AddEdge"
PRUNE_EDGE = "PruneEdge"
INSERT_NODE = "InsertNode"
KINDS = (DOUBLE_CHANNELS, ADD_NODE, ADD_EDGE, PRUNE_EDGE, INSERT_NODE)

RETRY_CAP = 25
DEFAULT_NEW_KERNEL = 3


class MutationRejected(Exception):
    """The operator cannot produce a valid graph from this parent."""


class ReproductionError(RuntimeError):
    """No valid offspring within the retry cap."""


@dataclass(frozen=True)
class MutationRecord:
    kind: str
    targets: tuple[str, ...] = ()
    created: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()
    attempts: int = 1

    def __post_init__(self):
        if set(self.created) & set(self.removed):
            raise ValueError("created and removed ids overlap")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "targets": list(self.targets),
            "created": list(self.created),
            "removed": list(self.removed),
            "attempts": self.attempts,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MutationRecord":
        return cls(
            doc["kind"],
            tuple(doc["targets"]),
            tuple(doc["created"]),
            tuple(doc["removed"]),
            int(doc["attempts"]),
        )


def _checked(g: TopologyGraph) -> TopologyGraph:
    report = validate(g)
    if not report.valid:
        raise MutationRejected(f"invalid offspring: {report.violations[:3]}")
    return g


def double_channels(g: TopologyGraph, node_id: str, rng=None):
    n = g.node(node_id)
    if n.kind != CONV:
        raise TopologyError(f"cannot double channels of a {n.kind} node")
    child = g.replace_node(replace(n, channels=2 * n.channels))
    return child, MutationRecord(DOUBLE_CHANNELS, targets=(node_id,))


def legal_new_edges(g: TopologyGraph) -> list[tuple[str, str]]:
    """Ordered pairs (earlier -> later in topological order) that may gain an edge."""
    order = g.topo_order()
    pairs = []
    for i, a in enumerate(order):
        na = g.node(a)
        if na.kind == SINK:
            continue
        for b in order[i + 1:]:
            nb = g.node(b)
            if nb.kind == SOURCE:
                continue
            if na.kind == SOURCE and nb.kind == SINK:
                continue
            if g.find_edge(a, b) is not None:
                continue
            if nb.kind != SINK and na.out_size < nb.fmap:
                continue
            pairs.append((a, b))
    return pairs


def legal_node_insertions(g: TopologyGraph) -> list[tuple[str, str]]:
    """Ordered pairs (u, v) that can be linked through a brand-new conv node."""
    order = g.topo_order()
    pairs = []
    for i, a in enumerate(order):
        na = g.node(a)
        if na.kind == SINK:
            continue
        for b in order[i + 1:]:
            nb = g.node(b)
            if nb.kind == SOURCE:
                continue
            if nb.kind != SINK and na.out_size < nb.fmap:
                continue
            pairs.append((a, b))
    return pairs


def add_node(g: TopologyGraph, rng: np.random.Generator):
    pairs = legal_node_insertions(g)
    if not pairs:
        raise MutationRejected("no legal node insertion")
    u, v = pairs[rng.integers(len(pairs))]
    nu, nv = g.node(u), g.node(v)
    w = Node(new_id(rng), CONV, channels=g.channels_of(u), fmap=nu.out_size)
    e_in = Edge(new_id(rng), u, w.id, DEFAULT_NEW_KERNEL, 1)
    if nv.kind == SINK:
        e_out = Edge(new_id(rng), w.id, v, FC_KERNEL, 1)
    else:
        e_out = Edge(new_id(rng), w.id, v, DEFAULT_NEW_KERNEL, stride_between(w.out_size, nv.fmap))
    nodes = list(g.nodes)
    nodes.insert(len(nodes) - 1 if nodes[-1].kind == SINK else len(nodes), w)
    child = _checked(g.with_nodes_edges(nodes, g.edges + (e_in, e_out)))
    return child, MutationRecord(ADD_NODE, targets=(u, v), created=(w.id, e_in.id, e_out.id))


def add_edge(g: TopologyGraph, rng: np.random.Generator):
    pairs = legal_new_edges(g)
    if not pairs:
        raise MutationRejected("no legal new edge")
    u, v = pairs[rng.integers(len(pairs))]
    nu, nv = g.node(u), g.node(v)
    if nv.kind == SINK:
        e = Edge(new_id(rng), u, v, FC_KERNEL, 1)
    else:
        kernel = int(KERNEL_CHOICES[rng.integers(len(KERNEL_CHOICES))])
        e = Edge(new_id(rng), u, v, kernel, stride_between(nu.out_size, nv.fmap))
    child = _checked(g.with_nodes_edges(g.nodes, g.edges + (e,)))
    return child, MutationRecord(ADD_EDGE, targets=(u, v), created=(e.id,))


def orphan_sweep(g: TopologyGraph) -> TopologyGraph:
    """Drop nodes and edges that lie on no source->sink path.

    The source and sink are always kept.
    """
    on = on_path_nodes(g)
    keep = on | {g.source.id, g.sink.id}
    nodes = [n for n in g.nodes if n.id in keep]
    edges = [e for e in g.edges if e.src in on and e.dst in on]
    if len(nodes) == len(g.nodes) and len(edges) == len(g.edges):
        return g
    return g.with_nodes_edges(nodes, edges)


def prune_edge(g: TopologyGraph, rng: np.random.Generator):
    if not g.edges:
        raise MutationRejected("no edge to prune")
    e = g.edges[rng.integers(len(g.edges))]
    cut = g.with_nodes_edges(g.nodes, [x for x in g.edges if x.id != e.id])
    if g.sink.id not in on_path_nodes(cut):
        raise MutationRejected("pruning disconnects source from sink")
    swept = orphan_sweep(cut)
    removed = tuple(
        [e.id]
        + [n.id for n in cut.nodes if not swept.has_node(n.id)]
        + [x.id for x in cut.edges if not swept.has_edge(x.id)]
    )
    child = _checked(swept)
    return child, MutationRecord(PRUNE_EDGE, targets=(e.id,), removed=removed)


def insert_node(g: TopologyGraph, rng: np.random.Generator):
    if not g.edges:
        raise MutationRejected("no edge to split")
    e = g.edges[rng.integers(len(g.edges))]
    a = g.node(e.src)
    b = g.node(e.dst)
    targets = [e.id]
    into_sink = b.kind == SINK
    if into_sink and a.kind == CONV and not a.pooled:
        if a.fmap < 2:
            raise MutationRejected("predecessor map too small to pool")
        a = replace(a, pooling=POOL_MAX2)
        targets.append(a.id)
    w = Node(new_id(rng), CONV, channels=g.channels_of(a.id), fmap=a.out_size)
    kernel = DEFAULT_NEW_KERNEL if e.kernel == FC_KERNEL else e.kernel
    e_in = Edge(new_id(rng), a.id, w.id, kernel, 1)
    if into_sink:
        e_out = Edge(new_id(rng), w.id, b.id, FC_KERNEL, 1)
    else:
        e_out = Edge(new_id(rng), w.id, b.id, e.kernel, stride_between(w.out_size, b.fmap))
    nodes = [a if n.id == a.id else n for n in g.nodes]
    nodes.insert(len(nodes) - 1 if nodes[-1].kind == SINK else len(nodes), w)
    edges = [x for x in g.edges if x.id != e.id] + [e_in, e_out]
    child = g.with_nodes_edges(nodes, edges)
    try:
        child = rederive_strides(child, [a.id])
    except GeometryError as exc:
        raise MutationRejected(str(exc)) from exc
    child = _checked(child)
    return child, MutationRecord(
        INSERT_NODE, targets=tuple(targets), created=(w.id, e_in.id, e_out.id), removed=(e.id,)
    )


def apply_mutation(kind: str, g: TopologyGraph, rng: np.random.Generator):
    if kind == DOUBLE_CHANNELS:
        convs = g.conv_nodes
        if not convs:
            raise MutationRejected("no conv node")
        return double_channels(g, convs[rng.integers(len(convs))].id)
    if kind == ADD_NODE:
        return add_node(g, rng)
    if kind == ADD_EDGE:
        return add_edge(g, rng)
    if kind == PRUNE_EDGE:
        return prune_edge(g, rng)
    if kind == INSERT_NODE:
        return insert_node(g, rng)
    raise ValueError(f"unknown mutation kind {kind!r}")


def reproduce(g: TopologyGraph, rng: np.random.Generator, retry_cap: int = RETRY_CAP):
    """Draw mutations uniformly until one yields a valid offspring."""
    for attempt in range(1, retry_cap + 1):
        kind = KINDS[rng.integers(len(KINDS))]
        try:
            child, record = apply_mutation(kind, g, rng)
        except MutationRejected:
            continue
        return child, replace(record, attempts=attempt)
    raise ReproductionError(f"no valid offspring after {retry_cap} attempts")

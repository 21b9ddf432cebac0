"""DAG genome of a deep CNN.

A topology is a single-source / single-sink directed acyclic graph.  The source
holds the input image, every internal node is a convolutional node (sum of
in-edge convolutions, bias, ReLU, optional 2x2 max-pool) and the sink produces
class logits through fully-connected edges.

Graphs are immutable values; every mutating helper returns a new graph.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

SOURCE = "source"
CONV = "conv"
SINK = "sink"

POOL_NONE = "none"
POOL_MAX2 = "max2"

KERNEL_CHOICES = (1, 3, 5, 7, 9)
FC_KERNEL = 0  # sentinel kernel of edges into the sink

DEFAULT_CHANNELS = 8


class TopologyError(ValueError):
    """Raised for malformed or invalid topologies."""


class GeometryError(TopologyError):
    """Feature-map sizes that cannot be joined by an integral stride."""


class InvalidGraphError(TopologyError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__(
            "invalid topology: "
            + "; ".join(f"{rule} ({elem})" for rule, elem in report.violations)
        )


def new_id(rng: np.random.Generator) -> str:
    """128-bit opaque identifier as 32 hex digits."""
    return rng.bytes(16).hex()


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    channels: int = 0
    pooling: str = POOL_NONE
    fmap: int = 0

    @property
    def pooled(self) -> bool:
        return self.pooling == POOL_MAX2

    @property
    def out_size(self) -> int:
        return self.fmap // 2 if self.pooled else self.fmap


@dataclass(frozen=True)
class Edge:
    id: str
    src: str
    dst: str
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[tuple[str, str], ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid


@dataclass(frozen=True)
class TopologyGraph:
    input_shape: tuple[int, int, int]
    num_classes: int
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]

    # -- lookups -----------------------------------------------------------
    @cached_property
    def _node_index(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def _edge_index(self) -> dict[str, Edge]:
        return {e.id: e for e in self.edges}

    @cached_property
    def _adjacency(self) -> tuple[dict[str, list[Edge]], dict[str, list[Edge]]]:
        ins: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        outs: dict[str, list[Edge]] = {n.id: [] for n in self.nodes}
        for e in self.edges:
            if e.dst in ins:
                ins[e.dst].append(e)
            if e.src in outs:
                outs[e.src].append(e)
        return ins, outs

    def node(self, node_id: str) -> Node:
        return self._node_index[node_id]

    def edge(self, edge_id: str) -> Edge:
        return self._edge_index[edge_id]

    def has_node(self, node_id: str) -> bool:
        return node_id in self._node_index

    def has_edge(self, edge_id: str) -> bool:
        return edge_id in self._edge_index

    def in_edges(self, node_id: str) -> list[Edge]:
        return self._adjacency[0][node_id]

    def out_edges(self, node_id: str) -> list[Edge]:
        return self._adjacency[1][node_id]

    @property
    def source(self) -> Node:
        return next(n for n in self.nodes if n.kind == SOURCE)

    @property
    def sink(self) -> Node:
        return next(n for n in self.nodes if n.kind == SINK)

    @property
    def conv_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.kind == CONV]

    def find_edge(self, src: str, dst: str) -> Edge | None:
        for e in self.out_edges(src):
            if e.dst == dst:
                return e
        return None

    def channels_of(self, node_id: str) -> int:
        """Channels a node emits; the source emits the image channels."""
        n = self.node(node_id)
        if n.kind == SOURCE:
            return self.input_shape[2]
        return n.channels

    @cached_property
    def _topo(self) -> tuple[str, ...]:
        order = _kahn(self, key=lambda nid, pos: pos)
        if order is None:
            raise TopologyError("graph contains a cycle")
        return tuple(order)

    def topo_order(self) -> tuple[str, ...]:
        """Topological order with ties broken by creation order."""
        return self._topo

    # -- functional updates --------------------------------------------------
    def with_nodes_edges(
        self, nodes: Iterable[Node], edges: Iterable[Edge]
    ) -> "TopologyGraph":
        return replace(self, nodes=tuple(nodes), edges=tuple(edges))

    def replace_node(self, node: Node) -> "TopologyGraph":
        nodes = tuple(node if n.id == node.id else n for n in self.nodes)
        return replace(self, nodes=nodes)


def _kahn(g: TopologyGraph, key) -> list[str] | None:
    """Kahn's algorithm; ``key(node_id, creation_pos)`` orders ready nodes."""
    pos = {n.id: i for i, n in enumerate(g.nodes)}
    indeg = {n.id: 0 for n in g.nodes}
    for e in g.edges:
        if e.dst in indeg:
            indeg[e.dst] += 1
    heap = [(key(nid, pos[nid]), nid) for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, nid = heapq.heappop(heap)
        order.append(nid)
        for e in g.out_edges(nid):
            if e.dst not in indeg:
                continue
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(heap, (key(e.dst, pos[e.dst]), e.dst))
    if len(order) != len(g.nodes):
        return None
    return order


def _check_input_shape(input_shape) -> tuple[int, int, int]:
    try:
        h, w, c = (int(v) for v in input_shape)
    except (TypeError, ValueError):
        raise TopologyError(f"input shape must be (H, W, C), got {input_shape!r}")
    if h <= 0 or w <= 0 or c <= 0:
        raise TopologyError(f"input shape must be positive, got {input_shape!r}")
    if h != w:
        raise TopologyError(f"input must be square, got {h}x{w}")
    if h & (h - 1):
        raise TopologyError(f"input side must be a power of two, got {h}")
    return h, w, c


def new_minimal(
    input_shape,
    num_classes: int,
    channels: int = DEFAULT_CHANNELS,
    rng: np.random.Generator | None = None,
) -> TopologyGraph:
    """source -> conv -> sink, the starting point of every evolution."""
    h, w, c = _check_input_shape(input_shape)
    if num_classes < 2:
        raise TopologyError("need at least two classes")
    if channels < 1:
        raise TopologyError("channels must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    src = Node(new_id(rng), SOURCE, channels=c, fmap=h)
    conv = Node(new_id(rng), CONV, channels=channels, fmap=h)
    snk = Node(new_id(rng), SINK)
    edges = (
        Edge(new_id(rng), src.id, conv.id, 3, 1),
        Edge(new_id(rng), conv.id, snk.id, FC_KERNEL, 1),
    )
    return TopologyGraph((h, w, c), int(num_classes), (src, conv, snk), edges)


def assemble(
    input_shape,
    num_classes: int,
    convs: Iterable[tuple[str, int, bool]],
    links: Iterable[tuple[str, str, int]],
    rng: np.random.Generator | None = None,
    source_name: str = "source",
    sink_name: str = "sink",
) -> tuple[TopologyGraph, dict[str, str]]:
    """Build a graph from named conv nodes and named links.

    ``convs`` holds ``(name, channels, pooled)`` and ``links`` holds
    ``(from_name, to_name, kernel)``; links into the sink get the FC sentinel.
    Each conv's feature-map size is the minimum of its predecessors' output
    sizes and strides are derived.  Returns the graph and a name -> id map.
    """
    h, w, c = _check_input_shape(input_shape)
    rng = rng if rng is not None else np.random.default_rng(0)
    convs = list(convs)
    links = list(links)
    ids = {source_name: new_id(rng)}
    spec = {}
    for name, ch, pooled in convs:
        if name in ids:
            raise TopologyError(f"duplicate node name {name!r}")
        ids[name] = new_id(rng)
        spec[name] = (int(ch), bool(pooled))
    ids[sink_name] = new_id(rng)

    preds: dict[str, list[str]] = {name: [] for name in ids}
    for a, b, _ in links:
        if a not in ids or b not in ids:
            raise TopologyError(f"link {a}->{b} names an unknown node")
        preds[b].append(a)

    out_size = {source_name: h}
    fmap = {}
    pending = [name for name, _, _ in convs]
    while pending:
        progressed = False
        for name in list(pending):
            if all(p in out_size for p in preds[name]):
                if not preds[name]:
                    raise TopologyError(f"node {name!r} has no predecessor")
                fmap[name] = min(out_size[p] for p in preds[name])
                pooled = spec[name][1]
                if pooled and fmap[name] < 2:
                    raise GeometryError(f"cannot pool a {fmap[name]}px map at {name!r}")
                out_size[name] = fmap[name] // 2 if pooled else fmap[name]
                pending.remove(name)
                progressed = True
        if not progressed:
            raise TopologyError("links contain a cycle")

    nodes = [Node(ids[source_name], SOURCE, channels=c, fmap=h)]
    for name, _, _ in convs:
        ch, pooled = spec[name]
        nodes.append(
            Node(ids[name], CONV, ch, POOL_MAX2 if pooled else POOL_NONE, fmap[name])
        )
    nodes.append(Node(ids[sink_name], SINK))
    edges = []
    for a, b, k in links:
        if b == sink_name:
            edges.append(Edge(new_id(rng), ids[a], ids[b], FC_KERNEL, 1))
        else:
            edges.append(Edge(new_id(rng), ids[a], ids[b], int(k), stride_between(out_size[a], fmap[b])))
    g = TopologyGraph((h, w, c), int(num_classes), tuple(nodes), tuple(edges))
    require_valid(g)
    return g, ids


# -- validity ----------------------------------------------------------------

def stride_between(out_size: int, fmap: int) -> int:
    if fmap <= 0 or out_size < fmap or out_size % fmap:
        raise GeometryError(f"no integral stride maps {out_size}px onto {fmap}px")
    s = out_size // fmap
    if s & (s - 1):
        raise GeometryError(f"stride {s} is not a power of two")
    return s


def _reach(start: str, step) -> set[str]:
    seen = {start}
    todo = deque([start])
    while todo:
        cur = todo.popleft()
        for nxt in step(cur):
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def on_path_nodes(g: TopologyGraph) -> set[str]:
    """Nodes lying on at least one source->sink path (BFS both directions)."""
    fwd = _reach(g.source.id, lambda n: [e.dst for e in g.out_edges(n) if g.has_node(e.dst)])
    bwd = _reach(g.sink.id, lambda n: [e.src for e in g.in_edges(n) if g.has_node(e.src)])
    return fwd & bwd


def validate(g: TopologyGraph) -> ValidationReport:
    """Check every structural and geometric rule; never raises."""
    v: list[tuple[str, str]] = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        v.append(("duplicate-node-id", ",".join(sorted({i for i in ids if ids.count(i) > 1}))))
    eids = [e.id for e in g.edges]
    if len(set(eids)) != len(eids):
        v.append(("duplicate-edge-id", ",".join(sorted({i for i in eids if eids.count(i) > 1}))))
    if set(ids) & set(eids):
        v.append(("shared-id", ",".join(sorted(set(ids) & set(eids)))))

    sources = [n for n in g.nodes if n.kind == SOURCE]
    sinks = [n for n in g.nodes if n.kind == SINK]
    if len(sources) != 1:
        v.append(("source-count", str(len(sources))))
    if len(sinks) != 1:
        v.append(("sink-count", str(len(sinks))))
    for n in g.nodes:
        if n.kind not in (SOURCE, CONV, SINK):
            v.append(("node-kind", n.id))
    known = set(ids)
    dangling = False
    for e in g.edges:
        if e.src not in known or e.dst not in known:
            v.append(("dangling-edge", e.id))
            dangling = True
    if v and (len(sources) != 1 or len(sinks) != 1 or dangling):
        return ValidationReport(tuple(v))

    src, snk = sources[0], sinks[0]
    pairs = set()
    for e in g.edges:
        if (e.src, e.dst) in pairs:
            v.append(("duplicate-edge", e.id))
        pairs.add((e.src, e.dst))
        if e.src == e.dst:
            v.append(("self-loop", e.id))
        if e.dst == src.id:
            v.append(("source-in-edge", e.id))
        if e.src == snk.id:
            v.append(("sink-out-edge", e.id))
        if e.src == src.id and e.dst == snk.id:
            v.append(("source-sink-edge", e.id))

    if _kahn(g, key=lambda nid, pos: pos) is None:
        v.append(("cycle", ""))
    on_path = on_path_nodes(g)
    for n in g.nodes:
        if n.id not in on_path:
            v.append(("off-path-node", n.id))

    h = g.input_shape[0]
    if src.fmap != h or src.channels != g.input_shape[2] or src.pooled:
        v.append(("source-geometry", src.id))
    if snk.pooled:
        v.append(("sink-pooling", snk.id))
    for n in g.conv_nodes:
        if n.channels < 1:
            v.append(("channels", n.id))
        if n.fmap < 1 or n.fmap > h or h % n.fmap or (n.fmap & (n.fmap - 1)):
            v.append(("fmap", n.id))
        if n.pooled and n.fmap < 2:
            v.append(("pool-size", n.id))
        if n.pooling not in (POOL_NONE, POOL_MAX2):
            v.append(("pooling", n.id))
    for e in g.edges:
        if e.src not in known or e.dst not in known:
            continue
        a, b = g.node(e.src), g.node(e.dst)
        if b.kind == SINK:
            if e.kernel != FC_KERNEL:
                v.append(("kernel", e.id))
            continue
        if e.kernel not in KERNEL_CHOICES:
            v.append(("kernel", e.id))
        try:
            s = stride_between(a.out_size, b.fmap)
        except GeometryError:
            v.append(("stride", e.id))
            continue
        if s != e.stride:
            v.append(("stride", e.id))
    return ValidationReport(tuple(v))


def require_valid(g: TopologyGraph) -> TopologyGraph:
    report = validate(g)
    if not report.valid:
        raise InvalidGraphError(report)
    return g


def fmap_sizes(g: TopologyGraph) -> dict[str, int]:
    """Output feature-map side length of every non-sink node.

    Raises GeometryError if a stored size contradicts an edge stride.
    """
    sizes = {}
    for n in g.nodes:
        if n.kind == SINK:
            continue
        sizes[n.id] = g.input_shape[0] if n.kind == SOURCE else n.out_size
    for e in g.edges:
        b = g.node(e.dst)
        if b.kind == SINK:
            continue
        if stride_between(sizes[e.src], b.fmap) != e.stride:
            raise GeometryError(f"edge {e.id} stride {e.stride} disagrees with sizes")
    return sizes


def rederive_strides(g: TopologyGraph, node_ids: Iterable[str] | None = None) -> TopologyGraph:
    """Recompute strides of the out-edges of ``node_ids`` (all edges if None)."""
    wanted = None if node_ids is None else set(node_ids)
    edges = []
    for e in g.edges:
        if (wanted is None or e.src in wanted) and g.node(e.dst).kind != SINK:
            s = stride_between(g.node(e.src).out_size, g.node(e.dst).fmap)
            e = replace(e, stride=s)
        edges.append(e)
    return g.with_nodes_edges(g.nodes, edges)


# -- identity & serialization ---------------------------------------------------

def canonical_order(g: TopologyGraph) -> list[str]:
    """Topological order, ties broken by (channels, pooling, out-deg, in-deg, creation)."""
    def key(nid, pos):
        n = g.node(nid)
        return (n.channels, n.pooling, len(g.out_edges(nid)), len(g.in_edges(nid)), pos)

    order = _kahn(g, key)
    if order is None:
        raise TopologyError("graph contains a cycle")
    return order


def canonical_hash(g: TopologyGraph) -> str:
    order = canonical_order(g)
    index = {nid: i for i, nid in enumerate(order)}
    nodes = [
        [g.node(nid).kind, g.node(nid).channels, g.node(nid).pooling, g.node(nid).fmap]
        for nid in order
    ]
    edges = sorted([index[e.src], index[e.dst], e.kernel, e.stride] for e in g.edges)
    doc = {
        "input": list(g.input_shape),
        "classes": g.num_classes,
        "nodes": nodes,
        "edges": edges,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def to_dict(g: TopologyGraph) -> dict:
    return {
        "input": list(g.input_shape),
        "classes": g.num_classes,
        "nodes": [
            {"id": n.id, "kind": n.kind, "channels": n.channels, "pooling": n.pooling, "fmap": n.fmap}
            for n in g.nodes
        ],
        "edges": [
            {"id": e.id, "from": e.src, "to": e.dst, "kernel": e.kernel, "stride": e.stride}
            for e in g.edges
        ],
    }


def from_dict(doc: Mapping) -> TopologyGraph:
    try:
        nodes = tuple(
            Node(str(n["id"]), str(n["kind"]), int(n["channels"]), str(n["pooling"]), int(n["fmap"]))
            for n in doc["nodes"]
        )
        edges = tuple(
            Edge(str(e["id"]), str(e["from"]), str(e["to"]), int(e["kernel"]), int(e["stride"]))
            for e in doc["edges"]
        )
        g = TopologyGraph(
            tuple(int(x) for x in doc["input"]), int(doc["classes"]), nodes, edges
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TopologyError(f"malformed topology document: {exc}") from exc
    if len(g.input_shape) != 3:
        raise TopologyError("input must have three dimensions")
    return require_valid(g)


def to_json(g: TopologyGraph, indent: int | None = None) -> str:
    return json.dumps(to_dict(g), indent=indent)


def from_json(text: str) -> TopologyGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise TopologyError("topology document must be a JSON object")
    return from_dict(doc)


def display_names(g: TopologyGraph) -> dict[str, str]:
    names = {}
    k = 0
    for nid in g.topo_order():
        n = g.node(nid)
        if n.kind == SOURCE:
            names[nid] = "input"
        elif n.kind == SINK:
            names[nid] = "output"
        else:
            k += 1
            names[nid] = f"n{k}"
    return names


def to_dot(g: TopologyGraph, name: str = "topology") -> str:
    """Graphviz text: nodes show name, pooling flag and channels; edges show kernel."""
    names = display_names(g)
    lines = [f"digraph {json.dumps(name)} {{", "  rankdir=TB;"]
    for nid in g.topo_order():
        n = g.node(nid)
        if n.kind == SINK:
            label = f"{names[nid]}\\n{g.num_classes} classes"
        else:
            flag = "P" if n.pooled else "-"
            label = f"{names[nid]}\\n{flag}\\n{g.channels_of(nid)}"
        lines.append(f'  "{nid}" [label="{label}"];')
    for e in g.edges:
        label = "fc" if e.kernel == FC_KERNEL else str(e.kernel)
        lines.append(f'  "{e.src}" -> "{e.dst}" [label="{label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"

"""Hand-designed networks built by stacking a building block.

Blocks are chained output -> input.  Cross-block skips follow two anchor
pairs: (n7 -> n8) and (n1 -> n6) of later blocks, either only into the next
block (``adjacent``) or into every later block (``dense``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import longest_distance, shortest_distance
from .topology import TopologyError, TopologyGraph, assemble

NONE = "none"
ADJACENT = "adjacent"
DENSE = "dense"
SKIP_MODES = (NONE, ADJACENT, DENSE)


@dataclass(frozen=True)
class BlockSpec:
    nodes: tuple[tuple[str, int], ...]
    edges: tuple[tuple[str, str, int], ...]
    input_node: str = "n1"
    output_node: str = "n8"
    skip_anchors: tuple[tuple[str, str], ...] = (("n7", "n8"), ("n1", "n6"))
    link_kernel: int = 3
    skip_kernel: int = 1

    def __post_init__(self):
        names = [n for n, _ in self.nodes]
        if len(set(names)) != len(names):
            raise TopologyError("duplicate block node names")
        known = set(names)
        for a, b, _ in self.edges:
            if a not in known or b not in known:
                raise TopologyError(f"block edge {a}->{b} names an unknown node")
        for name in (self.input_node, self.output_node):
            if name not in known:
                raise TopologyError(f"block has no node {name!r}")
        for a, b in self.skip_anchors:
            if a not in known or b not in known:
                raise TopologyError(f"skip anchor {a}->{b} names an unknown node")
        # acyclic and output reachable from input
        succ = {n: [b for a, b, _ in self.edges if a == n] for n in names}
        state: dict[str, int] = {}

        def visit(n):
            state[n] = 1
            for m in succ[n]:
                if state.get(m) == 1:
                    raise TopologyError("block contains a cycle")
                if m not in state:
                    visit(m)
            state[n] = 2

        for n in names:
            if n not in state:
                visit(n)
        seen, todo = {self.input_node}, [self.input_node]
        while todo:
            for m in succ[todo.pop()]:
                if m not in seen:
                    seen.add(m)
                    todo.append(m)
        if self.output_node not in seen:
            raise TopologyError("block output is unreachable from its input")

    def to_dict(self) -> dict:
        return {
            "nodes": [{"name": n, "channels": c} for n, c in self.nodes],
            "edges": [{"from": a, "to": b, "kernel": k} for a, b, k in self.edges],
            "input": self.input_node,
            "output": self.output_node,
            "skip_anchors": [list(p) for p in self.skip_anchors],
            "link_kernel": self.link_kernel,
            "skip_kernel": self.skip_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        try:
            return cls(
                nodes=tuple((n["name"], int(n["channels"])) for n in d["nodes"]),
                edges=tuple((e["from"], e["to"], int(e["kernel"])) for e in d["edges"]),
                input_node=d.get("input", "n1"),
                output_node=d.get("output", "n8"),
                skip_anchors=tuple(tuple(p) for p in d.get("skip_anchors", (("n7", "n8"), ("n1", "n6")))),
                link_kernel=int(d.get("link_kernel", 3)),
                skip_kernel=int(d.get("skip_kernel", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise TopologyError(f"malformed block spec: {exc}") from exc

    @classmethod
    def load(cls, path) -> "BlockSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_block(channels: int = 64) -> BlockSpec:
    """Chain n1-n2-n4-n6-n7-n8 (kernel 3) plus the skip n1 -> n7 (kernel 1)."""
    chain = ("n1", "n2", "n4", "n6", "n7", "n8")
    edges = tuple((a, b, 3) for a, b in zip(chain, chain[1:])) + (("n1", "n7", 1),)
    return BlockSpec(nodes=tuple((n, channels) for n in chain), edges=edges)


@dataclass(frozen=True)
class StackPlan:
    block: BlockSpec
    count: int
    skip_mode: str = NONE
    pooling_blocks: frozenset[int] = field(default_factory=frozenset)  # 1-based block numbers

    def __post_init__(self):
        if self.count < 1:
            raise TopologyError("need at least one block")
        if self.skip_mode not in SKIP_MODES:
            raise TopologyError(f"unknown skip mode {self.skip_mode!r}")
        for i in self.pooling_blocks:
            if not 1 <= i < self.count:
                raise TopologyError(f"pooling block {i} must be in [1, {self.count - 1}]")


def stack(plan: StackPlan, input_shape=(32, 32, 3), num_classes: int = 10) -> TopologyGraph:
    blk = plan.block

    def name(i, n):
        return f"b{i}.{n}"

    convs = []
    links = []
    for i in range(1, plan.count + 1):
        for n, ch in blk.nodes:
            pooled = n == blk.output_node and i in plan.pooling_blocks
            convs.append((name(i, n), ch, pooled))
        for a, b, k in blk.edges:
            links.append((name(i, a), name(i, b), k))
        if i == 1:
            links.append(("source", name(i, blk.input_node), blk.link_kernel))
        else:
            links.append((name(i - 1, blk.output_node), name(i, blk.input_node), blk.link_kernel))
    for i in range(1, plan.count + 1):
        if plan.skip_mode == NONE:
            break
        later = [i + 1] if plan.skip_mode == ADJACENT else range(i + 1, plan.count + 1)
        for j in later:
            if j > plan.count:
                continue
            for a, b in blk.skip_anchors:
                links.append((name(i, a), name(j, b), blk.skip_kernel))
    links.append((name(plan.count, blk.output_node), "sink", 0))
    g, _ = assemble(input_shape, num_classes, convs, links)
    return g


# name -> (count, skip mode, pooling blocks, paper depth, paper shortest distance)
FAMILY = {
    "EVO-44": (7, NONE, (2, 4, 6), 44, 23),
    "EVO-44a": (7, ADJACENT, (2, 4, 6), None, 13),
    "EVO-44b": (7, DENSE, (2, 4, 6), None, 5),
    "EVO-91": (15, NONE, (4, 8, 12), 91, 47),
    "EVO-91a": (15, ADJACENT, (4, 8, 12), None, 25),
    "EVO-91b": (15, DENSE, (4, 8, 12), None, 5),
}


def family_plan(name: str, block: BlockSpec | None = None) -> StackPlan:
    if name not in FAMILY:
        raise KeyError(f"unknown family {name!r}; choose from {', '.join(FAMILY)}")
    count, mode, pools, _, _ = FAMILY[name]
    return StackPlan(block or default_block(), count, mode, frozenset(pools))


def evo_family(name: str, block: BlockSpec | None = None, input_shape=(32, 32, 3),
               num_classes: int = 10) -> TopologyGraph:
    return stack(family_plan(name, block), input_shape, num_classes)


def check_family(block: BlockSpec | None = None) -> list[dict]:
    """Measured distances beside the published ones, per family member.

    Measured values count edges; ``+1`` gives the count in nodes.
    """
    rows = []
    for name, (_, _, _, depth, short) in FAMILY.items():
        g = evo_family(name, block)
        rows.append({
            "name": name,
            "longest_edges": longest_distance(g),
            "shortest_edges": shortest_distance(g),
            "paper_depth": depth,
            "paper_shortest": short,
        })
    return rows


def ordering_verdicts(rows: list[dict]) -> dict[str, bool]:
    by = {r["name"]: r for r in rows}
    out = {}
    for fam in ("EVO-44", "EVO-91"):
        s = [by[fam + x]["shortest_edges"] for x in ("", "a", "b")]
        out[f"{fam}: none > adjacent > dense shortest"] = s[0] > s[1] > s[2]
    out["EVO-44b shortest == EVO-91b shortest"] = (
        by["EVO-44b"]["shortest_edges"] == by["EVO-91b"]["shortest_edges"])
    for x in ("", "a", "b"):
        out[f"EVO-91{x} deeper than EVO-44{x}"] = (
            by["EVO-91" + x]["longest_edges"] > by["EVO-44" + x]["longest_edges"])
    return out

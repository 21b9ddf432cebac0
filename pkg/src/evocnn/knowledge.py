"""Inheritable knowledge (weights) and learnable knowledge (hyperparameters).

Weights are keyed by the stable edge/node ids of the topology, so an offspring
can copy every tensor whose id survived its mutation.  Hyperparameters are
learned population-wide with independent Laplace-smoothed categorical
distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .mutation import ADD_EDGE, ADD_NODE, DOUBLE_CHANNELS, MutationRecord
from .topology import CONV, SINK, TopologyGraph

PAPER = "paper"
PRESERVING = "preserving"

DEFAULT_SPACE: dict[str, tuple] = {
    "learning_rate": (0.0005, 0.001, 0.005, 0.01),
    "batch_size": (32, 64, 128),
    "optimizer": ("sgd_momentum", "adam", "rmsprop"),
    "dropout": (0.0, 0.25, 0.5),
}
SMOOTHING = 1.0


class InheritanceError(ValueError):
    """Mutation record does not describe the parent -> child derivation."""


# -- weights -------------------------------------------------------------------

@dataclass
class WeightBundle:
    kernels: dict[str, np.ndarray] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "WeightBundle":
        return WeightBundle(
            {k: v.copy() for k, v in self.kernels.items()},
            {k: v.copy() for k, v in self.biases.items()},
        )

    def astype(self, dtype) -> "WeightBundle":
        return WeightBundle(
            {k: v.astype(dtype) for k, v in self.kernels.items()},
            {k: v.astype(dtype) for k, v in self.biases.items()},
        )

    def arrays(self):
        """(kind, id, array) triples in a stable order."""
        for k in sorted(self.kernels):
            yield "kernel", k, self.kernels[k]
        for k in sorted(self.biases):
            yield "bias", k, self.biases[k]

    def zeros_like(self) -> "WeightBundle":
        return WeightBundle(
            {k: np.zeros_like(v) for k, v in self.kernels.items()},
            {k: np.zeros_like(v) for k, v in self.biases.items()},
        )

    def equals(self, other: "WeightBundle") -> bool:
        if self.kernels.keys() != other.kernels.keys() or self.biases.keys() != other.biases.keys():
            return False
        return all(
            a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
            for (_, _, a), (_, _, b) in zip(self.arrays(), other.arrays())
        )


def kernel_shape(g: TopologyGraph, edge_id: str) -> tuple[int, ...]:
    e = g.edge(edge_id)
    src = g.node(e.src)
    c_from = g.channels_of(e.src)
    if g.node(e.dst).kind == SINK:
        return (src.out_size * src.out_size * c_from, g.num_classes)
    return (e.kernel, e.kernel, c_from, g.channels_of(e.dst))


def fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 2:
        return shape[0]
    return shape[0] * shape[1] * shape[2]


def he_normal(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Zero-mean normal with variance 2 / fan_in."""
    std = np.sqrt(2.0 / fan_in(shape))
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_weights(g: TopologyGraph, rng: np.random.Generator, dtype=np.float64) -> WeightBundle:
    w = WeightBundle()
    for e in g.edges:
        w.kernels[e.id] = he_normal(kernel_shape(g, e.id), rng, dtype)
    for n in g.conv_nodes:
        w.biases[n.id] = np.zeros(n.channels, dtype=dtype)
    return w


def check_bundle(g: TopologyGraph, w: WeightBundle) -> None:
    edge_ids = {e.id for e in g.edges}
    node_ids = {n.id for n in g.conv_nodes}
    if set(w.kernels) != edge_ids:
        raise ValueError("kernel keys do not match graph edges")
    if set(w.biases) != node_ids:
        raise ValueError("bias keys do not match graph conv nodes")
    for e in g.edges:
        if w.kernels[e.id].shape != kernel_shape(g, e.id):
            raise ValueError(f"kernel {e.id} has shape {w.kernels[e.id].shape}, "
                             f"expected {kernel_shape(g, e.id)}")
    for n in g.conv_nodes:
        if w.biases[n.id].shape != (n.channels,):
            raise ValueError(f"bias {n.id} has wrong shape")


def _check_record(parent_g: TopologyGraph, child_g: TopologyGraph, record: MutationRecord):
    created = set(record.created)
    for i in created:
        if not (child_g.has_node(i) or child_g.has_edge(i)):
            raise InheritanceError(f"created id {i} missing from child")
        if parent_g.has_node(i) or parent_g.has_edge(i):
            raise InheritanceError(f"created id {i} already in parent")
    for i in record.removed:
        if child_g.has_node(i) or child_g.has_edge(i):
            raise InheritanceError(f"removed id {i} still in child")
    for n in child_g.nodes:
        if n.id not in created and not parent_g.has_node(n.id):
            raise InheritanceError(f"child node {n.id} has no origin")
    for e in child_g.edges:
        if e.id not in created and not parent_g.has_edge(e.id):
            raise InheritanceError(f"child edge {e.id} has no origin")
    if record.kind == DOUBLE_CHANNELS:
        (nid,) = record.targets
        if child_g.node(nid).channels != 2 * parent_g.node(nid).channels:
            raise InheritanceError("doubled node does not have twice the channels")


def _sink_view(t: np.ndarray, side: int, channels: int) -> np.ndarray:
    return t.reshape(side, side, channels, t.shape[-1])


def inherit_weights(
    parent: WeightBundle,
    parent_g: TopologyGraph,
    child_g: TopologyGraph,
    record: MutationRecord,
    rng: np.random.Generator,
    mode: str = PAPER,
) -> WeightBundle:
    """Initialise the child's weights from its parent.

    Surviving ids copy their tensors.  Tensors that grew (the edges touching a
    doubled node) keep the parent values in their leading channel slice.  New
    tensors are He-normal; in ``preserving`` mode the tensors that feed new
    units into the old network start at zero so that the child computes the
    parent's function.
    """
    if mode not in (PAPER, PRESERVING):
        raise ValueError(f"unknown inheritance mode {mode!r}")
    _check_record(parent_g, child_g, record)
    dtype = next((a.dtype for _, _, a in parent.arrays()), np.float64)
    created = set(record.created)
    doubled = record.targets[0] if record.kind == DOUBLE_CHANNELS else None
    out = WeightBundle()

    for e in child_g.edges:
        shape = kernel_shape(child_g, e.id)
        if e.id in created:
            t = he_normal(shape, rng, dtype)
            if mode == PRESERVING and record.kind == ADD_EDGE:
                t[...] = 0
            if mode == PRESERVING and record.kind == ADD_NODE and e.src in created:
                t[...] = 0
            out.kernels[e.id] = t
            continue
        old = parent.kernels[e.id]
        if old.shape == shape:
            out.kernels[e.id] = old.copy()
            continue
        if doubled is None or doubled not in (e.src, e.dst):
            raise InheritanceError(f"edge {e.id} changed shape without a channel doubling")
        t = he_normal(shape, rng, dtype)
        if child_g.node(e.dst).kind == SINK:
            side = child_g.node(e.src).out_size
            c_old = parent_g.channels_of(e.src)
            view = _sink_view(t, side, 2 * c_old)
            view[:, :, :c_old, :] = _sink_view(old, side, c_old)
            if mode == PRESERVING:
                view[:, :, c_old:, :] = 0
        else:
            ci, co = old.shape[2], old.shape[3]
            t[:, :, :ci, :co] = old
            if mode == PRESERVING and e.src == doubled:
                t[:, :, ci:, :] = 0
        out.kernels[e.id] = t

    for n in child_g.conv_nodes:
        if n.id in created or n.id not in parent.biases:
            out.biases[n.id] = np.zeros(n.channels, dtype=dtype)
            continue
        old = parent.biases[n.id]
        b = np.zeros(n.channels, dtype=dtype)
        b[: old.shape[0]] = old
        out.biases[n.id] = b
    check_bundle(child_g, out)
    return out


# -- hyperparameters -----------------------------------------------------------

@dataclass(frozen=True)
class HyperparamPosterior:
    values: Mapping[str, tuple]
    probs: Mapping[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            name: {"values": list(self.values[name]), "probs": [float(p) for p in self.probs[name]]}
            for name in self.values
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HyperparamPosterior":
        return cls(
            {k: tuple(v["values"]) for k, v in doc.items()},
            {k: np.array(v["probs"], dtype=float) for k, v in doc.items()},
        )


def init_posterior(space: Mapping[str, Iterable] = DEFAULT_SPACE) -> HyperparamPosterior:
    values = {}
    probs = {}
    for name, vals in space.items():
        vals = tuple(vals)
        if not vals:
            raise ValueError(f"hyperparameter {name!r} has no values")
        values[name] = vals
        probs[name] = np.full(len(vals), 1.0 / len(vals))
    return HyperparamPosterior(values, probs)


def update_posterior(
    posterior: HyperparamPosterior, choices: Iterable[Mapping], alpha: float = SMOOTHING
) -> HyperparamPosterior:
    """Recount each parameter over ``choices`` (the stored individuals' picks).

    Every parameter is treated independently; counts get ``alpha`` added.
    """
    counts = {name: np.zeros(len(v)) for name, v in posterior.values.items()}
    index = {name: {val: i for i, val in enumerate(v)} for name, v in posterior.values.items()}
    for choice in choices:
        for name, val in choice.items():
            if name in index and val in index[name]:
                counts[name][index[name][val]] += 1
    probs = {name: (c + alpha) / (c.sum() + alpha * len(c)) for name, c in counts.items()}
    return HyperparamPosterior(posterior.values, probs)


def sample_hyperparams(posterior: HyperparamPosterior, rng: np.random.Generator) -> dict:
    """One value per parameter, drawn in sorted name order so the draw does not
    depend on how the posterior's mapping happens to be ordered."""
    choice = {}
    for name in sorted(posterior.values):
        vals = posterior.values[name]
        p = posterior.probs[name]
        i = min(int(np.searchsorted(np.cumsum(p), rng.random(), side="right")), len(vals) - 1)
        choice[name] = vals[i]
    return choice

"""NumPy evaluation of a topology as a CNN, with hand-written backprop.

Every conv node sums same-padded convolutions of its in-edges (at each edge's
stride), adds its bias, applies ReLU and optionally a 2x2 max-pool.  The sink
sums fully-connected projections of its flattened in-edge feature maps.
Tensors are NHWC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .knowledge import WeightBundle, check_bundle
from .selection import Fitness
from .analysis import shortest_distance
from .topology import CONV, SINK, SOURCE, TopologyGraph, fmap_sizes


class BudgetExceeded(Exception):
    """Topology needs more parameters than the memory budget allows."""


@dataclass(frozen=True)
class TrainBudget:
    max_steps: int = 1_000_000
    max_params: int = 10_000_000
    epochs: int = 1

    def __post_init__(self):
        if self.max_steps < 0 or self.max_params < 1 or self.epochs < 1:
            raise ValueError("budget values must be positive")


@dataclass(frozen=True)
class TrainStats:
    steps_run: int
    final_train_loss: float
    train_acc: float
    val_acc: float
    wall_fraction_used: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- primitives ----------------------------------------------------------------

def _tap_range(size_out: int, size_in: int, stride: int, offset: int) -> tuple[int, int]:
    """Output rows r with 0 <= r*stride + offset < size_in."""
    lo = max(0, -(offset // stride))
    hi = min(size_out, (size_in - 1 - offset) // stride + 1)
    return lo, max(lo, hi)


def _pad_lo(size_in: int, size_out: int, k: int, stride: int) -> int:
    total = max((size_out - 1) * stride + k - size_in, 0)
    return total // 2


def conv2d(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Same-padded convolution (cross-correlation), NHWC x HWIO."""
    b, h, _, cin = x.shape
    k = w.shape[0]
    ho = h // stride
    pad = _pad_lo(h, ho, k, stride)
    if cin == 1 and k > 1:
        return _conv2d_cols(x, w, stride, pad, ho)
    out = np.zeros((b, ho, ho, w.shape[3]), dtype=np.result_type(x, w))
    for i in range(k):
        r0, r1 = _tap_range(ho, h, stride, i - pad)
        if r0 >= r1:
            continue
        xi0 = r0 * stride + i - pad
        for j in range(k):
            c0, c1 = _tap_range(ho, h, stride, j - pad)
            if c0 >= c1:
                continue
            xj0 = c0 * stride + j - pad
            patch = x[:, xi0: xi0 + (r1 - r0 - 1) * stride + 1: stride,
                      xj0: xj0 + (c1 - c0 - 1) * stride + 1: stride, :]
            out[:, r0:r1, c0:c1, :] += patch @ w[i, j]
    return out


def _conv2d_cols(x, w, stride, pad, ho):
    # single-channel inputs: one GEMM over gathered patches beats k*k outer products
    b, h, _, _ = x.shape
    k = w.shape[0]
    hi = max((ho - 1) * stride + k - h, 0) - pad
    xp = np.pad(x[..., 0], ((0, 0), (pad, hi), (pad, hi)))
    cols = np.empty((b, ho, ho, k, k), dtype=x.dtype)
    span = (ho - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + span:stride, j:j + span:stride]
    out = cols.reshape(-1, k * k) @ w.reshape(k * k, -1)
    return out.reshape(b, ho, ho, -1)


def conv2d_backward(x: np.ndarray, w: np.ndarray, stride: int, dout: np.ndarray,
                    need_dx: bool = True):
    """Gradients of :func:`conv2d` with respect to ``x`` and ``w``."""
    b, h, _, cin = x.shape
    k = w.shape[0]
    ho = dout.shape[1]
    pad = _pad_lo(h, ho, k, stride)
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for i in range(k):
        r0, r1 = _tap_range(ho, h, stride, i - pad)
        if r0 >= r1:
            continue
        xi0 = r0 * stride + i - pad
        rs = slice(xi0, xi0 + (r1 - r0 - 1) * stride + 1, stride)
        for j in range(k):
            c0, c1 = _tap_range(ho, h, stride, j - pad)
            if c0 >= c1:
                continue
            xj0 = c0 * stride + j - pad
            cs = slice(xj0, xj0 + (c1 - c0 - 1) * stride + 1, stride)
            g = dout[:, r0:r1, c0:c1, :]
            patch = x[:, rs, cs, :]
            dw[i, j] = patch.reshape(-1, cin).T @ g.reshape(-1, g.shape[-1])
            if need_dx:
                dx[:, rs, cs, :] += g @ w[i, j].T
    return dx, dw


def maxpool2(a: np.ndarray):
    """2x2 stride-2 max-pool; returns output and the argmax index per window."""
    b, h, w, c = a.shape
    win = a.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(dout: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    b, h, w, c = shape
    win = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(win, idx[..., None], dout[..., None], axis=-1)
    return win.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return softmax_xent(logits, labels)[0]


# -- network -------------------------------------------------------------------

def _check_batch(g: TopologyGraph, x: np.ndarray):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(g.input_shape):
        raise ValueError(f"batch shape {x.shape[1:]} does not match input {g.input_shape}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")


def _run(g, w, x, dropout=0.0, rng=None, keep=False):
    """Forward pass; with ``keep`` also returns the tape needed by backward."""
    fmap_sizes(g)
    outs = {}
    tape = {}
    logits = None
    for nid in g.topo_order():
        n = g.node(nid)
        if n.kind == SOURCE:
            outs[nid] = x
            continue
        if n.kind == CONV:
            z = None
            for e in g.in_edges(nid):
                t = conv2d(outs[e.src], w.kernels[e.id], e.stride)
                z = t if z is None else z + t
            z += w.biases[nid]
            a = np.maximum(z, 0)
            if n.pooled:
                out, idx = maxpool2(a)
            else:
                out, idx = a, None
            outs[nid] = out
            if keep:
                tape[nid] = (z > 0, idx, a.shape)
            continue
        # sink
        for e in g.in_edges(nid):
            feat = outs[e.src].reshape(x.shape[0], -1)
            mask = None
            if dropout > 0:
                mask = ((rng.random(feat.shape) >= dropout) / (1.0 - dropout)).astype(feat.dtype)
                feat = feat * mask
            t = feat @ w.kernels[e.id]
            logits = t if logits is None else logits + t
            if keep:
                tape[e.id] = (feat, mask)
    return logits, outs, tape


def forward(g: TopologyGraph, w: WeightBundle, x: np.ndarray) -> np.ndarray:
    """Logits of shape (B, num_classes)."""
    _check_batch(g, x)
    check_bundle(g, w)
    return _run(g, w, x)[0]


def node_outputs(g: TopologyGraph, w: WeightBundle, x: np.ndarray) -> dict[str, np.ndarray]:
    _check_batch(g, x)
    return _run(g, w, x)[1]


def _backprop(g, w, x, outs, tape, dlogits) -> WeightBundle:
    grads = w.zeros_like()
    dout = {}
    sink = g.sink.id
    for e in g.in_edges(sink):
        feat, mask = tape[e.id]
        grads.kernels[e.id] = feat.T @ dlogits
        d = dlogits @ w.kernels[e.id].T
        if mask is not None:
            d = d * mask
        d = d.reshape(outs[e.src].shape)
        dout[e.src] = dout[e.src] + d if e.src in dout else d
    for nid in reversed(g.topo_order()):
        n = g.node(nid)
        if n.kind != CONV or nid not in dout:
            continue
        active, idx, pre_shape = tape[nid]
        d = dout.pop(nid)
        if n.pooled:
            d = maxpool2_backward(d, idx, pre_shape)
        dz = d * active
        grads.biases[nid] = dz.sum(axis=(0, 1, 2))
        for e in g.in_edges(nid):
            from_source = g.node(e.src).kind == SOURCE
            dx, dw = conv2d_backward(outs[e.src], w.kernels[e.id], e.stride, dz, not from_source)
            grads.kernels[e.id] = dw
            if not from_source:
                dout[e.src] = dout[e.src] + dx if e.src in dout else dx
    return grads


def loss_and_grad(g, w, x, labels, dropout=0.0, rng=None):
    logits, outs, tape = _run(g, w, x, dropout, rng, keep=True)
    value, dlogits = softmax_xent(logits, labels)
    return value, _backprop(g, w, x, outs, tape, dlogits), logits


def backward(g: TopologyGraph, w: WeightBundle, x: np.ndarray, labels: np.ndarray) -> WeightBundle:
    """Gradient of the mean cross-entropy with respect to every tensor in ``w``."""
    _check_batch(g, x)
    check_bundle(g, w)
    return loss_and_grad(g, w, x, labels)[1]


def param_count(g: TopologyGraph) -> int:
    total = 0
    for e in g.edges:
        src = g.node(e.src)
        c_from = g.channels_of(e.src)
        if g.node(e.dst).kind == SINK:
            total += src.out_size * src.out_size * c_from * g.num_classes
        else:
            total += e.kernel * e.kernel * c_from * g.channels_of(e.dst)
    total += sum(n.channels for n in g.conv_nodes)
    return total


# -- optimisers ----------------------------------------------------------------

class _Optimizer:
    def __init__(self, name: str, lr: float):
        self.name = name
        self.lr = lr
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        for key, p in params.items():
            g = grads[key]
            if self.name == "sgd_momentum":
                m = self.m.get(key)
                m = g.copy() if m is None else 0.9 * m + g
                self.m[key] = m
                p -= self.lr * m
            elif self.name == "adam":
                b1, b2, eps = 0.9, 0.999, 1e-8
                m = self.m.get(key, 0.0)
                v = self.v.get(key, 0.0)
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.m[key], self.v[key] = m, v
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                p -= self.lr * mhat / (np.sqrt(vhat) + eps)
            elif self.name == "rmsprop":
                rho, eps = 0.9, 1e-8
                v = self.v.get(key, 0.0)
                v = rho * v + (1 - rho) * g * g
                self.v[key] = v
                p -= self.lr * g / (np.sqrt(v) + eps)
            else:
                raise ValueError(f"unknown optimizer {self.name!r}")


def _flat(bundle: WeightBundle) -> dict:
    d = {("k", k): v for k, v in bundle.kernels.items()}
    d.update({("b", k): v for k, v in bundle.biases.items()})
    return d


def predict(g: TopologyGraph, w: WeightBundle, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    preds = [
        _run(g, w, x[i: i + chunk])[0].argmax(axis=1) for i in range(0, x.shape[0], chunk)
    ]
    return np.concatenate(preds)


def accuracy(g: TopologyGraph, w: WeightBundle, x: np.ndarray, y: np.ndarray) -> float:
    if x.shape[0] == 0:
        raise ValueError("empty split")
    return float((predict(g, w, x) == y).mean())


def train(g: TopologyGraph, init_weights: WeightBundle, dataset, choice: dict,
          budget: TrainBudget, rng: np.random.Generator | None = None):
    """Minibatch training for at most ``budget.epochs`` epochs and ``max_steps`` steps.

    Returns the trained weights and TrainStats.  Raises BudgetExceeded when
    the topology is over the parameter budget.
    """
    if param_count(g) > budget.max_params:
        raise BudgetExceeded(f"{param_count(g)} parameters > budget {budget.max_params}")
    rng = rng if rng is not None else np.random.default_rng(0)
    check_bundle(g, init_weights)
    w = init_weights.copy()
    x, y = dataset.train_x, dataset.train_y
    if x.dtype != next(iter(w.kernels.values())).dtype:
        x = x.astype(next(iter(w.kernels.values())).dtype)
    bs = int(choice["batch_size"])
    dropout = float(choice.get("dropout", 0.0))
    opt = _Optimizer(choice["optimizer"], float(choice["learning_rate"]))
    params = _flat(w)
    steps = 0
    last_loss = float("nan")
    per_epoch = math.ceil(x.shape[0] / bs)
    for _ in range(budget.epochs):
        perm = rng.permutation(x.shape[0])
        for b in range(per_epoch):
            if steps >= budget.max_steps:
                break
            idx = perm[b * bs: (b + 1) * bs]
            last_loss, grads, _ = loss_and_grad(g, w, x[idx], y[idx], dropout, rng)
            opt.step(params, _flat(grads))
            steps += 1
    fit = evaluate_fitness(g, w, dataset)
    stats = TrainStats(
        steps_run=steps,
        final_train_loss=last_loss,
        train_acc=fit.train_acc,
        val_acc=fit.val_acc,
        wall_fraction_used=steps / budget.max_steps if budget.max_steps else 0.0,
    )
    return w, stats


def evaluate_fitness(g: TopologyGraph, w: WeightBundle, dataset) -> Fitness:
    dtype = next(iter(w.kernels.values())).dtype
    tr = accuracy(g, w, dataset.train_x.astype(dtype, copy=False), dataset.train_y)
    va = accuracy(g, w, dataset.val_x.astype(dtype, copy=False), dataset.val_y)
    return Fitness(tr, va)


# -- deterministic stand-in backend --------------------------------------------

SURROGATE_BASELINE_CHANNELS = 8


def surrogate_fitness(g: TopologyGraph) -> Fitness:
    """Cheap deterministic fitness that rewards bigger, wider, shallow-reaching graphs.

    raw = 0.25*(convs-1) + 0.1*(edges-2) + 0.3*mean(log2 channels)
          - 0.5*max(0, shortest_distance - 6)
    score = 1 / (1 + exp(-(raw - 3)))

    The minimal graph with 8 channels scores 1/(1+e^2.1) ~= 0.1091.
    """
    convs = g.conv_nodes
    mean_log_ch = sum(math.log2(n.channels) for n in convs) / len(convs)
    raw = (0.25 * (len(convs) - 1) + 0.1 * (len(g.edges) - 2) + 0.3 * mean_log_ch
           - 0.5 * max(0, shortest_distance(g) - 6))
    s = 1.0 / (1.0 + math.exp(-(raw - 3.0)))
    return Fitness(s, s)

"""Population store, individual lifecycle and the worker-pool evolution loop.

Each evaluation draws its randomness from a stream derived from the run seed
and the evaluation's birth index, so single-worker runs are bit-reproducible
and a restored run continues exactly where the snapshot left off.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import topology as topo
from .data import Dataset, make_synthetic, read_dataset
from .knowledge import (
    DEFAULT_SPACE,
    PAPER,
    HyperparamPosterior,
    WeightBundle,
    inherit_weights,
    init_posterior,
    init_weights,
    sample_hyperparams,
    update_posterior,
)
from .micronn import BudgetExceeded, TrainBudget, evaluate_fitness, param_count, surrogate_fitness, train
from .mutation import MutationRecord, ReproductionError, reproduce
from .selection import BOLTZMANN, Fitness, SelectionPolicy, admit, sample_parent

log = logging.getLogger(__name__)

PENDING = "Pending"
EVALUATED = "Evaluated"
DISCARDED = "Discarded"

MICRO = "micro"
SURROGATE = "surrogate"

SNAPSHOT_FORMAT = "evocnn-snapshot"
SNAPSHOT_VERSION = 1


class ConfigError(ValueError):
    pass


class SnapshotError(ValueError):
    """Snapshot file is corrupt or of an unknown version."""


@dataclass(frozen=True)
class RunConfig:
    capacity: int = 1000
    max_concurrent: int = 8
    lam: float = 0.01
    selection: str = BOLTZMANN
    backend: str = MICRO
    seed: int = 0
    max_evals: int = 2000
    stagnation_window: int = 500
    stagnation_eps: float = 1e-3
    max_steps: int = 1_000_000
    max_params: int = 200_000
    init_channels: int = 4
    inherit_mode: str = PAPER
    dtype: str = "float32"
    # synthetic data, used when dataset_path is None
    dataset_path: str | None = None
    data_classes: int = 4
    data_size: int = 16
    data_n: int = 512
    data_seed: int = 0
    space: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SPACE.items()})

    def __post_init__(self):
        positive = ("capacity", "max_concurrent", "lam", "max_evals", "stagnation_window",
                    "max_params", "init_channels", "data_n")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_steps < 0 or self.stagnation_eps < 0:
            raise ConfigError("max_steps and stagnation_eps must be non-negative")
        if self.backend not in (MICRO, SURROGATE):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        SelectionPolicy(self.lam, self.capacity, self.selection)

    @property
    def policy(self) -> SelectionPolicy:
        return SelectionPolicy(self.lam, self.capacity, self.selection)

    @property
    def budget(self) -> TrainBudget:
        return TrainBudget(max_steps=self.max_steps, max_params=self.max_params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class Individual:
    id: int
    parent_id: int | None
    generation: int
    topology: topo.TopologyGraph
    topology_hash: str
    hyperparams: dict
    fitness: Fitness | None = None
    mutation: MutationRecord | None = None
    status: str = PENDING
    eval_seq: int = -1

    def log_line(self) -> dict:
        f = self.fitness
        return {
            "id": self.id,
            "parent": self.parent_id,
            "gen": self.generation,
            "hash": self.topology_hash,
            "score": None if f is None else f.score,
            "train_acc": None if f is None else f.train_acc,
            "val_acc": None if f is None else f.val_acc,
            "hyperparams": self.hyperparams,
            "mutation": None if self.mutation is None else self.mutation.to_dict(),
            "status": self.status,
            "seq": self.eval_seq,
        }

    def to_dict(self) -> dict:
        d = self.log_line()
        d["topology"] = topo.to_dict(self.topology)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Individual":
        fit = None if d["train_acc"] is None else Fitness(d["train_acc"], d["val_acc"])
        return cls(
            id=d["id"],
            parent_id=d["parent"],
            generation=d["gen"],
            topology=topo.from_dict(d["topology"]),
            topology_hash=d["hash"],
            hyperparams=d["hyperparams"],
            fitness=fit,
            mutation=None if d["mutation"] is None else MutationRecord.from_dict(d["mutation"]),
            status=d["status"],
            eval_seq=d["seq"],
        )


class PopulationStore:
    """Bounded elite population plus the append-only evaluation log.

    Every read-modify-write goes through ``lock``.
    """

    def __init__(self, capacity: int, space=DEFAULT_SPACE):
        self.capacity = capacity
        self.members: list[Individual] = []
        self.weights: dict[int, WeightBundle | None] = {}
        self.eval_log: list[Individual] = []
        self.posterior: HyperparamPosterior = init_posterior(space)
        self.next_seq = 0
        self.next_birth = 0
        self.best_score = float("-inf")
        self.last_improvement = 0
        self.lock = threading.RLock()

    def claim_birth(self) -> int:
        with self.lock:
            b = self.next_birth
            self.next_birth += 1
            return b

    def refresh_posterior(self) -> HyperparamPosterior:
        with self.lock:
            self.posterior = update_posterior(self.posterior, (m.hyperparams for m in self.members))
            return self.posterior

    def pick_parent(self, policy: SelectionPolicy, rng: np.random.Generator):
        with self.lock:
            parent = sample_parent(self.members, policy, rng)
            return parent, self.weights.get(parent.id)

    def record(self, ind: Individual, weights: WeightBundle | None, eps: float) -> bool:
        """Assign the evaluation sequence number, log, and try to admit."""
        with self.lock:
            ind.eval_seq = self.next_seq
            self.next_seq += 1
            self.eval_log.append(ind)
            if ind.status != EVALUATED:
                return False
            before = {m.id for m in self.members}
            admitted = admit(self.members, ind, self.capacity)
            if admitted:
                self.weights[ind.id] = weights
                for gone in before - {m.id for m in self.members}:
                    self.weights.pop(gone, None)
            score = ind.fitness.score
            if score >= self.best_score + eps or self.best_score == float("-inf"):
                self.last_improvement = ind.eval_seq
            self.best_score = max(self.best_score, score)
            return admitted

    def best(self) -> Individual | None:
        with self.lock:
            return self.members[0] if self.members else None


# -- lifecycle -------------------------------------------------------------------

def step_rng(seed: int, birth: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(birth,)))


def load_dataset(config: RunConfig) -> Dataset | None:
    if config.backend != MICRO:
        return None
    if config.dataset_path:
        ds = read_dataset(config.dataset_path)
    else:
        ds = make_synthetic(config.data_classes, config.data_size, config.data_n, seed=config.data_seed)
    return ds.astype(config.dtype)


def _evaluate(ind: Individual, weights, config: RunConfig, dataset, rng):
    """Train (micro) or score (surrogate); returns the trained weights."""
    g = ind.topology
    if config.backend == SURROGATE:
        ind.fitness = surrogate_fitness(g)
        ind.status = EVALUATED
        return None
    if param_count(g) > config.max_params:
        ind.status = DISCARDED
        return None
    try:
        trained, stats = train(g, weights, dataset, ind.hyperparams, config.budget, rng)
    except BudgetExceeded:
        ind.status = DISCARDED
        return None
    ind.fitness = Fitness(stats.train_acc, stats.val_acc)
    ind.status = EVALUATED
    return trained


def seed_individual(store: PopulationStore, config: RunConfig, dataset) -> Individual:
    """Evaluate the minimal topology as generation 0."""
    birth = store.claim_birth()
    rng = step_rng(config.seed, birth)
    shape = dataset.input_shape if dataset is not None else (config.data_size, config.data_size, 1)
    classes = dataset.num_classes if dataset is not None else config.data_classes
    g = topo.new_minimal(shape, classes, channels=config.init_channels, rng=rng)
    hp = sample_hyperparams(store.refresh_posterior(), rng)
    ind = Individual(birth, None, 0, g, topo.canonical_hash(g), hp)
    w = init_weights(g, rng, config.dtype) if config.backend == MICRO else None
    trained = _evaluate(ind, w, config, dataset, rng)
    store.record(ind, trained, config.stagnation_eps)
    return ind


def worker_step(store: PopulationStore, config: RunConfig, rng: np.random.Generator | None = None,
                dataset: Dataset | None = None, birth: int | None = None) -> Individual:
    """One individual's lifecycle: select, mutate, pick hyperparameters,
    inherit weights, train and evaluate, then try to join the population."""
    if birth is None:
        birth = store.claim_birth()
    if rng is None:
        rng = step_rng(config.seed, birth)
    parent, parent_w = store.pick_parent(config.policy, rng)
    child_g, record = reproduce(parent.topology, rng)
    hp = sample_hyperparams(store.refresh_posterior(), rng)
    ind = Individual(
        id=birth,
        parent_id=parent.id,
        generation=parent.generation + 1,
        topology=child_g,
        topology_hash=topo.canonical_hash(child_g),
        hyperparams=hp,
        mutation=record,
    )
    weights = None
    if config.backend == MICRO:
        weights = inherit_weights(parent_w, parent.topology, child_g, record, rng, config.inherit_mode)
    trained = _evaluate(ind, weights, config, dataset, rng)
    store.record(ind, trained, config.stagnation_eps)
    return ind


@dataclass
class EvolutionLog:
    store: PopulationStore
    stop_reason: str
    config: RunConfig

    @property
    def entries(self) -> list[Individual]:
        return self.store.eval_log

    @property
    def seed_score(self) -> float:
        return self.store.eval_log[0].fitness.score

    @property
    def best(self) -> Individual:
        return self.store.best()

    def jsonl(self) -> str:
        return "".join(json.dumps(i.log_line(), sort_keys=True) + "\n" for i in self.entries)


def _should_stop(store: PopulationStore, config: RunConfig) -> str | None:
    with store.lock:
        if store.next_birth >= config.max_evals:
            return "max_evals"
        if store.next_seq - 1 - store.last_improvement >= config.stagnation_window:
            return "stagnation"
    return None


def run_evolution(config: RunConfig, dataset: Dataset | None = None,
                  store: PopulationStore | None = None,
                  progress: Callable[[Individual], None] | None = None) -> EvolutionLog:
    """Evolve until the evaluation cap or the stagnation rule fires.

    ``max_concurrent`` workers each loop over the individual lifecycle.  A
    failing evaluation is logged as discarded instead of ending the run.
    """
    if dataset is None:
        dataset = load_dataset(config)
    if store is None:
        store = PopulationStore(config.capacity, config.space)
        seed_individual(store, config, dataset)
    reason = ["max_evals"]

    def worker():
        while True:
            with store.lock:
                why = _should_stop(store, config)
                if why is not None:
                    reason[0] = why
                    return
                birth = store.claim_birth()
            try:
                ind = worker_step(store, config, dataset=dataset, birth=birth)
            except ReproductionError as exc:
                log.warning("birth %d: %s", birth, exc)
                continue
            if progress is not None:
                progress(ind)

    if config.max_concurrent == 1:
        worker()
    else:
        with ThreadPoolExecutor(config.max_concurrent) as pool:
            futures = [pool.submit(worker) for _ in range(config.max_concurrent)]
            for f in futures:
                f.result()
    return EvolutionLog(store, reason[0], config)


# -- persistence -----------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def _encode_weights(w: WeightBundle | None):
    if w is None:
        return None
    return {
        "kernels": {k: _encode_array(v) for k, v in sorted(w.kernels.items())},
        "biases": {k: _encode_array(v) for k, v in sorted(w.biases.items())},
    }


def _decode_weights(d) -> WeightBundle | None:
    if d is None:
        return None
    return WeightBundle(
        {k: _decode_array(v) for k, v in d["kernels"].items()},
        {k: _decode_array(v) for k, v in d["biases"].items()},
    )


def _canonical(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def snapshot_dict(store: PopulationStore) -> dict:
    with store.lock:
        payload = {
            "capacity": store.capacity,
            "members": [m.id for m in store.members],
            "eval_log": [i.to_dict() for i in store.eval_log],
            "weights": {str(k): _encode_weights(v) for k, v in sorted(store.weights.items())},
            "posterior": store.posterior.to_dict(),
            "next_seq": store.next_seq,
            "next_birth": store.next_birth,
            "best_score": store.best_score,
            "last_improvement": store.last_improvement,
        }
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "sha256": hashlib.sha256(_canonical(payload)).hexdigest(),
        "payload": payload,
    }


def snapshot(store: PopulationStore, path) -> None:
    Path(path).write_text(json.dumps(snapshot_dict(store), sort_keys=True))


def restore_dict(doc: dict) -> PopulationStore:
    if doc.get("format") != SNAPSHOT_FORMAT or doc.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError("unknown snapshot format or version")
    payload = doc["payload"]
    if hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("sha256"):
        raise SnapshotError("snapshot checksum mismatch")
    post = HyperparamPosterior.from_dict(payload["posterior"])
    store = PopulationStore(payload["capacity"], post.values)
    store.posterior = post
    store.eval_log = [Individual.from_dict(d) for d in payload["eval_log"]]
    by_id = {i.id: i for i in store.eval_log}
    store.members = [by_id[i] for i in payload["members"]]
    store.weights = {int(k): _decode_weights(v) for k, v in payload["weights"].items()}
    store.next_seq = payload["next_seq"]
    store.next_birth = payload["next_birth"]
    store.best_score = payload["best_score"]
    store.last_improvement = payload["last_improvement"]
    return store


def restore(path) -> PopulationStore:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"cannot read snapshot: {exc}") from exc
    try:
        return restore_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SnapshotError):
            raise
        raise SnapshotError(f"malformed snapshot: {exc}") from exc


def write_run(result: EvolutionLog, out_dir) -> dict[str, Path]:
    """Population log, topologies, snapshot, resolved config and best graph."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "log": out / "population.jsonl",
        "topologies": out / "topologies.jsonl",
        "snapshot": out / "snapshot.json",
        "config": out / "config.json",
        "best_json": out / "best.json",
        "best_dot": out / "best.dot",
    }
    paths["log"].write_text(result.jsonl())
    paths["topologies"].write_text("".join(
        json.dumps({"id": i.id, "topology": topo.to_dict(i.topology)}, sort_keys=True) + "\n"
        for i in result.entries
    ))
    snapshot(result.store, paths["snapshot"])
    paths["config"].write_text(json.dumps(result.config.to_dict(), indent=2, sort_keys=True) + "\n")
    best = result.best
    paths["best_json"].write_text(topo.to_json(best.topology, indent=2) + "\n")
    paths["best_dot"].write_text(topo.to_dot(best.topology))
    return paths


def load_run(path) -> list[Individual]:
    """Individuals of a written run (directory or its population.jsonl)."""
    p = Path(path)
    run_dir = p if p.is_dir() else p.parent
    log_path = run_dir / "population.jsonl" if p.is_dir() else p
    graphs = {}
    for line in (run_dir / "topologies.jsonl").read_text().splitlines():
        d = json.loads(line)
        graphs[d["id"]] = d["topology"]
    out = []
    for line in log_path.read_text().splitlines():
        d = json.loads(line)
        d["topology"] = graphs[d["id"]]
        out.append(Individual.from_dict(d))
    return out

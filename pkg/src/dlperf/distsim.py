"""Deterministic data-parallel SGD simulator.

Four coordination strategies share one numeric core and differ in how the
model is held, how gradients travel and what the clock charges:

``sync-allreduce``
    Replicated model; per round every worker computes a gradient, a ring
    all-reduce averages them and every replica applies the same step.
``sync-master``
    Same numerics; a central copy gathers the gradients over its link and
    broadcasts the new model.
``async-paramserver``
    Virtual-time event queue.  Workers pull, compute and push on their own
    schedule under a stale-synchronous bound; gradients of logical step t
    are averaged into model version t+1 once all have arrived.  A worker
    may start step t when version t - staleness_bound is available, so the
    bound 0 replays ``sync-master`` exactly.
``onebit-sgd``
    Sync schedule; every worker sends a sign-quantized gradient and keeps
    the quantization error as a residual for its next step.

Simulated time is kept in exact rationals so scaling ratios are exact.

Communication costs, with ``P`` parameters, ``x = bytes/bandwidth`` and
latency ``L`` (all per round, zero when ``n == 1`` for the sync strategies):

=================  ======================================  ===================
strategy           seconds                                 bytes on the wire
=================  ======================================  ===================
sync-allreduce     2(n-1)·(L + x/n) + overhead             2(n-1)·4P
sync-master        2·(L + n·x) + overhead                  n·4P up + n·4P down
async-paramserver  pull + push per step through one link   2·n·4P
onebit-sgd         as allreduce with the quantized payload 2(n-1)·q
=================  ======================================  ===================

where ``q = ceil(P/8) + 8·groups`` bytes (one sign bit per value, two
float32 scales per column group).
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import TRAIN, LabeledDataset
from .graph import NetworkGraph, loss_and_gradients
from .trainer import TrainConfig, sgd_step

STRATEGIES = ("sync-allreduce", "sync-master", "async-paramserver", "onebit-sgd")
SCALING_COLUMNS = ("n", "wall_seconds", "speedup", "efficiency", "bytes")


@dataclass(frozen=True)
class Strategy:
    name: str
    staleness_bound: int = 0

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {', '.join(STRATEGIES)}")
        if self.staleness_bound < 0:
            raise ValueError("staleness_bound must be >= 0")
        if self.name != "async-paramserver" and self.staleness_bound != 0:
            raise ValueError(f"{self.name} is synchronous; staleness_bound must be 0")


@dataclass(frozen=True)
class CostModel:
    seconds_per_sample: float = 0.0
    link_bandwidth: float = math.inf  # bytes/second
    link_latency: float = 0.0
    bytes_per_parameter: int = 4
    round_overhead: float = 0.0  # fixed seconds per exchange when n > 1
    compute_multipliers: tuple = ()  # optional per-worker slowdown factors

    def __post_init__(self):
        if self.seconds_per_sample < 0 or self.link_latency < 0 or self.round_overhead < 0:
            raise ValueError("cost model times must be non-negative")
        if not self.link_bandwidth > 0:
            raise ValueError("link_bandwidth must be > 0")
        if any(m <= 0 for m in self.compute_multipliers):
            raise ValueError("compute multipliers must be positive")

    @classmethod
    def zero_comm(cls, seconds_per_sample: float = 0.01) -> "CostModel":
        return cls(seconds_per_sample=seconds_per_sample)

    def transfer(self, n_bytes) -> Fraction:
        """Seconds a message of ``n_bytes`` occupies the link (latency excluded)."""
        if math.isinf(self.link_bandwidth) or n_bytes == 0:
            return Fraction(0)
        return Fraction(n_bytes) / Fraction(self.link_bandwidth)

    def multiplier(self, worker: int) -> Fraction:
        if worker < len(self.compute_multipliers):
            return Fraction(self.compute_multipliers[worker])
        return Fraction(1)

    def compute(self, worker: int, samples: int) -> Fraction:
        return Fraction(self.seconds_per_sample) * samples * self.multiplier(worker)


def efficiency(speedup: float, n_workers: int) -> float:
    """Parallel efficiency, ``speedup / n``."""
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    return speedup / n_workers


def onebit_payload_bytes(param_count: int, n_groups: int = 1) -> int:
    return math.ceil(param_count / 8) + 8 * n_groups


def comm_bytes(strategy, param_count: int, n_workers: int, rounds: int, n_groups: int = 1) -> int:
    """Closed-form bytes moved over ``rounds`` rounds (see module table)."""
    name = strategy.name if isinstance(strategy, Strategy) else strategy
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}")
    if rounds == 0:
        return 0
    full = 4 * param_count
    n = n_workers
    if name == "sync-allreduce":
        per_round = 2 * (n - 1) * full
    elif name == "sync-master":
        per_round = n * full + n * full
    elif name == "async-paramserver":
        per_round = 2 * n * full
    else:
        per_round = 2 * (n - 1) * onebit_payload_bytes(param_count, n_groups)
    return per_round * rounds


# -- gradient exchange -----------------------------------------------------------

def allreduce_avg(grads: list[dict]) -> dict:
    """Elementwise mean of gradient maps, summed in ascending worker order."""
    if not grads:
        raise ValueError("allreduce over an empty worker list")
    keys = list(grads[0])
    out = {}
    for k in keys:
        parts = []
        for j, _ in enumerate(grads[0][k]):
            acc = None
            for w, g in enumerate(grads):
                if k not in g:
                    raise ValueError(f"worker {w} is missing gradient {k!r}")
                t = g[k][j]
                if acc is not None and t.shape != acc.shape:
                    raise ValueError(f"worker {w}: gradient {k!r} shape {t.shape} != {acc.shape}")
                acc = t.copy() if acc is None else acc + t
            parts.append(acc / len(grads))
        out[k] = tuple(parts)
    return out


def _group_axis(shape) -> int | None:
    # fc weights D×M: one group per output column; conv K×C×kh×kw: per filter
    if len(shape) <= 1:
        return None
    if len(shape) == 2:
        return 1
    return 0


def quantize_1bit(grad, residual):
    """Sign quantization with error feedback.

    Returns ``(bits, scales, new_residual)``; ``bits`` is a boolean mask
    (True where ``grad + residual >= 0``), ``scales`` has one
    ``(neg_mean, pos_mean)`` row per column group.  Use
    :func:`dequantize_1bit` to reconstruct.
    """
    grad = np.asarray(grad, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if grad.shape != residual.shape:
        raise ValueError(f"grad shape {grad.shape} != residual shape {residual.shape}")
    g = grad + residual
    axis = _group_axis(g.shape)
    cols = g.reshape(-1, 1) if axis is None else np.moveaxis(g, axis, -1).reshape(-1, g.shape[axis])
    bits = cols >= 0
    pos_n = bits.sum(axis=0)
    neg_n = cols.shape[0] - pos_n
    pos_sum = np.where(bits, cols, 0.0).sum(axis=0)
    neg_sum = np.where(bits, 0.0, cols).sum(axis=0)
    pos_mean = np.divide(pos_sum, pos_n, out=np.zeros_like(pos_sum), where=pos_n > 0)
    neg_mean = np.divide(neg_sum, neg_n, out=np.zeros_like(neg_sum), where=neg_n > 0)
    scales = np.stack([neg_mean, pos_mean], axis=1)
    recon = _reconstruct(bits, scales, g.shape, axis)
    bits_out = bits.reshape(-1) if axis is None else np.moveaxis(
        bits.reshape(_moved_shape(g.shape, axis)), -1, axis
    )
    return bits_out.reshape(g.shape), scales, g - recon


def _moved_shape(shape, axis):
    rest = [d for i, d in enumerate(shape) if i != axis]
    return tuple(rest) + (shape[axis],)


def _reconstruct(cols_bits, scales, shape, axis):
    vals = np.where(cols_bits, scales[:, 1], scales[:, 0])
    if axis is None:
        return vals.reshape(shape)
    return np.moveaxis(vals.reshape(_moved_shape(shape, axis)), -1, axis)


def dequantize_1bit(bits, scales) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool)
    axis = _group_axis(bits.shape)
    cols = bits.reshape(-1, 1) if axis is None else np.moveaxis(bits, axis, -1).reshape(-1, bits.shape[axis])
    return _reconstruct(cols, np.asarray(scales), bits.shape, axis)


def column_groups(param_shapes) -> int:
    """Number of 1-bit scale groups for a parameter map ``id -> (w_shape, b_shape)``."""
    total = 0
    for shapes in param_shapes.values():
        for s in shapes:
            axis = _group_axis(s)
            total += 1 if axis is None else s[axis]
    return total


# -- problems --------------------------------------------------------------------

class GraphProblem:
    """A network plus the sample pool it trains on."""

    def __init__(self, net: NetworkGraph, dataset: LabeledDataset):
        if not net.is_parameterized:
            raise ValueError("network has no parameters")
        self.net = net.copy()
        idx = dataset.indices(TRAIN)
        self.images = dataset.images[idx]
        self.labels = dataset.labels[idx]
        self.initial_params = {k: (w.copy(), b.copy()) for k, (w, b) in net.params.items()}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def param_shapes(self):
        return {k: (w.shape, b.shape) for k, (w, b) in self.initial_params.items()}

    def gradients(self, params, indices):
        self.net.params = params
        loss, grads, _ = loss_and_gradients(self.net, self.images[indices], self.labels[indices])
        return loss, grads

    def loss(self, params) -> float:
        self.net.params = params
        total = 0.0
        for s in range(0, len(self), 256):
            idx = np.arange(s, min(s + 256, len(self)))
            total += loss_and_gradients(self.net, self.images[idx], self.labels[idx])[0] * idx.size
        return total / len(self)


class LeastSquaresProblem:
    """Linear regression ``y ≈ X·w + b`` under mean squared error / 2."""

    def __init__(self, X, y, seed: int = 0):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        rng = np.random.default_rng(seed)
        self.initial_params = {"linear": (rng.normal(0, 0.1, (self.X.shape[1], 1)), np.zeros(1))}

    @classmethod
    def synthetic(cls, n_samples: int = 512, dim: int = 10, noise: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n_samples, dim))
        w = rng.normal(size=dim)
        y = X @ w + 0.5 + noise * rng.normal(size=n_samples)
        return cls(X, y, seed=seed + 1)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def param_shapes(self):
        return {k: (w.shape, b.shape) for k, (w, b) in self.initial_params.items()}

    def gradients(self, params, indices):
        w, b = params["linear"]
        X, y = self.X[indices], self.y[indices]
        r = X @ w + b - y
        n = len(indices)
        return float(0.5 * np.mean(r * r)), {"linear": (X.T @ r / n, r.sum(axis=0) / n)}

    def loss(self, params) -> float:
        return self.gradients(params, np.arange(len(self)))[0]


def as_problem(model, dataset=None):
    if isinstance(model, NetworkGraph):
        if dataset is None:
            raise ValueError("a NetworkGraph needs a dataset")
        return GraphProblem(model, dataset)
    if hasattr(model, "gradients") and hasattr(model, "initial_params"):
        return model
    raise TypeError(f"cannot simulate training for {type(model).__name__}")


# -- clock -----------------------------------------------------------------------

def _sync_round_comm(strategy: str, n: int, P: int, groups: int, cost: CostModel) -> Fraction:
    if n == 1:
        return Fraction(0)
    lat = Fraction(cost.link_latency)
    full = cost.bytes_per_parameter * P
    overhead = Fraction(cost.round_overhead)
    if strategy == "sync-allreduce":
        return 2 * (n - 1) * (lat + cost.transfer(Fraction(full, n))) + overhead
    if strategy == "sync-master":
        return 2 * (lat + cost.transfer(n * full)) + overhead
    if strategy == "onebit-sgd":
        q = onebit_payload_bytes(P, groups)
        return 2 * (n - 1) * (lat + cost.transfer(Fraction(q, n))) + overhead
    raise ValueError(strategy)


@dataclass
class _AsyncSchedule:
    read_version: dict  # (worker, step) -> model version read
    apply_time: list  # time model version t+1 became available
    finish: Fraction


def _async_schedule(n: int, rounds: int, batch: int, bound: int, P: int, cost: CostModel) -> _AsyncSchedule:
    """Event-driven timeline for the parameter server; independent of numerics.

    Events are ordered by (time, worker id, sequence).  Pulls and pushes share
    the server link first-come first-served; applying an update costs
    ``round_overhead`` when there is more than one worker.
    """
    msg = cost.transfer(cost.bytes_per_parameter * P)
    lat = Fraction(cost.link_latency)
    overhead = Fraction(cost.round_overhead) if n > 1 else Fraction(0)
    link_free = Fraction(0)
    queue: list = []
    seq = 0

    def push_event(t, w, kind, payload=None):
        nonlocal seq
        heapq.heappush(queue, (t, w, seq, kind, payload))
        seq += 1

    def use_link(t):
        nonlocal link_free
        start = max(t, link_free)
        link_free = start + msg
        return link_free + lat

    version = 0  # number of applied steps
    arrived = [0] * rounds
    read_version = {}
    apply_time = []
    waiting: list = []  # workers blocked on the staleness bound: (step, worker, since)
    next_step = [0] * n
    for w in range(n):
        push_event(Fraction(0), w, "ready")
    finish = Fraction(0)
    while queue:
        t, w, _, kind, payload = heapq.heappop(queue)
        if kind == "ready":
            step = next_step[w]
            if step >= rounds:
                continue
            if version < step - bound:
                waiting.append((step, w))
                continue
            push_event(use_link(t), w, "pulled", (step, version))
        elif kind == "pulled":
            step, v = payload
            read_version[(w, step)] = v
            push_event(t + cost.compute(w, batch), w, "computed", step)
        elif kind == "computed":
            push_event(use_link(t), w, "pushed", payload)
        elif kind == "pushed":
            step = payload
            arrived[step] += 1
            next_step[w] = step + 1
            push_event(t, w, "ready")
            if arrived[step] == n:
                # the server event sorts before worker events at the same instant
                push_event(t + overhead, -1, "applied", step)
        elif kind == "applied":
            version += 1
            apply_time.append(t)
            finish = t
            still = []
            for s, ww in sorted(waiting, key=lambda x: x[1]):
                if version >= s - bound:
                    push_event(t, ww, "ready")
                else:
                    still.append((s, ww))
            waiting = still
    return _AsyncSchedule(read_version, apply_time, finish)


def simulated_seconds(strategy, n_workers: int, batch: int, rounds: int, param_count: int, cost: CostModel, n_groups: int = 1) -> Fraction:
    """Wall time charged by the clock model, without running any numerics."""
    s = strategy if isinstance(strategy, Strategy) else Strategy(strategy)
    if s.name == "async-paramserver":
        return _async_schedule(n_workers, rounds, batch, s.staleness_bound, param_count, cost).finish
    compute = max(cost.compute(w, batch) for w in range(n_workers))
    return rounds * (compute + _sync_round_comm(s.name, n_workers, param_count, n_groups, cost))


# -- reports ---------------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    sim_time: float
    loss: float
    mean_staleness: float = 0.0


@dataclass
class SimReport:
    strategy: str
    staleness_bound: int
    n_workers: int
    per_worker_batch: int
    rounds: int
    wall_seconds: float
    baseline_seconds: float
    speedup: float
    efficiency: float
    bytes_communicated: int
    final_loss: float
    max_staleness: int = 0
    trace: list[RoundRecord] = field(default_factory=list)
    final_params: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "staleness_bound": self.staleness_bound,
            "n_workers": self.n_workers,
            "per_worker_batch": self.per_worker_batch,
            "rounds": self.rounds,
            "wall_seconds": self.wall_seconds,
            "baseline_seconds": self.baseline_seconds,
            "speedup": self.speedup,
            "efficiency": self.efficiency,
            "bytes_communicated": self.bytes_communicated,
            "final_loss": self.final_loss,
            "max_staleness": self.max_staleness,
            "trace": [r.__dict__ for r in self.trace],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def write_scaling_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SCALING_COLUMNS)
        for r in reports:
            w.writerow([r.n_workers, repr(r.wall_seconds), repr(r.speedup), repr(r.efficiency), r.bytes_communicated])


# -- simulation ------------------------------------------------------------------

def _worker_batches(n_items: int, n_workers: int, batch: int, rnd: int):
    """Indices each worker uses in round ``rnd``; shards are round-robin by index."""
    out = []
    for w in range(n_workers):
        shard = np.arange(w, n_items, n_workers)
        pos = (rnd * batch + np.arange(batch)) % shard.size
        out.append(shard[pos])
    return out


def run_sim(
    model,
    dataset,
    cfg: TrainConfig,
    strategy,
    n_workers: int,
    cost: CostModel,
    rounds: int | None = None,
    track_loss: bool = False,
) -> SimReport:
    """Simulate data-parallel training.

    ``cfg.batch_size`` is the per-worker batch.  ``rounds`` defaults to
    ``cfg.epochs`` passes over the data at the global batch ``n·batch``.
    ``model`` is a :class:`NetworkGraph` (trained on ``dataset``'s train
    split) or a problem object such as :class:`LeastSquaresProblem`.
    Speedup is measured against the same strategy on one worker processing
    the whole global batch.
    """
    s = strategy if isinstance(strategy, Strategy) else Strategy(strategy)
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    problem = as_problem(model, dataset)
    n_items = len(problem)
    if n_items < n_workers:
        raise ValueError(f"{n_items} samples cannot be sharded over {n_workers} workers")
    b = cfg.batch_size
    if rounds is None:
        rounds = max(1, cfg.epochs * (n_items // (n_workers * b)))
    shapes = problem.param_shapes
    P = sum(math.prod(ws) + math.prod(bs) for ws, bs in shapes.values())
    groups = column_groups(shapes)

    params = {k: (w.copy(), bb.copy()) for k, (w, bb) in problem.initial_params.items()}
    velocity: dict = {}
    trace: list[RoundRecord] = []
    max_stale = 0

    if s.name == "async-paramserver":
        sched = _async_schedule(n_workers, rounds, b, s.staleness_bound, P, cost)
        wall = sched.finish
        versions = {0: params}
        for t in range(rounds):
            grads, losses, stale = [], [], []
            for w, idx in enumerate(_worker_batches(n_items, n_workers, b, t)):
                v = sched.read_version[(w, t)]
                loss, g = problem.gradients(versions[v], idx)
                grads.append(g)
                losses.append(loss)
                stale.append(t - v)
            max_stale = max(max_stale, max(stale))
            params, velocity = sgd_step(versions[t], allreduce_avg(grads), velocity, cfg)
            versions[t + 1] = params
            for old in [k for k in versions if k < t + 1 - s.staleness_bound]:
                del versions[old]
            trace.append(RoundRecord(t + 1, float(sched.apply_time[t]), float(np.mean(losses)), float(np.mean(stale))))
    else:
        per_round = max(cost.compute(w, b) for w in range(n_workers))
        per_round += _sync_round_comm(s.name, n_workers, P, groups, cost)
        wall = rounds * per_round
        residuals = [dict() for _ in range(n_workers)]
        for t in range(rounds):
            grads, losses = [], []
            for w, idx in enumerate(_worker_batches(n_items, n_workers, b, t)):
                loss, g = problem.gradients(params, idx)
                losses.append(loss)
                if s.name == "onebit-sgd":
                    g = _onebit_exchange(g, residuals[w])
                grads.append(g)
            params, velocity = sgd_step(params, allreduce_avg(grads), velocity, cfg)
            trace.append(RoundRecord(t + 1, float((t + 1) * per_round), float(np.mean(losses))))

    baseline = simulated_seconds(s, 1, b * n_workers, rounds, P, cost, groups)
    if wall == 0:
        speedup = Fraction(n_workers) if baseline == 0 else Fraction(0)
    else:
        speedup = baseline / wall
    eff = speedup / n_workers
    bytes_total = 0 if n_workers == 1 and s.name != "async-paramserver" else comm_bytes(s, P, n_workers, rounds, groups)
    final_loss = problem.loss(params) if track_loss or isinstance(problem, LeastSquaresProblem) else float("nan")
    return SimReport(
        strategy=s.name,
        staleness_bound=s.staleness_bound,
        n_workers=n_workers,
        per_worker_batch=b,
        rounds=rounds,
        wall_seconds=float(wall),
        baseline_seconds=float(baseline),
        speedup=float(speedup),
        efficiency=float(eff),
        bytes_communicated=int(bytes_total),
        final_loss=float(final_loss),
        max_staleness=int(max_stale),
        trace=trace,
        final_params=params,
    )


def _onebit_exchange(grads: dict, residual: dict) -> dict:
    out = {}
    for k, pair in grads.items():
        res = residual.get(k) or tuple(np.zeros_like(g) for g in pair)
        parts, new_res = [], []
        for g, r in zip(pair, res):
            bits, scales, nr = quantize_1bit(g, r)
            parts.append(dequantize_1bit(bits, scales))
            new_res.append(nr)
        out[k] = tuple(parts)
        residual[k] = tuple(new_res)
    return out


def scaling_sweep(model, dataset, cfg: TrainConfig, strategy, worker_counts, cost: CostModel,
                  global_batch: int, rounds: int, numerics: bool = True) -> list[SimReport]:
    """Strong-scaling sweep: fixed global batch split evenly over each ``n``."""
    reports = []
    for n in worker_counts:
        if global_batch % n:
            raise ValueError(f"global batch {global_batch} is not divisible by {n} workers")
        c = TrainConfig(
            learning_rate=cfg.learning_rate, momentum=cfg.momentum, batch_size=global_batch // n,
            epochs=cfg.epochs, seed=cfg.seed, freeze=cfg.freeze,
        )
        if numerics:
            reports.append(run_sim(model, dataset, c, strategy, n, cost, rounds=rounds))
        else:
            reports.append(clock_report(strategy, n, global_batch // n, rounds, _param_count(model), cost))
    return reports


def _param_count(model) -> int:
    if isinstance(model, NetworkGraph):
        return model.param_count()
    return int(model)


def clock_report(strategy, n_workers: int, batch: int, rounds: int, param_count: int, cost: CostModel, n_groups: int = 1) -> SimReport:
    """Timing-only report from the cost model (no gradients computed)."""
    s = strategy if isinstance(strategy, Strategy) else Strategy(strategy)
    wall = simulated_seconds(s, n_workers, batch, rounds, param_count, cost, n_groups)
    base = simulated_seconds(s, 1, batch * n_workers, rounds, param_count, cost, n_groups)
    speedup = Fraction(n_workers) if wall == 0 else base / wall
    bytes_total = 0 if n_workers == 1 and s.name != "async-paramserver" else comm_bytes(s, param_count, n_workers, rounds, n_groups)
    return SimReport(
        strategy=s.name, staleness_bound=s.staleness_bound, n_workers=n_workers, per_worker_batch=batch,
        rounds=rounds, wall_seconds=float(wall), baseline_seconds=float(base), speedup=float(speedup),
        efficiency=float(speedup / n_workers), bytes_communicated=int(bytes_total), final_loss=float("nan"),
    )

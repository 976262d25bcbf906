"""Mini-batch SGD with per-epoch benchmark instrumentation."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TRAIN, VAL, LabeledDataset
from .graph import NetworkGraph, forward, loss_and_gradients
from .tensor import softmax

REPORT_COLUMNS = ("epoch", "loss", "top1", "top5", "seconds")


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    freeze: frozenset = frozenset()
    weight_decay: float = 0.0
    lr_decay_every: int = 0  # step-decay period in epochs; 0 keeps the rate fixed
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        self.freeze = frozenset(self.freeze)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def rate_at(self, epoch: int) -> float:
        """Learning rate for 1-indexed ``epoch``."""
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    top1: float
    top5: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    peak_accuracy: float = 0.0
    epochs_to_peak: int = 0
    total_seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def accuracies(self) -> list[float]:
        return [e.top1 for e in self.epochs]

    def to_dict(self) -> dict:
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "peak_accuracy": self.peak_accuracy,
            "epochs_to_peak": self.epochs_to_peak,
            "total_seconds": self.total_seconds,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.loss), repr(e.top1), repr(e.top5), f"{e.seconds:.3f}"])


def peak_of(accuracies) -> tuple[float, int]:
    """Max accuracy and the first 1-indexed epoch reaching it."""
    accs = list(accuracies)
    if not accs:
        return 0.0, 0
    best = max(accs)
    return best, accs.index(best) + 1


def sgd_step(params, grads, velocity, cfg: TrainConfig, learning_rate: float | None = None):
    """Momentum SGD: ``v <- momentum·v - lr·g``; ``w <- w + v``.

    ``params``/``grads``/``velocity`` map layer id to ``(weights, bias)``.
    Updated dicts are returned; inputs are not modified.  Layers in
    ``cfg.freeze`` keep both parameters and velocity.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    new_params, new_vel = {}, {}
    for lid, pair in params.items():
        if lid in cfg.freeze or lid not in grads:
            new_params[lid] = pair
            new_vel[lid] = velocity.get(lid, tuple(np.zeros_like(p) for p in pair))
            continue
        g_pair = grads[lid]
        v_pair = velocity.get(lid) or tuple(np.zeros_like(p) for p in pair)
        out_p, out_v = [], []
        for p, g, v in zip(pair, g_pair, v_pair):
            if p.shape != g.shape or p.shape != v.shape:
                raise ValueError(
                    f"layer {lid!r}: shape mismatch params {p.shape}, grads {g.shape}, velocity {v.shape}"
                )
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            v2 = cfg.momentum * v - lr * g
            out_v.append(v2)
            out_p.append(p + v2)
        new_params[lid] = tuple(out_p)
        new_vel[lid] = tuple(out_v)
    return new_params, new_vel


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, k: int) -> float:
    if len(labels) == 0:
        return 0.0
    k = min(k, probs.shape[1])
    # stable ordering: higher confidence first, lower class id on ties
    order = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == labels[:, None], axis=1)))


def predict_dataset(net: NetworkGraph, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = [softmax(forward(net, images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, net.class_count))
    return np.concatenate(out)


def evaluate_split(net: NetworkGraph, dataset: LabeledDataset, part: str = VAL):
    idx = dataset.indices(part)
    if idx.size == 0:
        idx = dataset.indices(TRAIN)
    probs = predict_dataset(net, dataset.images[idx])
    labels = dataset.labels[idx]
    return topk_accuracy(probs, labels, 1), topk_accuracy(probs, labels, 5)


def train(net: NetworkGraph, dataset: LabeledDataset, cfg: TrainConfig, progress=None) -> TrainReport:
    """Train ``net`` in place on the train split; validate after every epoch.

    Shuffling uses ``numpy.random.default_rng(cfg.seed + epoch)``; dropout
    layers draw from a generator seeded per (seed, epoch, batch).
    """
    train_idx = dataset.indices(TRAIN)
    if len(dataset) == 0 or train_idx.size == 0:
        raise ValueError("empty dataset")
    if dataset.class_count != net.class_count:
        raise ValueError(f"dataset has {dataset.class_count} classes, net expects {net.class_count}")
    if cfg.batch_size > train_idx.size:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds {train_idx.size} training samples")
    if not net.is_parameterized:
        net.initialize(cfg.seed)
    params = dict(net.params)
    velocity: dict = {}
    report = TrainReport()
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng(cfg.seed + epoch)
        order = train_idx[rng.permutation(train_idx.size)]
        lr = cfg.rate_at(epoch)
        loss_sum = 0.0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            batch = order[start : start + cfg.batch_size]
            net.params = params
            try:
                loss, grads, _ = loss_and_gradients(
                    net, dataset.images[batch], dataset.labels[batch], training=True, seed=(cfg.seed, epoch, b)
                )
            except ValueError as exc:
                if "non-finite" not in str(exc):
                    raise
                raise NumericError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from None
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss_sum += loss * batch.size
            params, velocity = sgd_step(params, grads, velocity, cfg, lr)
        net.params = params
        top1, top5 = evaluate_split(net, dataset, VAL)
        seconds = time.perf_counter() - t0
        report.epochs.append(EpochRecord(epoch, loss_sum / order.size, top1, top5, seconds))
        if progress is not None:
            progress(report.epochs[-1])
    report.total_seconds = time.perf_counter() - t_start
    report.peak_accuracy, report.epochs_to_peak = peak_of(report.accuracies)
    return report


def fine_tune(pretrained: NetworkGraph, new_class_count: int, cfg: TrainConfig) -> NetworkGraph:
    """Copy ``pretrained`` and swap its final fc for a fresh ``new_class_count`` head.

    The head is initialized from ``cfg.seed``; every other parameter is copied
    bit for bit.  Freezing happens later, in :func:`train`, via ``cfg.freeze``.
    """
    if new_class_count < 2:
        raise ValueError(f"new_class_count must be >= 2, got {new_class_count}")
    if not pretrained.is_parameterized:
        raise ValueError("pretrained network has no parameters")
    head = [l for l in pretrained.layers if l.kind == "fc" and not l.aux][-1]
    net = pretrained.copy()
    net.layer(head.id).params["out_features"] = new_class_count
    old = {k: v for k, v in net.params.items() if k != head.id}
    net.params = {}
    net.class_count = new_class_count
    net.validate()
    fresh = NetworkGraph(net.layers, net.input_shape, new_class_count, net.name).initialize(cfg.seed)
    old[head.id] = fresh.params[head.id]
    net.params = {l.id: old[l.id] for l in net.weighted_layers}
    net.validate()
    return net

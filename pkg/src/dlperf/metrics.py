"""Classification metrics: top-k, one-vs-rest precision/recall/F1, per-class accuracy."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _ranked_ids(pred) -> list[int]:
    if hasattr(pred, "class_ids"):
        return list(pred.class_ids)
    return [int(c) for c in pred]


@dataclass
class EvalReport:
    n: int
    top1: float
    top5: float
    precision: dict
    recall: dict
    f1: dict
    macro_f1: float
    mean_seconds: float
    per_class_accuracy: dict
    overall_accuracy: float
    label_granularity: str = "fine"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): v for k, v in d.items()}

        return {
            "label_granularity": self.label_granularity,
            "n": self.n,
            "top1": self.top1,
            "top5": self.top5,
            "precision": keyed(self.precision),
            "recall": keyed(self.recall),
            "f1": keyed(self.f1),
            "macro_f1": self.macro_f1,
            "mean_seconds": self.mean_seconds,
            "per_class_accuracy": keyed(self.per_class_accuracy),
            "overall_accuracy": self.overall_accuracy,
            **self.extra,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path, class_names=None) -> None:
        """Per-class table: class, name, support-based accuracy, P, R, F1."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("class", "name", "accuracy", "precision", "recall", "f1"))
            for c in sorted(self.f1):
                name = class_names[c] if class_names is not None and c < len(class_names) else ""
                acc = self.per_class_accuracy.get(c, "")
                w.writerow([c, name, acc, self.precision[c], self.recall[c], self.f1[c]])


def per_class_accuracy(predictions, labels) -> tuple[dict, float]:
    """``({class: correct/total}, overall)`` over classes present in ``labels``."""
    labels = [int(l) for l in labels]
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    correct: dict = {}
    total: dict = {}
    for pred, y in zip(predictions, labels):
        ids = _ranked_ids(pred)
        total[y] = total.get(y, 0) + 1
        correct[y] = correct.get(y, 0) + int(bool(ids) and ids[0] == y)
    table = {c: correct[c] / total[c] for c in sorted(total)}
    overall = sum(correct.values()) / len(labels) if labels else 0.0
    return table, overall


def evaluate(predictions, labels, timings=None, label_granularity: str = "fine") -> EvalReport:
    """Score ranked predictions (``Prediction`` objects or class-id lists)."""
    labels = [int(l) for l in labels]
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if timings is not None and len(timings) != len(labels):
        raise ValueError(f"{len(timings)} timings for {len(labels)} labels")
    ranked = [_ranked_ids(p) for p in predictions]
    n = len(labels)
    top1 = [r[0] if r else -1 for r in ranked]
    hit1 = sum(t == y for t, y in zip(top1, labels))
    hit5 = sum(y in r[:5] for r, y in zip(ranked, labels))
    classes = sorted(set(labels) | {t for t in top1 if t >= 0})
    precision, recall, f1 = {}, {}, {}
    for c in classes:
        tp = sum(t == c and y == c for t, y in zip(top1, labels))
        fp = sum(t == c and y != c for t, y in zip(top1, labels))
        fn = sum(t != c and y == c for t, y in zip(top1, labels))
        precision[c] = tp / (tp + fp) if tp + fp else 0.0
        recall[c] = tp / (tp + fn) if tp + fn else 0.0
        f1[c] = f1_score(precision[c], recall[c])
    table, overall = per_class_accuracy(ranked, labels)
    return EvalReport(
        n=n,
        top1=hit1 / n if n else 0.0,
        top5=hit5 / n if n else 0.0,
        precision=precision,
        recall=recall,
        f1=f1,
        macro_f1=float(np.mean(list(f1.values()))) if f1 else 0.0,
        mean_seconds=float(np.mean(timings)) if timings is not None and n else 0.0,
        per_class_accuracy=table,
        overall_accuracy=overall,
        label_granularity=label_granularity,
    )

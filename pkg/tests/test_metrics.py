import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlperf.metrics import evaluate, f1_score, per_class_accuracy


def _from_confusion(matrix):
    """Expand a confusion matrix (rows true, columns predicted) into label/prediction lists."""
    labels, preds = [], []
    for t, row in enumerate(matrix):
        for p, count in enumerate(row):
            labels += [t] * count
            preds += [[p]] * count
    return preds, labels


def test_toy_confusion_matrix():
    preds, labels = _from_confusion([[2, 1, 0], [0, 2, 0], [1, 0, 1]])
    rep = evaluate(preds, labels)
    assert rep.n == 7
    assert rep.top1 == pytest.approx(5 / 7)
    assert [rep.precision[c] for c in range(3)] == pytest.approx([2 / 3, 2 / 3, 1.0])
    assert [rep.recall[c] for c in range(3)] == pytest.approx([2 / 3, 1.0, 0.5])
    assert [rep.f1[c] for c in range(3)] == pytest.approx([2 / 3, 0.8, 2 / 3])
    assert rep.macro_f1 == pytest.approx((2 / 3 + 0.8 + 2 / 3) / 3)


def test_f1_edge_cases():
    assert f1_score(0.0, 0.0) == 0.0
    assert f1_score(1.0, 1.0) == 1.0
    assert f1_score(0.5, 1.0) == pytest.approx(2 / 3)


def test_perfect_predictions():
    labels = [0, 1, 2, 2, 1]
    rep = evaluate([[y, (y + 1) % 3] for y in labels], labels)
    assert rep.top1 == rep.top5 == rep.macro_f1 == rep.overall_accuracy == 1.0
    assert all(v == 1.0 for v in rep.precision.values())


def test_top5_counts_later_ranks():
    rep = evaluate([[3, 2, 1, 0, 4, 5], [3, 2, 1, 0, 4, 5]], [4, 5])
    assert rep.top1 == 0.0 and rep.top5 == 0.5


def test_predicted_only_class_included():
    rep = evaluate([[9], [0]], [0, 0])
    assert rep.precision[9] == 0.0 and rep.recall[9] == 0.0
    assert rep.recall[0] == 0.5 and rep.precision[0] == 1.0


def test_per_class_accuracy_example():
    table, overall = per_class_accuracy([[0], [1], [1], [2]], [0, 0, 1, 2])
    assert table == {0: 0.5, 1: 1.0, 2: 1.0}
    assert overall == 0.75


def test_length_mismatch():
    with pytest.raises(ValueError):
        evaluate([[0]], [0, 1])
    with pytest.raises(ValueError):
        evaluate([[0]], [0], timings=[0.1, 0.2])
    with pytest.raises(ValueError):
        per_class_accuracy([[0], [1]], [0])


def _random_case(seed, n, c):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, c, size=n).tolist()
    preds = [rng.permutation(c).tolist() for _ in range(n)]
    return preds, labels


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40), c=st.integers(2, 7))
def test_metric_invariants(seed, n, c):
    preds, labels = _random_case(seed, n, c)
    rep = evaluate(preds, labels)
    assert 0.0 <= rep.top1 <= rep.top5 <= 1.0
    assert rep.overall_accuracy == pytest.approx(rep.top1)
    for k in rep.f1:
        p, r, f = rep.precision[k], rep.recall[k], rep.f1[k]
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
        if p > 0 and r > 0:
            assert 1 / f == pytest.approx((1 / p + 1 / r) / 2)
    # accuracy weighted by support equals the overall rate
    table, overall = per_class_accuracy(preds, labels)
    support = {k: labels.count(k) for k in table}
    assert sum(table[k] * support[k] for k in table) / n == pytest.approx(overall)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 30), c=st.integers(2, 6))
def test_macro_f1_permutation_invariant(seed, n, c):
    preds, labels = _random_case(seed, n, c)
    perm = np.random.default_rng(seed + 1).permutation(c)
    renamed = evaluate([[int(perm[p]) for p in r] for r in preds], [int(perm[y]) for y in labels])
    assert renamed.macro_f1 == pytest.approx(evaluate(preds, labels).macro_f1)
    order = np.random.default_rng(seed + 2).permutation(n)
    shuffled = evaluate([preds[i] for i in order], [labels[i] for i in order])
    assert shuffled.macro_f1 == pytest.approx(evaluate(preds, labels).macro_f1)


def test_evaluation_is_pure():
    preds, labels = _random_case(3, 20, 4)
    before = [list(p) for p in preds], list(labels)
    a = evaluate(preds, labels).to_dict()
    assert (preds, labels) == before
    assert a == evaluate(preds, labels).to_dict()


def test_report_files(tmp_path):
    preds, labels = _from_confusion([[2, 1, 0], [0, 2, 0], [1, 0, 1]])
    rep = evaluate(preds, labels, timings=[0.5] * 7)
    assert rep.mean_seconds == 0.5
    rep.write_json(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["label_granularity"] == "fine" and data["f1"]["1"] == pytest.approx(0.8)
    rep.write_csv(tmp_path / "r.csv", ["a", "b", "c"])
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["name"] for r in rows] == ["a", "b", "c"]
    assert float(rows[2]["accuracy"]) == 0.5

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlperf.architectures import build_architecture
from dlperf.data import LabeledDataset, split, synth_generate
from dlperf.trainer import (
    REPORT_COLUMNS,
    NumericError,
    TrainConfig,
    fine_tune,
    peak_of,
    sgd_step,
    topk_accuracy,
    train,
)


def _p(w):
    return {"l": (np.array([w]), np.array([0.0]))}


def test_sgd_plain_step():
    params, _ = sgd_step(_p(1.0), _p(0.5), {}, TrainConfig(learning_rate=0.1, momentum=0.0))
    assert params["l"][0][0] == pytest.approx(0.95)


def test_sgd_zero_grad_scales_velocity():
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9)
    vel = {"l": (np.array([2.0]), np.array([0.0]))}
    params, new_vel = sgd_step(_p(1.0), _p(0.0), vel, cfg)
    assert params["l"][0][0] == pytest.approx(1.0 + 1.8)
    assert new_vel["l"][0][0] == pytest.approx(1.8)
    # g = 0 with v = 0: nothing moves
    params, _ = sgd_step(_p(1.0), _p(0.0), {}, cfg)
    assert params["l"][0][0] == 1.0


def test_sgd_two_momentum_steps():
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9)
    p, v = sgd_step(_p(0.0), _p(1.0), {}, cfg)
    assert p["l"][0][0] == pytest.approx(-0.1)
    p, v = sgd_step(p, _p(1.0), v, cfg)
    assert v["l"][0][0] == pytest.approx(-0.19)
    assert p["l"][0][0] == pytest.approx(-0.29)


def test_sgd_frozen_untouched():
    cfg = TrainConfig(learning_rate=0.1, freeze={"l"})
    p, _ = sgd_step(_p(1.0), _p(5.0), {}, cfg)
    assert p["l"][0][0] == 1.0


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        sgd_step(_p(1.0), {"l": (np.zeros(2), np.zeros(1))}, {}, TrainConfig())


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"momentum": 1.0}, {"batch_size": 0}, {"epochs": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_step_decay_off_by_default():
    cfg = TrainConfig(learning_rate=0.1)
    assert cfg.rate_at(1) == cfg.rate_at(100) == 0.1
    decayed = TrainConfig(learning_rate=0.1, lr_decay_every=10, lr_decay_factor=0.5)
    assert decayed.rate_at(10) == 0.1 and decayed.rate_at(11) == 0.05


def test_peak_of():
    assert peak_of([0.50, 0.90, 0.94, 0.94]) == (0.94, 3)


def test_topk_ties_and_bounds():
    probs = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    labels = np.array([1, 0])
    assert topk_accuracy(probs, labels, 1) == 0.0  # tie resolves to class 0
    assert topk_accuracy(probs, labels, 2) == 0.5
    assert topk_accuracy(probs, labels, 3) == 1.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 8))
def test_topk_monotone_in_k(seed, c):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(c), size=20)
    labels = rng.integers(0, c, size=20)
    accs = [topk_accuracy(probs, labels, k) for k in range(1, c + 1)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0


@pytest.fixture(scope="module")
def small_data():
    return split(synth_generate(4, 16, 32, seed=11), 0.25, seed=0)


def _quick_cfg(**kw):
    return TrainConfig(**{"learning_rate": 0.01, "batch_size": 16, "epochs": 2, "seed": 3, **kw})


def test_train_deterministic(small_data):
    a = train(build_architecture("mini-alexnet", 4, seed=1), small_data, _quick_cfg())
    b = train(build_architecture("mini-alexnet", 4, seed=1), small_data, _quick_cfg())
    assert a.losses == b.losses and a.accuracies == b.accuracies


def test_train_report_fields(small_data, tmp_path):
    rep = train(build_architecture("mini-alexnet", 4, seed=1), small_data, _quick_cfg())
    assert [e.epoch for e in rep.epochs] == [1, 2]
    assert rep.peak_accuracy == max(rep.accuracies)
    assert rep.epochs_to_peak == rep.accuracies.index(rep.peak_accuracy) + 1
    assert rep.total_seconds >= sum(e.seconds for e in rep.epochs) - 1e-3
    assert all(e.top1 <= e.top5 for e in rep.epochs)
    rep.write_csv(tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)
    rep.write_json(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["epochs_to_peak"] == rep.epochs_to_peak


def test_tiny_learning_rate_keeps_model(small_data):
    net = build_architecture("mini-alexnet", 4, seed=1)
    before = {k: (w.copy(), b.copy()) for k, (w, b) in net.params.items()}
    rep = train(net, small_data, _quick_cfg(learning_rate=1e-20, epochs=3))
    for k, (w, b) in net.params.items():
        np.testing.assert_allclose(w, before[k][0], rtol=0, atol=1e-15)
        np.testing.assert_allclose(b, before[k][1], rtol=0, atol=1e-15)
    assert max(rep.losses) - min(rep.losses) < 1e-12


def test_frozen_layers_bit_identical(small_data):
    net = build_architecture("mini-alexnet", 4, seed=1)
    before = {k: w.copy() for k, (w, _) in net.params.items()}
    frozen = {"conv1", "conv2", "conv3", "fc4"}
    train(net, small_data, _quick_cfg(freeze=frozen))
    for k in frozen:
        np.testing.assert_array_equal(net.params[k][0], before[k])
    assert not np.array_equal(net.params["fc5"][0], before["fc5"])


def test_train_errors(small_data):
    net = build_architecture("mini-alexnet", 3, seed=1)
    with pytest.raises(ValueError, match="classes"):
        train(net, small_data, _quick_cfg())
    empty = LabeledDataset(np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=int), ["a", "b", "c"])
    with pytest.raises(ValueError, match="empty"):
        train(net, empty, _quick_cfg())


def test_non_finite_loss_names_epoch_and_batch(small_data):
    net = build_architecture("mini-alexnet", 4, seed=1)
    bad = small_data.subset(np.arange(len(small_data)))
    bad.images[bad.indices("train")[-1], 0, 0, 0] = np.inf
    with pytest.raises(NumericError, match=r"epoch 1, batch \d"):
        train(net, bad, _quick_cfg())


def test_fine_tune_same_class_count_only_head_changes():
    pre = build_architecture("mini-alexnet", 4, seed=1)
    net = fine_tune(pre, 4, TrainConfig(seed=9))
    for k in ("conv1", "conv2", "conv3", "fc4"):
        np.testing.assert_array_equal(net.params[k][0], pre.params[k][0])
    assert not np.array_equal(net.params["fc5"][0], pre.params["fc5"][0])
    with pytest.raises(ValueError):
        fine_tune(pre, 1, TrainConfig())


def test_fine_tune_freeze_all_but_final(small_data):
    pre = build_architecture("mini-alexnet", 3, seed=1)
    net = fine_tune(pre, 4, TrainConfig(seed=2))
    assert net.class_count == 4 and net.params["fc5"][0].shape == (64, 4)
    train(net, small_data, _quick_cfg(freeze={"conv1", "conv2", "conv3", "fc4"}))
    for k in ("conv1", "conv2", "conv3", "fc4"):
        np.testing.assert_array_equal(net.params[k][0], pre.params[k][0])


@pytest.mark.slow
def test_fine_tuned_beats_scratch_after_one_epoch():
    pre_data = split(synth_generate(8, 100, 32, seed=21), 0.2, seed=0)
    pre = build_architecture("mini-alexnet", 8, seed=21)
    train(pre, pre_data, _quick_cfg(epochs=12, batch_size=32, seed=21))
    target = split(synth_generate(49, 20, 32, seed=22), 0.25, seed=0)
    cfg = _quick_cfg(epochs=2, seed=5, batch_size=32)
    tuned = train(fine_tune(pre, 49, cfg), target, cfg)
    scratch = train(build_architecture("mini-alexnet", 49, seed=5), target, cfg)
    assert tuned.accuracies[0] > scratch.accuracies[0]

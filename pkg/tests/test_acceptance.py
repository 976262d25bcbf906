"""End-to-end acceptance criteria 1-11, each at its stated tolerance and time budget.

A summary line per criterion is printed at the end of the pytest run.
"""

import time

import numpy as np
import pytest

from dlperf import distsim as D
from dlperf import tensor as T
from dlperf.architectures import build_architecture
from dlperf.cli import params_row
from dlperf.data import synth_generate
from dlperf.graph import loss_and_gradients
from dlperf.metrics import evaluate, f1_score, per_class_accuracy
from dlperf.pipeline import RecipeConfig, paired_evaluation, run_suite, classify_standard, classify_region_search
from dlperf.pipeline import train_classifier, train_detector
from dlperf.regions import brute_force_segment, fh_segment, selective_search
from dlperf.serialization import serialize, deserialize, serialized_size, to_bytes
from dlperf.tensor import ConvParams
from dlperf.trainer import TrainConfig, train
from gradcheck import numeric_grad, rel_error, sampled_grad_error
from oracles import linear_baseline


def criterion(number, title):
    return pytest.mark.criterion(number, title)


def _within(value, target, tol):
    return abs(value - target) <= tol * target


# -- 1 ---------------------------------------------------------------------------

@criterion(1, "architecture accounting")
def test_architecture_accounting():
    t0 = time.perf_counter()
    rows = {name: params_row(name) for name in ("alexnet-2012", "vgg-19", "googlenet-2014")}
    elapsed = time.perf_counter() - t0
    problems = []
    for name, target, tol in (("alexnet-2012", 60e6, 0.05), ("vgg-19", 140e6, 0.05), ("googlenet-2014", 5e6, 0.30)):
        count = rows[name]["param_count"]
        if not _within(count, target, tol):
            problems.append(f"{name} has {count:,} params, {count / target - 1:+.1%} from {target:,.0f} (±{tol:.0%})")
    assert rows["alexnet-2012"]["weighted_layers"] == 8
    assert rows["vgg-19"]["weighted_layers"] == 19
    assert elapsed < 1.0, f"took {elapsed:.2f} s"
    assert not problems, "; ".join(problems)


# -- 2 ---------------------------------------------------------------------------

@criterion(2, "model size and round trip")
def test_model_size_and_round_trip(tmp_path):
    t0 = time.perf_counter()
    alexnet = build_architecture("alexnet-2012", 1000, seed=None)
    assert not alexnet.params  # nothing allocated
    payload = serialized_size(alexnet)["payload"]
    assert _within(payload, 230e6, 0.10), f"payload {payload / 1e6:.1f} MB"
    for name in ("mini-alexnet", "mini-googlenet"):
        net = build_architecture(name, 8, seed=3)
        serialize(net, tmp_path / f"{name}.dlpb")
        raw = (tmp_path / f"{name}.dlpb").read_bytes()
        assert to_bytes(deserialize(tmp_path / f"{name}.dlpb")) == raw
    assert time.perf_counter() - t0 < 10


# -- 3 ---------------------------------------------------------------------------

LAYER_TOL, END_TO_END_TOL = 1e-6, 1e-5


def _layer_error(fwd, bwd, x, rng):
    up = rng.normal(size=fwd(x).shape)
    return rel_error(bwd(up), numeric_grad(lambda: float(np.sum(up * fwd(x))), x))


def _per_layer_errors(rng):
    errs = {}
    p = ConvParams(3, 3, 2, 3, stride=2, pad=1)
    x, w, b = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    up = rng.normal(size=T.conv2d_forward(x, w, b, p).shape)
    gx, gw, gb = T.conv2d_backward(up, x, w, p)
    f = lambda: float(np.sum(up * T.conv2d_forward(x, w, b, p)))  # noqa: E731
    errs["conv"] = max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w)), rel_error(gb, numeric_grad(f, b)))

    x, w, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3)), rng.normal(size=3)
    up = rng.normal(size=(4, 3))
    gx, gw, gb = T.fc_backward(up, x, w)
    f = lambda: float(np.sum(up * T.fc_forward(x, w, b)))  # noqa: E731
    errs["fc"] = max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w)), rel_error(gb, numeric_grad(f, b)))

    x = rng.normal(size=(2, 2, 6, 6))
    _, argmax = T.maxpool2d_forward(x, 3, 2, 1)
    errs["maxpool"] = _layer_error(lambda v: T.maxpool2d_forward(v, 3, 2, 1)[0],
                                   lambda u: T.maxpool2d_backward(u, argmax, x.shape), x, rng)
    errs["avgpool"] = _layer_error(lambda v: T.avgpool2d_forward(v, 3, 2, 1),
                                   lambda u: T.avgpool2d_backward(u, x.shape, 3, 2, 1), x, rng)
    r = rng.normal(size=(3, 7))
    r[np.abs(r) < 1e-3] = 0.5
    errs["relu"] = _layer_error(T.relu, lambda u: T.relu_backward(u, r), r, rng)
    kw = dict(k=1.0, n=5, alpha=0.5, beta=0.75)
    x = rng.normal(size=(2, 7, 3, 3)) * 3
    errs["lrn"] = _layer_error(lambda v: T.lrn_forward(v, **kw), lambda u: T.lrn_backward(u, x, **kw), x, rng)
    z, y = rng.normal(size=(5, 4)), rng.integers(0, 4, size=5)
    errs["softmax-ce"] = rel_error(T.softmax_cross_entropy_backward(T.softmax(z), y),
                                   numeric_grad(lambda: T.cross_entropy(T.softmax(z), y), z))
    return errs


def _end_to_end_error(net, rng, n, per_layer):
    x = rng.uniform(size=(n,) + net.input_shape)
    y = rng.integers(0, net.class_count, size=n)
    _, grads, _ = loss_and_gradients(net, x, y)
    f = lambda: loss_and_gradients(net, x, y)[0]  # noqa: E731
    worst = 0.0
    for lid, (w, b) in net.params.items():
        worst = max(worst, sampled_grad_error(f, w, grads[lid][0], rng, per_layer),
                    sampled_grad_error(f, b, grads[lid][1], rng, min(per_layer, b.size)))
    return worst


@criterion(3, "gradient correctness")
def test_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = _per_layer_errors(rng)
    bad = {k: v for k, v in errs.items() if not v < LAYER_TOL}
    assert not bad, f"per-layer errors above {LAYER_TOL}: {bad}"
    alex = build_architecture("mini-alexnet", 5, seed=2)
    for lid, (w, b) in alex.params.items():
        alex.params[lid] = (w, rng.normal(0, 0.1, size=b.shape))
    assert _end_to_end_error(alex, rng, 3, 12) < END_TO_END_TOL
    goog = build_architecture("mini-googlenet", 4, seed=2)
    assert _end_to_end_error(goog, rng, 2, 6) < END_TO_END_TOL
    assert time.perf_counter() - t0 < 60


# -- 4 ---------------------------------------------------------------------------

@criterion(4, "distributed equivalence")
def test_distributed_equivalence():
    t0 = time.perf_counter()
    ds = synth_generate(8, 8, 32, seed=3)
    assert len(ds) == 64
    net = build_architecture("mini-alexnet", 8, seed=0)
    zero = D.CostModel.zero_comm()
    four = D.run_sim(net, ds, TrainConfig(batch_size=8), "sync-allreduce", 4, zero, rounds=10)
    one = D.run_sim(net, ds, TrainConfig(batch_size=32), "sync-allreduce", 1, zero, rounds=10)
    diff = max(float(np.max(np.abs(four.final_params[k][i] - one.final_params[k][i])))
               for k in one.final_params for i in (0, 1))
    assert diff < 1e-9, f"max parameter difference {diff:.3g}"
    assert time.perf_counter() - t0 < 120


# -- 5 ---------------------------------------------------------------------------

@criterion(5, "scaling shape")
def test_scaling_shape():
    t0 = time.perf_counter()
    prob = D.LeastSquaresProblem.synthetic(256, seed=0)
    for strategy in D.STRATEGIES:
        reps = D.scaling_sweep(prob, None, TrainConfig(batch_size=32), strategy, [1, 2, 4], D.CostModel.zero_comm(), 32, 5)
        assert [r.efficiency for r in reps] == [1.0, 1.0, 1.0], strategy
    costs = [D.CostModel(0.01, round_overhead=0.05), D.CostModel(0.01, link_bandwidth=1e6, link_latency=1e-3)]
    for cost in costs:
        for strategy in D.STRATEGIES:
            effs = [D.clock_report(strategy, n, 32 // n, 5, 10_000, cost).efficiency for n in (1, 2, 4)]
            assert effs[0] > effs[1] > effs[2], (strategy, effs)
    assert D.efficiency(1.8, 4) == 0.45
    assert time.perf_counter() - t0 < 60


# -- 6 ---------------------------------------------------------------------------

@criterion(6, "1-bit SGD")
def test_onebit_sgd():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    for shape in [(1000,), (64, 10), (8, 3, 5, 5)]:
        grad, res = rng.normal(size=shape), rng.normal(size=shape)
        bits, scales, new_res = D.quantize_1bit(grad, res)
        np.testing.assert_array_equal(new_res, (grad + res) - D.dequantize_1bit(bits, scales))
    prob = D.LeastSquaresProblem.synthetic(512, dim=10, seed=0)
    cfg = TrainConfig(learning_rate=0.05, momentum=0.0, batch_size=16)
    zero = D.CostModel.zero_comm()
    base = D.run_sim(prob, None, cfg, "sync-allreduce", 4, zero, rounds=500)
    onebit = D.run_sim(prob, None, cfg, "onebit-sgd", 4, zero, rounds=500)
    assert onebit.final_loss <= 2 * base.final_loss
    for name in ("mini-alexnet", "alexnet-2012"):
        net = build_architecture(name, 8 if name.startswith("mini") else 1000, seed=None)
        p, groups = net.param_count(), D.column_groups(net.param_shapes())
        ratio = D.comm_bytes("sync-allreduce", p, 4, 1) / D.comm_bytes("onebit-sgd", p, 4, 1, groups)
        assert ratio >= 16, f"{name}: {ratio:.2f}×"
    assert time.perf_counter() - t0 < 60


# -- 7 ---------------------------------------------------------------------------

@criterion(7, "selective search")
def test_selective_search_structure():
    t0 = time.perf_counter()
    assert len(selective_search(np.full((3, 16, 16), 0.3))) == 1
    for seed in range(3):
        img = synth_generate(4, 1, 48, "off-center-small", seed=seed).images[0]
        raw = selective_search(img, dedup=False)
        assert len(raw) == 2 * raw.segments - 1
    half = np.zeros((3, 4, 4))
    half[:, :, 2:] = 1.0
    np.testing.assert_array_equal(fh_segment(half, 1, 1), brute_force_segment(half, 1, 1))
    assert set(selective_search(half, k=1, min_size=1).boxes) == {(0, 0, 1, 3), (2, 0, 3, 3), (0, 0, 3, 3)}
    assert time.perf_counter() - t0 < 10


# -- 8, 9, 10: trained models shared across criteria ------------------------------

@pytest.fixture(scope="module")
def recipe_models():
    recipe = RecipeConfig()
    t0 = time.perf_counter()
    net, cls_report = train_classifier(recipe)
    t_cls = time.perf_counter() - t0
    detector, det_report = train_detector(recipe)
    t_det = time.perf_counter() - t0 - t_cls
    return {"recipe": recipe, "net": net, "cls_report": cls_report, "detector": detector,
            "det_report": det_report, "seconds_classifier": t_cls, "seconds_detector": t_det}


@pytest.mark.slow
@criterion(8, "pipeline ordering")
def test_pipeline_ordering(recipe_models):
    t0 = time.perf_counter()
    m = recipe_models
    suite = synth_generate(8, 7, 64, "off-center-small", seed=808).subset(np.arange(50))
    _, std = run_suite(lambda im: classify_standard(m["net"], im), suite.images, suite.labels)
    _, reg = run_suite(lambda im: classify_region_search(m["net"], m["detector"], im, m["recipe"].region),
                       suite.images, suite.labels)
    print(f"standard {std.mean_seconds * 1e3:.2f} ms/image, region search {reg.mean_seconds * 1e3:.2f} ms/image")
    assert reg.mean_seconds > std.mean_seconds
    # training the shared models is charged to criterion 9's budget
    assert time.perf_counter() - t0 < 300


@pytest.mark.slow
@criterion(9, "region-search benefit")
def test_region_search_benefit(recipe_models):
    t0 = time.perf_counter()
    m = recipe_models
    off = synth_generate(8, 25, 64, "off-center-small", seed=1000)
    centered = synth_generate(8, 25, 64, "centered", seed=1001)
    assert len(off) == len(centered) == 200
    std_off, reg_off = paired_evaluation(m["net"], m["detector"], off, m["recipe"].region)
    std_c, reg_c = paired_evaluation(m["net"], m["detector"], centered, m["recipe"].region)
    print(f"off-center: standard {std_off.top1:.3f}, region search {reg_off.top1:.3f}; "
          f"centered: standard {std_c.top1:.3f}, region search {reg_c.top1:.3f}")
    assert reg_off.top1 - std_off.top1 >= 0.10
    assert abs(reg_c.top1 - std_c.top1) <= 0.05
    assert time.perf_counter() - t0 + m["seconds_classifier"] + m["seconds_detector"] < 30 * 60


@pytest.mark.slow
@criterion(10, "training sanity")
def test_training_sanity(recipe_models):
    t0 = time.perf_counter()
    m = recipe_models
    report = m["cls_report"]
    assert len(report.epochs) == 30
    assert report.peak_accuracy >= 0.90, f"peak top-1 {report.peak_accuracy:.3f}"

    data = synth_generate(8, 100, 32, "centered", seed=m["recipe"].seed + 1)
    from dlperf.data import split

    data = split(data, 0.2, seed=m["recipe"].seed)
    lin = linear_baseline((3, 32, 32), 8)
    lin_report = train(lin, data, TrainConfig(learning_rate=0.01, batch_size=32, epochs=30, seed=0))
    print(f"mini-alexnet peak {report.peak_accuracy:.3f} at epoch {report.epochs_to_peak}, "
          f"linear baseline peak {lin_report.peak_accuracy:.3f}")
    assert lin_report.peak_accuracy <= 0.80
    assert report.peak_accuracy > lin_report.peak_accuracy

    again, again_report = train_classifier(m["recipe"])
    assert again_report.losses == report.losses and again_report.accuracies == report.accuracies
    for k, (w, b) in m["net"].params.items():
        np.testing.assert_array_equal(again.params[k][0], w)
        np.testing.assert_array_equal(again.params[k][1], b)
    assert time.perf_counter() - t0 + m["seconds_classifier"] < 20 * 60


# -- 11 --------------------------------------------------------------------------

@criterion(11, "metrics algebra")
def test_metrics_algebra():
    matrix = [[2, 1, 0], [0, 2, 0], [1, 0, 1]]
    labels, preds = [], []
    for t, row in enumerate(matrix):
        for p, count in enumerate(row):
            labels += [t] * count
            preds += [[p]] * count
    rep = evaluate(preds, labels)
    assert rep.top1 == pytest.approx(5 / 7)
    assert [rep.precision[c] for c in range(3)] == pytest.approx([2 / 3, 2 / 3, 1.0])
    assert [rep.recall[c] for c in range(3)] == pytest.approx([2 / 3, 1.0, 0.5])
    assert [rep.f1[c] for c in range(3)] == pytest.approx([2 / 3, 0.8, 2 / 3])
    table, overall = per_class_accuracy(preds, labels)
    assert table == pytest.approx({0: 2 / 3, 1: 1.0, 2: 0.5}) and overall == pytest.approx(5 / 7)
    assert f1_score(0.5, 0.5) == 0.5
    assert f1_score(0.7, 0.0) == 0.0 and f1_score(0.0, 0.0) == 0.0

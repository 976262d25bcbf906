"""``dlperf`` command line.

Every subcommand resolves its options (flags > ``--config`` file > defaults),
writes JSON and CSV artifacts plus ``resolved_config.txt`` into the output
directory and prints a short summary.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import distsim
from .architectures import ARCHITECTURES, build_architecture
from .config import ConfigError, Option, format_config, read_config_file, resolve
from .data import PLACEMENTS, DataError, LabeledDataset, load_manifest, split, synth_generate, write_manifest
from .graph import GraphError, NetworkGraph, count_layers, forward
from .serialization import WeightFileError, deserialize, serialize, serialized_size
from .trainer import NumericError, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOCK_NAME = ".dlperf.lock"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- option tables ---------------------------------------------------------------

COMMON = [
    Option("out", str, "runs/out", "output directory for reports"),
    Option("seed", int, 0, "random seed"),
]

DATA_OPTS = [
    Option("manifest", str, None, "CSV manifest (path,label); synthetic data is generated when unset"),
    Option("image_size", int, 32, "image side length in pixels"),
    Option("val_fraction", float, 0.2, "validation share of each class"),
    Option("classes", int, 8, "synthetic class count"),
    Option("samples_per_class", int, 100, "synthetic samples per class"),
    Option("placement", str, "centered", "synthetic target placement", PLACEMENTS),
    Option("data_seed", int, 1, "seed of the synthetic generator"),
]

TRAIN_OPTS = [
    Option("arch", str, "mini-alexnet", "architecture", ("mini-alexnet", "mini-googlenet")),
    Option("epochs", int, 30, "training epochs"),
    Option("batch_size", int, 32, "mini-batch size"),
    Option("learning_rate", float, 0.01, "SGD learning rate"),
    Option("momentum", float, 0.9, "SGD momentum"),
]

COMMANDS = {
    "ingest": (
        "validate a manifest and summarize the dataset",
        [Option("manifest", str, None, "CSV manifest (path,label); required"),
         Option("image_size", int, None, "resize images to this side length"),
         Option("val_fraction", float, 0.2, "validation share of each class")],
    ),
    "synth": (
        "generate a synthetic shape×color dataset",
        [o for o in DATA_OPTS if o.key not in ("manifest", "val_fraction", "data_seed")],
    ),
    "train": (
        "train a network and report per-epoch loss, accuracy and time",
        TRAIN_OPTS + DATA_OPTS + [Option("save_weights", bool, True, "write trained weights to the output directory")],
    ),
    "bench-train": (
        "repeat identical training runs and report mean/σ of per-epoch time",
        TRAIN_OPTS + DATA_OPTS + [Option("repeats", int, 3, "number of repeated runs")],
    ),
    "bench-infer": (
        "time single-image inference and report latency and model size",
        [Option("arch", str, "mini-alexnet", "architecture", ARCHITECTURES),
         Option("weights", str, None, "weight file; random weights when unset"),
         Option("classes", int, 8, "class count for a fresh net"),
         Option("image_size", int, 32, "input side for mini nets"),
         Option("runs", int, 50, "timed inferences"),
         Option("warmup", int, 2, "untimed inferences before timing")],
    ),
    "dist-sim": (
        "simulate distributed SGD over a worker sweep and report speedup/efficiency",
        [Option("model", str, "least-squares", "what to train", ("least-squares", "mini-alexnet", "clock-only")),
         Option("strategy", str, "sync-allreduce", "coordination strategy", distsim.STRATEGIES),
         Option("workers", str, "1,2,4,8", "comma-separated worker counts"),
         Option("global_batch", int, 32, "samples per round across all workers"),
         Option("rounds", int, 20, "synchronization rounds"),
         Option("learning_rate", float, 0.01, "SGD learning rate"),
         Option("momentum", float, 0.9, "SGD momentum"),
         Option("staleness_bound", int, 0, "async only: max updates a gradient may lag"),
         Option("seconds_per_sample", float, 0.01, "simulated compute seconds per sample"),
         Option("bandwidth", float, float("inf"), "link bandwidth, bytes/second"),
         Option("latency", float, 0.0, "link latency, seconds per message"),
         Option("round_overhead", float, 0.0, "fixed seconds per exchange when n > 1"),
         Option("param_count", int, 62378344, "parameter count for model = clock-only"),
         Option("samples", int, 256, "training samples for least-squares / mini-alexnet")],
    ),
    "region-eval": (
        "paired standard vs region-search evaluation on synthetic scenes",
        [Option("placement", str, "off-center-small", "evaluation suite placement", PLACEMENTS),
         Option("suite_size", int, 200, "evaluation images"),
         Option("classes", int, 8, "class count"),
         Option("epochs", int, 30, "classifier epochs"),
         Option("detector_epochs", int, 15, "detector epochs"),
         Option("detector_scenes", int, 40, "detector training scenes per class and placement"),
         Option("threshold", float, 0.5, "objectness needed to forward a region"),
         Option("max_regions", int, 10, "regions forwarded per image"),
         Option("order", str, "merge-rank", "which regions are forwarded first", ("merge-rank", "detector")),
         Option("aggregation", str, "max", "per-class aggregation over regions", ("max", "mean")),
         Option("k", float, 150.0, "segmentation scale"),
         Option("min_size", int, 20, "smallest segment in pixels")],
    ),
    "params": (
        "architecture table: parameter count, weighted layers, serialized size",
        [Option("arch", str, "all", "architecture or 'all'", ("all",) + ARCHITECTURES),
         Option("classes", int, 1000, "class count"),
         Option("aux_classifiers", bool, False, "include GoogLeNet auxiliary heads")],
    ),
}


def _options(command: str):
    return COMMON + COMMANDS[command][1]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dlperf", description="Deep learning benchmark toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (desc, _) in COMMANDS.items():
        keys = "\n".join(f"  {o.key:<20} {o.help} (default: {o.default})" for o in _options(name))
        p = sub.add_parser(
            name,
            help=desc,
            description=f"{desc}.\n\nconfig keys (flags > --config file > defaults):\n{keys}",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="key = value config file")
        for o in _options(name):
            flag = "--" + o.key.replace("_", "-")
            kw = {"dest": o.key, "default": None, "help": o.help}
            if o.choices:
                kw["choices"] = o.choices
            p.add_argument(flag, type=str, metavar=o.type.__name__.upper(), **kw)
    return parser


# -- helpers ---------------------------------------------------------------------

@contextmanager
def output_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"output directory {out} is locked by another run ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _jsonable(o):
    # strict JSON has no Infinity/NaN; spell them as strings
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, float) and not np.isfinite(o):
        return str(o)
    return o


def _write_json(path: Path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), indent=2, default=_json_default, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _finite(x: float):
    return x if np.isfinite(x) else None


def _dataset(cfg: dict) -> LabeledDataset:
    if cfg.get("manifest"):
        size = cfg.get("image_size")
        ds = load_manifest(cfg["manifest"], image_size=None if size is None else (size, size))
    else:
        ds = synth_generate(cfg["classes"], cfg["samples_per_class"], cfg["image_size"], cfg["placement"], seed=cfg["data_seed"])
    if cfg.get("val_fraction") is not None:
        ds = split(ds, cfg["val_fraction"], seed=cfg["seed"])
    return ds


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        momentum=cfg["momentum"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
    )


def _net_for(cfg: dict, ds: LabeledDataset) -> NetworkGraph:
    return build_architecture(cfg["arch"], ds.class_count, ds.images.shape[1:], seed=cfg["seed"])


# -- commands --------------------------------------------------------------------

def cmd_ingest(cfg, out: Path) -> dict:
    if not cfg["manifest"]:
        raise UsageError("ingest: 'manifest' is required")
    size = cfg["image_size"]
    ds = load_manifest(cfg["manifest"], image_size=None if size is None else (size, size))
    ds = split(ds, cfg["val_fraction"], seed=cfg["seed"])
    summary = ds.summary()
    _write_json(out / "ingest.json", {"command": "ingest", "config": cfg, "dataset": summary})
    _write_csv(out / "ingest.csv", ("class", "count"), summary["per_class"].items())
    return {"images": summary["size"], "classes": summary["class_count"], "train": summary["train"], "val": summary["val"]}


def cmd_synth(cfg, out: Path) -> dict:
    ds = synth_generate(cfg["classes"], cfg["samples_per_class"], cfg["image_size"], cfg["placement"], seed=cfg["seed"])
    manifest = write_manifest(ds, out)
    summary = ds.summary()
    _write_json(out / "synth.json", {"command": "synth", "config": cfg, "manifest": str(manifest), "dataset": summary})
    _write_csv(out / "synth.csv", ("class", "count"), summary["per_class"].items())
    return {"images": len(ds), "classes": ds.class_count, "manifest": str(manifest)}


def cmd_train(cfg, out: Path) -> dict:
    ds = _dataset(cfg)
    net = _net_for(cfg, ds)
    report = train(net, ds, _train_config(cfg))
    payload = {"command": "train", "config": cfg, "dataset": ds.summary(), "report": report.to_dict()}
    _write_json(out / "train_report.json", payload)
    report.write_csv(out / "train_report.csv")
    if cfg["save_weights"]:
        serialize(net, out / "weights.dlpb")
    return {"peak_top1": report.peak_accuracy, "epochs_to_peak": report.epochs_to_peak,
            "final_loss": report.losses[-1], "seconds": round(report.total_seconds, 3)}


def cmd_bench_train(cfg, out: Path) -> dict:
    if cfg["repeats"] < 1:
        raise UsageError("repeats: must be >= 1")
    ds = _dataset(cfg)
    runs = []
    for _ in range(cfg["repeats"]):
        net = _net_for(cfg, ds)
        runs.append(train(net, ds, _train_config(cfg)))
    rows = []
    for e in range(cfg["epochs"]):
        secs = [r.epochs[e].seconds for r in runs]
        losses = [r.epochs[e].loss for r in runs]
        rows.append({
            "epoch": e + 1,
            "mean_seconds": round(statistics.fmean(secs), 3),
            "std_seconds": round(statistics.pstdev(secs), 3),
            "mean_loss": statistics.fmean(losses),
            "std_loss": statistics.pstdev(losses),
            "top1": runs[0].epochs[e].top1,
        })
    totals = [r.total_seconds for r in runs]
    summary = {
        "repeats": cfg["repeats"],
        "mean_epoch_seconds": round(statistics.fmean(s for r in runs for s in (x.seconds for x in r.epochs)), 3),
        "std_total_seconds": round(statistics.pstdev(totals), 3),
        "std_final_loss": statistics.pstdev([r.losses[-1] for r in runs]),
        "peak_top1": runs[0].peak_accuracy,
        "epochs_to_peak": runs[0].epochs_to_peak,
    }
    _write_json(out / "bench_train.json", {"command": "bench-train", "config": cfg, "summary": summary, "epochs": rows})
    _write_csv(out / "bench_train.csv", list(rows[0]), [list(r.values()) for r in rows])
    return summary


def cmd_bench_infer(cfg, out: Path) -> dict:
    if cfg["weights"]:
        net = deserialize(cfg["weights"])
    else:
        arch = cfg["arch"]
        shape = None if not arch.startswith("mini-") else (3, cfg["image_size"], cfg["image_size"])
        net = build_architecture(arch, cfg["classes"], shape, seed=None)
        net.initialize(cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    image = rng.uniform(size=(1,) + tuple(net.input_shape))
    for _ in range(cfg["warmup"]):
        forward(net, image)
    lat = []
    for _ in range(cfg["runs"]):
        t0 = time.perf_counter()
        forward(net, image)
        lat.append(time.perf_counter() - t0)
    size = serialized_size(net)
    pct = np.percentile(lat, [50, 90, 99]) if lat else [0, 0, 0]
    summary = {
        "arch": net.name,
        "runs": cfg["runs"],
        "mean_ms": round(1000 * statistics.fmean(lat), 3) if lat else 0.0,
        "std_ms": round(1000 * statistics.pstdev(lat), 3) if lat else 0.0,
        "p50_ms": round(1000 * float(pct[0]), 3),
        "p90_ms": round(1000 * float(pct[1]), 3),
        "p99_ms": round(1000 * float(pct[2]), 3),
        "param_count": net.param_count(),
        "model_bytes": size["total"],
        "model_mb": round(size["total"] / 1e6, 3),
    }
    _write_json(out / "bench_infer.json", {"command": "bench-infer", "config": cfg, "summary": summary,
                                           "latencies_ms": [round(1000 * t, 3) for t in lat]})
    _write_csv(out / "bench_infer.csv", ("run", "latency_ms"), [(i + 1, round(1000 * t, 3)) for i, t in enumerate(lat)])
    return summary


def _parse_workers(text: str) -> list[int]:
    try:
        ns = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"workers: cannot parse {text!r} as comma-separated integers") from None
    if not ns or min(ns) < 1:
        raise UsageError("workers: need at least one count >= 1")
    return ns


def cmd_dist_sim(cfg, out: Path) -> dict:
    ns = _parse_workers(cfg["workers"])
    try:
        strategy = distsim.Strategy(cfg["strategy"], cfg["staleness_bound"])
        cost = distsim.CostModel(
            seconds_per_sample=cfg["seconds_per_sample"],
            link_bandwidth=cfg["bandwidth"],
            link_latency=cfg["latency"],
            round_overhead=cfg["round_overhead"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    tc = TrainConfig(learning_rate=cfg["learning_rate"], momentum=cfg["momentum"], batch_size=cfg["global_batch"], seed=cfg["seed"])
    if cfg["model"] == "clock-only":
        model, data, numerics = cfg["param_count"], None, False
    elif cfg["model"] == "least-squares":
        model, data, numerics = distsim.LeastSquaresProblem.synthetic(cfg["samples"], seed=cfg["seed"]), None, True
    else:
        per_class = max(1, cfg["samples"] // 8)
        data = synth_generate(8, per_class, 32, "centered", seed=cfg["seed"] + 1)
        model, numerics = build_architecture("mini-alexnet", 8, seed=cfg["seed"]), True
    try:
        reports = distsim.scaling_sweep(model, data, tc, strategy, ns, cost, cfg["global_batch"], cfg["rounds"], numerics=numerics)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = [
        {"n": r.n_workers, "wall_seconds": r.wall_seconds, "speedup": r.speedup,
         "efficiency": r.efficiency, "bytes": r.bytes_communicated, "final_loss": _finite(r.final_loss),
         "max_staleness": r.max_staleness}
        for r in reports
    ]
    _write_json(out / "dist_sim.json", {"command": "dist-sim", "config": cfg, "strategy": strategy.name, "runs": table})
    distsim.write_scaling_csv(reports, out / "scaling.csv")
    return {"strategy": strategy.name, "efficiency": {r.n_workers: round(r.efficiency, 4) for r in reports}}


def cmd_region_eval(cfg, out: Path) -> dict:
    from .pipeline import RecipeConfig, RegionSearchConfig, paired_evaluation, train_classifier, train_detector

    region = RegionSearchConfig(
        k=cfg["k"], min_size=cfg["min_size"], threshold=cfg["threshold"], max_regions=cfg["max_regions"],
        order=cfg["order"], aggregation=cfg["aggregation"],
    )
    recipe = RecipeConfig(classes=cfg["classes"], epochs=cfg["epochs"], detector_epochs=cfg["detector_epochs"],
                          detector_scenes=cfg["detector_scenes"], seed=cfg["seed"], region=region)
    net, cls_report = train_classifier(recipe)
    detector, det_report = train_detector(recipe)
    per_class = max(1, cfg["suite_size"] // cfg["classes"])
    suite = synth_generate(cfg["classes"], per_class, recipe.scene_size, cfg["placement"], seed=cfg["seed"] + 1000)
    std, reg = paired_evaluation(net, detector, suite, region)
    payload = {
        "command": "region-eval",
        "config": cfg,
        "suite": suite.provenance,
        "classifier_peak_top1": cls_report.peak_accuracy,
        "detector_peak_top1": det_report.peak_accuracy,
        "standard": std.to_dict(),
        "region_search": reg.to_dict(),
    }
    _write_json(out / "region_eval.json", payload)
    std.write_csv(out / "per_class_standard.csv", suite.class_names)
    reg.write_csv(out / "per_class_region_search.csv", suite.class_names)
    return {"standard_top1": std.top1, "region_top1": reg.top1, "standard_s": round(std.mean_seconds, 4),
            "region_s": round(reg.mean_seconds, 4), "fallbacks": reg.extra["fallbacks"]}


def params_row(name: str, classes: int = 1000, aux: bool = False) -> dict:
    net = build_architecture(name, classes, seed=None, aux_classifiers=aux)
    size = serialized_size(net)
    return {
        "name": name,
        "param_count": net.param_count(include_aux=aux),
        "weighted_layers": count_layers(net, include_aux=aux),
        "serialized_mb": round(size["total"] / 1e6, 3),
        "payload_mb": round(size["payload"] / 1e6, 3),
    }


def cmd_params(cfg, out: Path) -> dict:
    names = ARCHITECTURES if cfg["arch"] == "all" else (cfg["arch"],)
    rows = [params_row(n, cfg["classes"], cfg["aux_classifiers"]) for n in names]
    _write_json(out / "params.json", {"command": "params", "config": cfg, "architectures": rows})
    _write_csv(out / "params.csv", list(rows[0]), [list(r.values()) for r in rows])
    return {r["name"]: f"{r['param_count']:,} params, {r['weighted_layers']} layers, {r['serialized_mb']} MB" for r in rows}


HANDLERS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "bench-train": cmd_bench_train,
    "bench-infer": cmd_bench_infer,
    "dist-sim": cmd_dist_sim,
    "region-eval": cmd_region_eval,
    "params": cmd_params,
}


def _print_summary(command: str, summary: dict, out: Path) -> None:
    print(f"dlperf {command}: wrote {out}")
    for key, value in summary.items():
        if isinstance(value, dict):
            print(f"  {key}:")
            for k, v in value.items():
                print(f"    {k}: {v}")
        else:
            print(f"  {key}: {value}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(_options(command), file_values, flags)
        with output_dir(cfg["out"]) as out:
            (out / "resolved_config.txt").write_text(f"# dlperf {command}\n" + format_config(cfg), encoding="utf-8")
            summary = HANDLERS[command](cfg, out)
        _print_summary(command, summary, out)
        return EXIT_OK
    except (ConfigError, UsageError) as exc:
        print(f"dlperf {command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"dlperf {command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, WeightFileError, GraphError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"dlperf {command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

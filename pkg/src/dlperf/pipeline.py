"""Inference workflows: whole-image classification and region-search classification.

Region search runs selective search, keeps the proposals an objectness
detector accepts, classifies a square crop around each, and aggregates the
per-region class confidences (per-class max by default).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .architectures import build_architecture
from .data import LabeledDataset, resize_bilinear, split, synth_generate
from .graph import NetworkGraph, forward
from .metrics import EvalReport, evaluate
from .regions import ProposalSet, bbox_area, selective_search
from .tensor import softmax
from .trainer import TrainConfig, train

TOP_K = 5


@dataclass
class Prediction:
    ranking: list  # (class id, confidence), confidence descending
    source: str = "whole-image"
    fallback: bool = False
    regions: list = field(default_factory=list)  # boxes that contributed

    def __post_init__(self):
        ids = [c for c, _ in self.ranking]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids in ranking")
        confs = [p for _, p in self.ranking]
        if any(not 0.0 <= p <= 1.0 + 1e-12 for p in confs):
            raise ValueError("confidence outside [0, 1]")
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise ValueError("ranking is not sorted by confidence")

    @property
    def class_ids(self) -> list[int]:
        return [c for c, _ in self.ranking]

    def top(self, k: int = TOP_K) -> list:
        return self.ranking[:k]

    @property
    def label(self) -> int:
        return self.ranking[0][0]


def rank_scores(scores) -> list:
    """Sort a confidence vector or ``{class: conf}`` map; ties go to the lower class id."""
    if isinstance(scores, dict):
        items = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return [(int(c), float(p)) for c, p in items]
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return [(int(c), float(scores[c])) for c in order]


def _net_input(net: NetworkGraph, image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or not np.all(np.isfinite(img)):
        raise ValueError(f"corrupt image: expected finite C×H×W array, got shape {img.shape}")
    c, h, w = net.input_shape
    if img.shape[0] != c:
        raise ValueError(f"image has {img.shape[0]} channels, net expects {c}")
    return resize_bilinear(img, h, w)


def class_probabilities(net: NetworkGraph, images) -> np.ndarray:
    batch = np.stack([_net_input(net, im) for im in images])
    return softmax(forward(net, batch))


def classify_standard(net: NetworkGraph, image) -> Prediction:
    """Resize to the net input, forward, softmax; keeps the full ranking."""
    return Prediction(rank_scores(class_probabilities(net, [image])[0]))


# -- detectors -------------------------------------------------------------------

class NetDetector:
    """Objectness from a 2-class net: confidence of class 1 (target)."""

    def __init__(self, net: NetworkGraph):
        if net.class_count != 2:
            raise ValueError("detector net must have exactly 2 classes")
        self.net = net

    def __call__(self, crops) -> np.ndarray:
        if len(crops) == 0:
            return np.zeros(0)
        return class_probabilities(self.net, crops)[:, 1]


class ConstantDetector:
    """Gives every crop the same score; handy for tests and for disabling the filter."""

    def __init__(self, score: float):
        self.score = float(score)

    def __call__(self, crops) -> np.ndarray:
        return np.full(len(crops), self.score)


@dataclass
class RegionSearchConfig:
    k: float = 150.0
    min_size: int = 20
    threshold: float = 0.5  # objectness needed to forward a region
    max_regions: int = 10
    order: str = "merge-rank"  # "merge-rank": latest merges first; "detector": highest objectness first
    min_box_fraction: float = 0.01  # ignore proposals smaller than this share of the image
    margin: float = 0.4  # crop padding per side, as a fraction of the box's longer side
    aggregation: str = "max"  # or "mean"

    def __post_init__(self):
        if self.order not in ("detector", "merge-rank"):
            raise ValueError(f"order must be 'detector' or 'merge-rank', got {self.order!r}")
        if self.aggregation not in ("max", "mean"):
            raise ValueError(f"aggregation must be 'max' or 'mean', got {self.aggregation!r}")
        if self.max_regions < 1:
            raise ValueError("max_regions must be >= 1")


def crop_box(box, image_shape, margin: float) -> tuple:
    """Square window around ``box`` grown by ``margin``, shifted to fit the image."""
    h, w = image_shape
    x0, y0, x1, y1 = box
    side = max(x1 - x0 + 1, y1 - y0 + 1)
    side = int(round(side * (1 + 2 * margin)))
    side = max(2, min(side, h, w))
    cx = (x0 + x1 + 1) / 2
    cy = (y0 + y1 + 1) / 2
    left = int(round(min(max(cx - side / 2, 0), w - side)))
    top = int(round(min(max(cy - side / 2, 0), h - side)))
    return (left, top, left + side - 1, top + side - 1)


def crop(image: np.ndarray, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return image[:, y0 : y1 + 1, x0 : x1 + 1]


def aggregate(region_scores, mode: str = "max") -> dict:
    """Combine per-region ``{class: conf}`` maps (or vectors) into one map."""
    maps = [dict(enumerate(np.asarray(s).tolist())) if not isinstance(s, dict) else s for s in region_scores]
    if not maps:
        raise ValueError("nothing to aggregate")
    classes = sorted({c for m in maps for c in m})
    if mode == "max":
        return {c: max(m.get(c, 0.0) for m in maps) for c in classes}
    if mode == "mean":
        return {c: sum(m.get(c, 0.0) for m in maps) / len(maps) for c in classes}
    raise ValueError(f"unknown aggregation {mode!r}")


def candidate_windows(image, cfg: RegionSearchConfig, proposals: ProposalSet | None = None):
    """Distinct crop windows for the proposals, latest merge first."""
    img = np.asarray(image, dtype=np.float64)
    props = proposals if proposals is not None else selective_search(img, cfg.k, cfg.min_size)
    area = img.shape[1] * img.shape[2]
    windows = []
    for box in props.latest_first():
        if bbox_area(box) < cfg.min_box_fraction * area:
            continue
        win = crop_box(box, img.shape[1:], cfg.margin)
        if win not in windows:
            windows.append(win)
    return windows


def classify_region_search(net: NetworkGraph, detector, image, cfg: RegionSearchConfig | None = None) -> Prediction:
    cfg = cfg or RegionSearchConfig()
    img = np.asarray(image, dtype=np.float64)
    _net_input(net, img)  # validate early
    windows = candidate_windows(img, cfg)
    crops = [crop(img, win) for win in windows]
    scores = np.asarray(detector(crops), dtype=np.float64) if crops else np.zeros(0)
    passed = [i for i in range(len(windows)) if scores[i] >= cfg.threshold]
    if not passed:
        pred = classify_standard(net, img)
        return Prediction(pred.ranking, "whole-image", fallback=True)
    if cfg.order == "detector":
        passed.sort(key=lambda i: -scores[i])  # stable: equal scores keep merge order
    passed = passed[: cfg.max_regions]
    probs = class_probabilities(net, [crops[i] for i in passed])
    agg = aggregate(list(probs), cfg.aggregation)
    return Prediction(rank_scores(agg), f"regions:{len(passed)}", regions=[windows[i] for i in passed])


# -- evaluation ------------------------------------------------------------------

def run_suite(classify, images, labels, label_granularity: str = "fine"):
    """Time ``classify`` per image around the whole call; returns (predictions, report)."""
    preds, timings = [], []
    for im in images:
        t0 = time.perf_counter()
        preds.append(classify(im))
        timings.append(time.perf_counter() - t0)
    report = evaluate(preds, labels, timings, label_granularity)
    report.extra["fallbacks"] = sum(p.fallback for p in preds)
    return preds, report


def paired_evaluation(net, detector, dataset: LabeledDataset, cfg: RegionSearchConfig | None = None):
    """Standard vs region-search reports on the same images."""
    cfg = cfg or RegionSearchConfig()
    _, std = run_suite(lambda im: classify_standard(net, im), dataset.images, dataset.labels)
    _, reg = run_suite(lambda im: classify_region_search(net, detector, im, cfg), dataset.images, dataset.labels)
    return std, reg


# -- training recipe -------------------------------------------------------------

def _iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (bbox_area(a) + bbox_area(b) - inter)


def detector_crops(dataset: LabeledDataset, cfg: RegionSearchConfig, pos_iou: float = 0.5, neg_iou: float = 0.3):
    """Objectness training crops from scenes with known target boxes.

    Each proposal window is compared with the window around the true box;
    IoU >= ``pos_iou`` is a target crop, IoU < ``neg_iou`` background, the
    rest is skipped.  The true window itself is always a target crop.
    """
    if dataset.boxes is None:
        raise ValueError("detector training needs target boxes")
    pos, neg = [], []
    for img, box in zip(dataset.images, dataset.boxes):
        truth = crop_box(tuple(int(v) for v in box), img.shape[1:], cfg.margin)
        pos.append(crop(img, truth))
        for win in candidate_windows(img, cfg):
            iou = _iou(win, truth)
            if iou >= pos_iou and win != truth:
                pos.append(crop(img, win))
            elif iou < neg_iou:
                neg.append(crop(img, win))
    return pos, neg


def _resized(crops, size: int) -> np.ndarray:
    return np.stack([resize_bilinear(c, size, size) for c in crops])


@dataclass
class RecipeConfig:
    """Settings for training the classifier and detector of the region-search pipeline."""

    classes: int = 8
    input_size: int = 32
    scene_size: int = 64
    classifier_samples: int = 100  # per class, centered scenes at input_size
    detector_scenes: int = 40  # per class and placement
    epochs: int = 30
    detector_epochs: int = 15
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0
    region: RegionSearchConfig = field(default_factory=RegionSearchConfig)


def train_classifier(recipe: RecipeConfig):
    data = synth_generate(recipe.classes, recipe.classifier_samples, recipe.input_size, "centered", seed=recipe.seed + 1)
    data = split(data, 0.2, seed=recipe.seed)
    net = build_architecture("mini-alexnet", data.class_count, (3, recipe.input_size, recipe.input_size), seed=recipe.seed)
    cfg = TrainConfig(learning_rate=recipe.learning_rate, batch_size=recipe.batch_size, epochs=recipe.epochs, seed=recipe.seed)
    return net, train(net, data, cfg)


def train_detector(recipe: RecipeConfig):
    crops_pos, crops_neg = [], []
    for j, placement in enumerate(("centered", "off-center-small")):
        scenes = synth_generate(recipe.classes, recipe.detector_scenes, recipe.scene_size, placement, seed=recipe.seed + 101 + j)
        p, n = detector_crops(scenes, recipe.region)
        crops_pos += p
        crops_neg += n
    rng = np.random.default_rng(recipe.seed)
    # balance: at most two background crops per target crop
    if len(crops_neg) > 2 * len(crops_pos):
        keep = np.sort(rng.choice(len(crops_neg), 2 * len(crops_pos), replace=False))
        crops_neg = [crops_neg[i] for i in keep]
    images = _resized(crops_pos + crops_neg, recipe.input_size)
    labels = np.array([1] * len(crops_pos) + [0] * len(crops_neg))
    data = split(LabeledDataset(images, labels, ["background", "target"], provenance="detector crops"), 0.1, seed=recipe.seed)
    net = build_architecture("mini-alexnet", 2, (3, recipe.input_size, recipe.input_size), seed=recipe.seed + 7)
    cfg = TrainConfig(learning_rate=recipe.learning_rate, batch_size=recipe.batch_size, epochs=recipe.detector_epochs, seed=recipe.seed)
    return NetDetector(net), train(net, data, cfg)

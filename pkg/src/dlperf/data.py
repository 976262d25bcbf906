"""Image decoding, manifests, splits, label coarsening and synthetic data."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TRAIN, VAL = "train", "val"


class DataError(ValueError):
    """Bad image file, manifest, or dataset request."""


# -- PPM / PGM -----------------------------------------------------------------

def _read_header_tokens(data: bytes, count: int):
    """Return ``count`` whitespace-separated header tokens and the raster offset."""
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise DataError("truncated header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, i + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode binary PPM (P6) or PGM (P5) bytes into a C×H×W tensor in [0, 1]."""
    if data[:2] not in (b"P6", b"P5"):
        raise DataError(f"bad magic {data[:2]!r}; expected P6 or P5")
    channels = 3 if data[:2] == b"P6" else 1
    tokens, offset = _read_header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError("non-integer header field") from None
    if maxval != 255:
        raise DataError(f"maxval {maxval} unsupported; only 255")
    if width < 1 or height < 1:
        raise DataError(f"bad dimensions {width}x{height}")
    need = width * height * channels
    raster = data[offset : offset + need]
    if len(raster) < need:
        raise DataError(f"truncated raster: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_ppm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise DataError(f"expected 1×H×W or 3×H×W image, got shape {img.shape}")
    c, h, w = img.shape
    raster = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def load_ppm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing image file {path}") from None
    try:
        return decode_ppm(data)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def resize_bilinear(image, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a C×H×W image using pixel-center alignment."""
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, height)
    x0, x1, fx = axis(w, width)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


# -- datasets ------------------------------------------------------------------

@dataclass
class LabeledDataset:
    images: np.ndarray  # N×C×H×W
    labels: np.ndarray  # N
    class_names: list[str]
    split: np.ndarray | None = None  # N strings, "train" or "val"
    provenance: str = ""
    boxes: np.ndarray | None = None  # N×4 target boxes (x0, y0, x1, y1) for synthetic data
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label outside class table")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=object)
            if self.split.shape != self.labels.shape or not set(self.split) <= {TRAIN, VAL}:
                raise DataError("split must assign every index to 'train' or 'val'")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def indices(self, part: str) -> np.ndarray:
        if self.split is None:
            return np.arange(len(self)) if part == TRAIN else np.arange(0)
        return np.flatnonzero(self.split == part)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            split=None if self.split is None else self.split[idx],
            boxes=None if self.boxes is None else self.boxes[idx],
            meta=dict(self.meta),
        )

    def summary(self) -> dict:
        counts = np.bincount(self.labels, minlength=self.class_count)
        return {
            "size": len(self),
            "image_shape": list(self.images.shape[1:]),
            "class_count": self.class_count,
            "per_class": {name: int(c) for name, c in zip(self.class_names, counts)},
            "train": int(len(self.indices(TRAIN))),
            "val": int(len(self.indices(VAL))),
            "provenance": self.provenance,
        }


def load_manifest(csv_path, image_size=None) -> LabeledDataset:
    """Load a ``path,label`` CSV manifest; paths are relative to the manifest.

    Class ids follow first appearance.  With ``image_size=(H, W)`` every image
    is bilinearly resized at load time; otherwise all images must agree.
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"missing manifest {csv_path}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r and any(x.strip() for x in r)]
    if rows and [x.strip() for x in rows[0][:2]] == ["path", "label"]:
        rows = rows[1:]
    if not rows:
        raise DataError(f"empty manifest {csv_path}")
    names: list[str] = []
    ids: dict[str, int] = {}
    images, labels = [], []
    for lineno, row in enumerate(rows, start=2):
        if len(row) < 2:
            raise DataError(f"{csv_path}:{lineno}: expected 'path,label'")
        rel, name = row[0].strip(), row[1].strip()
        img = load_ppm(csv_path.parent / rel)
        if image_size is not None:
            img = resize_bilinear(img, *image_size)
        if images and img.shape != images[0].shape:
            raise DataError(f"{rel}: shape {img.shape} differs from {images[0].shape}; pass image_size")
        if name not in ids:
            ids[name] = len(names)
            names.append(name)
        images.append(img)
        labels.append(ids[name])
    return LabeledDataset(np.stack(images), np.array(labels), names, provenance=f"manifest:{csv_path}")


def write_manifest(dataset: LabeledDataset, directory) -> Path:
    """Write images as PPM files plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
            rel = f"images/{i:06d}.ppm"
            save_ppm(directory / rel, img)
            w.writerow([rel, dataset.class_names[lab]])
    return manifest


def split(dataset: LabeledDataset, val_fraction: float, seed: int = 0) -> LabeledDataset:
    """Stratified seeded split: per class, a permutation is cut at ``round(n·f)``."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    assign = np.full(len(dataset), TRAIN, dtype=object)
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        n_val = int(math.floor(members.size * val_fraction + 0.5))
        if members.size < 2 or n_val == 0:
            log.warning(
                "class %r has %d samples, too few to stratify; all assigned to train",
                dataset.class_names[c], members.size,
            )
            continue
        n_val = min(n_val, members.size - 1)
        perm = rng.permutation(members)
        assign[perm[:n_val]] = VAL
    return replace(dataset, split=assign)


def coarsen_labels(dataset: LabeledDataset, mapping: dict[str, str]) -> LabeledDataset:
    """Relabel through ``class name -> group name``; groups keep first-appearance order."""
    groups: list[str] = []
    gid: dict[str, int] = {}
    remap = np.empty(dataset.class_count, dtype=np.int64)
    for c, name in enumerate(dataset.class_names):
        if name not in mapping:
            if np.any(dataset.labels == c):
                raise DataError(f"class {name!r} has no entry in the mapping")
            remap[c] = -1
            continue
        g = mapping[name]
        if g not in gid:
            gid[g] = len(groups)
            groups.append(g)
        remap[c] = gid[g]
    return replace(
        dataset,
        labels=remap[dataset.labels],
        class_names=groups,
        provenance=f"{dataset.provenance} | coarsened to {len(groups)} groups",
        meta=dict(dataset.meta),
    )


def load_class_mapping(path) -> dict[str, str]:
    """Read a two-column ``class,group`` CSV (header optional)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing mapping file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if len(r) >= 2]
    if rows and [x.strip() for x in rows[0][:2]] == ["class", "group"]:
        rows = rows[1:]
    return {r[0].strip(): r[1].strip() for r in rows}


def make_prefix_mapping(class_names, sep: str = " ") -> dict[str, str]:
    """Group fine class names (``"Make Model Year"``) by their first token."""
    return {name: name.split(sep, 1)[0] for name in class_names}


# -- synthetic shapes ------------------------------------------------------------

SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring", "frame")
COLORS = {
    "red": (0.90, 0.12, 0.12),
    "blue": (0.15, 0.25, 0.95),
    "green": (0.10, 0.80, 0.20),
    "yellow": (0.95, 0.90, 0.10),
    "magenta": (0.90, 0.15, 0.85),
    "cyan": (0.10, 0.85, 0.90),
    "orange": (0.98, 0.55, 0.05),
}
PLACEMENTS = ("centered", "off-center-small")


def default_classes(n: int) -> list[tuple[str, str]]:
    """Shape×color grid with ``n`` cells, as square as possible (8 -> 4×2)."""
    if n < 2:
        raise DataError("need at least 2 classes")
    if n > len(SHAPES) * len(COLORS):
        raise DataError(f"at most {len(SHAPES) * len(COLORS)} synthetic classes")
    colors = list(COLORS)
    best = None
    for n_col in range(1, len(colors) + 1):
        if n % n_col == 0 and n // n_col <= len(SHAPES) and n // n_col >= n_col:
            best = (n // n_col, n_col)
    if best is None:
        grid = [(s, c) for c in colors for s in SHAPES]
        return grid[:n]
    n_shape, n_col = best
    return [(s, c) for c in colors[:n_col] for s in SHAPES[:n_shape]]


def shape_mask(shape: str, height: int, width: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Boolean mask of a shape inscribed in the square of half-side ``radius``."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = (xx + 0.5 - cx) / radius
    dy = (yy + 0.5 - cy) / radius
    ax, ay = np.abs(dx), np.abs(dy)
    if shape == "square":
        return (ax <= 0.85) & (ay <= 0.85)
    if shape == "circle":
        return dx * dx + dy * dy <= 1.0
    if shape == "triangle":
        # apex up, base at dy = 0.85
        return (dy <= 0.85) & (dy >= -1.0) & (ax <= (dy + 1.0) / 1.85 * 0.95)
    if shape == "cross":
        return ((ax <= 0.3) & (ay <= 1.0)) | ((ay <= 0.3) & (ax <= 1.0))
    if shape == "diamond":
        return ax + ay <= 1.0
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= 1.0) & (r2 >= 0.45)
    if shape == "frame":
        return (ax <= 0.9) & (ay <= 0.9) & ((ax >= 0.5) | (ay >= 0.5))
    raise DataError(f"unknown shape {shape!r}")


def _background(rng, height: int, width: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.6)
    tint = rng.uniform(-0.04, 0.04, size=(3, 1, 1))
    sigma = rng.uniform(0.02, 0.06)
    img = base + tint + rng.normal(0.0, sigma, size=(3, height, width))
    return img


def render_scene(rng, shape: str, color: str, image_size: int, placement: str):
    """Render one target on a noise background; returns ``(image, bbox)``."""
    h = w = image_size
    if placement == "centered":
        radius = rng.uniform(0.20, 0.36) * w
        cx = w / 2 + rng.uniform(-0.16, 0.16) * w
        cy = h / 2 + rng.uniform(-0.16, 0.16) * h
    elif placement == "off-center-small":
        radius = rng.uniform(0.11, 0.18) * w
        if radius < 3:
            raise DataError(f"image_size {image_size} too small for off-center-small targets")
        while True:
            cx = rng.uniform(radius + 1, w - radius - 1)
            cy = rng.uniform(radius + 1, h - radius - 1)
            if math.hypot(cx - w / 2, cy - h / 2) >= 0.27 * w:
                break
    else:
        raise DataError(f"unknown placement {placement!r}; choose from {PLACEMENTS}")
    if radius < 3:
        raise DataError(f"image_size {image_size} too small for the requested shape size")
    mask = shape_mask(shape, h, w, cx, cy, radius)
    if not mask.any():
        raise DataError("shape rasterized to zero pixels")
    img = _background(rng, h, w)
    rgb = np.array(COLORS[color]) + rng.uniform(-0.06, 0.06, size=3)
    shade = rgb[:, None, None] + rng.normal(0.0, 0.02, size=(3, h, w))
    img = np.where(mask[None], shade, img)
    ys, xs = np.nonzero(mask)
    bbox = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    return np.clip(img, 0.0, 1.0), bbox


def synth_generate(
    classes=8,
    samples_per_class: int = 100,
    image_size: int = 32,
    placement: str = "centered",
    seed: int = 0,
) -> LabeledDataset:
    """Deterministic synthetic shape×color dataset.

    ``classes`` is either a count (see :func:`default_classes`) or a list of
    ``(shape, color)`` pairs.  Samples are interleaved class by class.
    """
    combos = default_classes(classes) if isinstance(classes, int) else [tuple(c) for c in classes]
    if len(combos) < 2:
        raise DataError("need at least 2 classes")
    for s, c in combos:
        if s not in SHAPES or c not in COLORS:
            raise DataError(f"unknown class ({s!r}, {c!r})")
    if placement not in PLACEMENTS:
        raise DataError(f"unknown placement {placement!r}; choose from {PLACEMENTS}")
    if image_size < 16:
        raise DataError(f"image_size {image_size} too small for the requested shape size")
    rng = np.random.default_rng(seed)
    n = len(combos) * samples_per_class
    images = np.empty((n, 3, image_size, image_size))
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.int64)
    i = 0
    for _ in range(samples_per_class):
        for c, (shape, color) in enumerate(combos):
            images[i], boxes[i] = render_scene(rng, shape, color, image_size, placement)
            labels[i] = c
            i += 1
    names = [f"{color}-{shape}" for shape, color in combos]
    return LabeledDataset(
        images,
        labels,
        names,
        provenance=f"synthetic:{len(combos)} classes×{samples_per_class}, {image_size}px, {placement}, seed={seed}",
        boxes=boxes,
        meta={"placement": placement, "seed": seed},
    )

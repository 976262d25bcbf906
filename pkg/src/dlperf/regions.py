"""Selective search region proposals.

An initial over-segmentation (graph-based, union-find over an 8-connected
pixel grid) is merged greedily by color, texture, size and fill similarity.
Every region ever formed contributes its bounding box.

Images are C×H×W arrays in [0, 1]; boxes are inclusive ``(x0, y0, x1, y1)``.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field, replace

import numpy as np

COLOR_BINS = 25
TEXTURE_ORIENTATIONS = 8
TEXTURE_MAG_BINS = 10
_MAX_GRAD = float(np.sqrt(2.0))  # largest central-difference magnitude for values in [0, 1]


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int, weight: float) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight
        return a


def _grid_edges(image: np.ndarray):
    """8-connected edges as (weight, i, j) arrays sorted by weight, then i, then j."""
    c, h, w = image.shape
    px = image.reshape(c, -1).T * 255.0
    ids = np.arange(h * w).reshape(h, w)
    pairs = [
        (ids[:, :-1], ids[:, 1:]),
        (ids[:-1, :], ids[1:, :]),
        (ids[:-1, :-1], ids[1:, 1:]),
        (ids[:-1, 1:], ids[1:, :-1]),
    ]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    weights = np.sqrt(np.sum((px[a] - px[b]) ** 2, axis=1))
    order = np.lexsort((b, a, weights))
    return weights[order], a[order], b[order]


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[1] < 2 or img.shape[2] < 2:
        raise ValueError(f"segmentation needs a C×H×W image of at least 2×2, got shape {img.shape}")
    return img


def fh_segment(image, k: float = 150.0, min_size: int = 20) -> np.ndarray:
    """Graph-based segmentation; returns an H×W int label map.

    Edge weights are Euclidean RGB distances on the 0-255 scale.  Components
    merge when the edge weight does not exceed ``min(Int(C) + k/|C|)`` of both
    sides.  Afterwards, components smaller than ``min_size`` are absorbed
    along the sorted edges.  Labels are numbered 0.. in row-major order of
    first appearance.
    """
    img = _check_image(image)
    if not k > 0:
        raise ValueError(f"k must be > 0, got {k}")
    _, h, w = img.shape
    weights, ea, eb = _grid_edges(img)
    ds = _DisjointSet(h * w)
    wl, al, bl = weights.tolist(), ea.tolist(), eb.tolist()
    for wt, i, j in zip(wl, al, bl):
        ri, rj = ds.find(i), ds.find(j)
        if ri == rj:
            continue
        if wt <= min(ds.internal[ri] + k / ds.size[ri], ds.internal[rj] + k / ds.size[rj]):
            ds.union(ri, rj, wt)
    if min_size > 1:
        for i, j in zip(al, bl):
            ri, rj = ds.find(i), ds.find(j)
            if ri != rj and (ds.size[ri] < min_size or ds.size[rj] < min_size):
                ds.union(ri, rj, ds.internal[ri])
    roots = np.array([ds.find(i) for i in range(h * w)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(first.size, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.size)
    return rank[inverse].reshape(h, w)


def brute_force_segment(image, k: float, min_size: int = 1) -> np.ndarray:
    """Slow reference: same rule, plain dict-of-sets, no path compression."""
    img = _check_image(image)
    _, h, w = img.shape
    px = img.reshape(img.shape[0], -1).T * 255.0
    edges = []
    for y in range(h):
        for x in range(w):
            for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    i, j = y * w + x, yy * w + xx
                    edges.append((float(np.sqrt(np.sum((px[i] - px[j]) ** 2))), i, j))
    edges.sort()
    comp = {i: {i} for i in range(h * w)}
    owner = list(range(h * w))
    internal = {i: 0.0 for i in range(h * w)}

    def merge(a, b, wt):
        comp[a] |= comp.pop(b)
        for p in comp[a]:
            owner[p] = a
        internal[a] = wt

    for wt, i, j in edges:
        a, b = owner[i], owner[j]
        if a != b and wt <= min(internal[a] + k / len(comp[a]), internal[b] + k / len(comp[b])):
            merge(a, b, wt)
    for _, i, j in edges:
        a, b = owner[i], owner[j]
        if a != b and (len(comp[a]) < min_size or len(comp[b]) < min_size):
            merge(a, b, internal[a])
    labels, out = {}, np.empty(h * w, dtype=np.int64)
    for p in range(h * w):
        out[p] = labels.setdefault(owner[p], len(labels))
    return out.reshape(h, w)


# -- regions ---------------------------------------------------------------------

@dataclass
class Region:
    id: int
    pixel_count: int
    bbox: tuple
    color_hist: np.ndarray
    texture_hist: np.ndarray
    neighbors: set = field(default_factory=set)

    @property
    def bbox_area(self) -> int:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0 + 1) * (y1 - y0 + 1)


def union_bbox(a, b) -> tuple:
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def bbox_area(box) -> int:
    return (box[2] - box[0] + 1) * (box[3] - box[1] + 1)


def _pixel_features(img: np.ndarray):
    """Per-pixel histogram bin indices: color (C, H·W) and texture (C, H·W)."""
    c = img.shape[0]
    color = np.minimum((img * COLOR_BINS).astype(np.int64), COLOR_BINS - 1).reshape(c, -1)
    gy, gx = np.gradient(img, axis=(1, 2))
    angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    ori = np.minimum((angle / (2 * np.pi) * TEXTURE_ORIENTATIONS).astype(np.int64), TEXTURE_ORIENTATIONS - 1)
    mag = np.minimum((np.hypot(gx, gy) / _MAX_GRAD * TEXTURE_MAG_BINS).astype(np.int64), TEXTURE_MAG_BINS - 1)
    texture = (ori * TEXTURE_MAG_BINS + mag).reshape(c, -1)
    return color, texture


def region_histograms(image, mask):
    """Color and texture histograms of the pixels selected by ``mask``."""
    img = _check_image(image)
    color, texture = _pixel_features(img)
    sel = np.asarray(mask, dtype=bool).ravel()
    return _hist(color[:, sel], COLOR_BINS), _hist(texture[:, sel], TEXTURE_ORIENTATIONS * TEXTURE_MAG_BINS)


def _hist(bins: np.ndarray, per_channel: int) -> np.ndarray:
    c = bins.shape[0]
    offs = (np.arange(c) * per_channel)[:, None]
    counts = np.bincount((bins + offs).ravel(), minlength=c * per_channel).astype(np.float64)
    return counts / counts.sum()


def build_regions(image, labels: np.ndarray) -> dict[int, Region]:
    img = _check_image(image)
    c, h, w = img.shape
    labels = np.asarray(labels)
    s = int(labels.max()) + 1
    flat = labels.ravel()
    color, texture = _pixel_features(img)
    cb, tb = COLOR_BINS, TEXTURE_ORIENTATIONS * TEXTURE_MAG_BINS
    ch_off = np.arange(c)[:, None]
    color_counts = np.bincount((flat * c * cb + ch_off * cb + color).ravel(), minlength=s * c * cb).reshape(s, -1)
    tex_counts = np.bincount((flat * c * tb + ch_off * tb + texture).ravel(), minlength=s * c * tb).reshape(s, -1)
    sizes = np.bincount(flat, minlength=s)
    ys, xs = np.divmod(np.arange(h * w), w)
    x0 = np.full(s, w)
    y0 = np.full(s, h)
    x1 = np.full(s, -1)
    y1 = np.full(s, -1)
    np.minimum.at(x0, flat, xs)
    np.minimum.at(y0, flat, ys)
    np.maximum.at(x1, flat, xs)
    np.maximum.at(y1, flat, ys)
    regions = {
        r: Region(
            r,
            int(sizes[r]),
            (int(x0[r]), int(y0[r]), int(x1[r]), int(y1[r])),
            color_counts[r] / color_counts[r].sum(),
            tex_counts[r] / tex_counts[r].sum(),
        )
        for r in range(s)
    }
    for a, b in _adjacent_pairs(labels):
        regions[a].neighbors.add(b)
        regions[b].neighbors.add(a)
    return regions


def _adjacent_pairs(labels: np.ndarray):
    shifts = [
        (labels[:, :-1], labels[:, 1:]),
        (labels[:-1, :], labels[1:, :]),
        (labels[:-1, :-1], labels[1:, 1:]),
        (labels[:-1, 1:], labels[1:, :-1]),
    ]
    a = np.concatenate([p.ravel() for p, _ in shifts])
    b = np.concatenate([q.ravel() for _, q in shifts])
    diff = a != b
    lo = np.minimum(a[diff], b[diff])
    hi = np.maximum(a[diff], b[diff])
    return sorted(set(zip(lo.tolist(), hi.tolist())))


def similarity_terms(a: Region, b: Region, image_size: int) -> dict:
    size = 1.0 - (a.pixel_count + b.pixel_count) / image_size
    fill = 1.0 - (bbox_area(union_bbox(a.bbox, b.bbox)) - a.pixel_count - b.pixel_count) / image_size
    return {
        "color": float(np.minimum(a.color_hist, b.color_hist).sum()),
        "texture": float(np.minimum(a.texture_hist, b.texture_hist).sum()),
        "size": size,
        "fill": fill,
    }


def similarity(a: Region, b: Region, image_size: int) -> float:
    """Unweighted sum of color, texture, size and fill similarity."""
    t = similarity_terms(a, b, image_size)
    return t["color"] + t["texture"] + t["size"] + t["fill"]


def merge_regions(a: Region, b: Region, new_id: int) -> Region:
    n = a.pixel_count + b.pixel_count
    return Region(
        new_id,
        n,
        union_bbox(a.bbox, b.bbox),
        (a.pixel_count * a.color_hist + b.pixel_count * b.color_hist) / n,
        (a.pixel_count * a.texture_hist + b.pixel_count * b.texture_hist) / n,
        (a.neighbors | b.neighbors) - {a.id, b.id},
    )


# -- proposals -------------------------------------------------------------------

@dataclass
class ProposalSet:
    """Boxes with their merge rank (initial regions first, then merges in order)."""

    boxes: list
    ranks: list
    deduplicated: bool = False
    image_shape: tuple = ()
    segments: int = 0

    def __len__(self) -> int:
        return len(self.boxes)

    def dedup(self) -> "ProposalSet":
        """Drop repeated boxes, keeping each box's latest rank."""
        latest: dict = {}
        for box, rank in zip(self.boxes, self.ranks):
            latest[box] = rank
        items = sorted(latest.items(), key=lambda kv: kv[1])
        return ProposalSet([b for b, _ in items], [r for _, r in items], True, self.image_shape, self.segments)

    def latest_first(self):
        order = sorted(range(len(self.boxes)), key=lambda i: -self.ranks[i])
        return [self.boxes[i] for i in order]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("x0", "y0", "x1", "y1", "rank"))
            for box, rank in zip(self.boxes, self.ranks):
                w.writerow([*box, rank])


def hierarchical_merge(regions: dict[int, Region], image_size: int):
    """Greedy most-similar-pair merging until one region remains.

    Yields ``(a, b, merged)`` per step.  Equal similarities resolve to the
    pair with the smaller region id, then the smaller neighbor id.
    """
    regions = {r: replace(reg, neighbors=set(reg.neighbors)) for r, reg in regions.items()}
    heap = []
    for a in sorted(regions):
        for b in sorted(regions[a].neighbors):
            if a < b:
                heap.append((-similarity(regions[a], regions[b], image_size), a, b))
    heapq.heapify(heap)
    next_id = max(regions) + 1 if regions else 0
    while len(regions) > 1:
        if not heap:
            raise RuntimeError("region adjacency graph is disconnected")
        _, a, b = heapq.heappop(heap)
        if a not in regions or b not in regions:
            continue
        merged = merge_regions(regions.pop(a), regions.pop(b), next_id)
        next_id += 1
        for nb in merged.neighbors:
            other = regions[nb]
            other.neighbors -= {a, b}
            other.neighbors.add(merged.id)
        regions[merged.id] = merged
        for nb in sorted(merged.neighbors):
            heapq.heappush(heap, (-similarity(regions[nb], merged, image_size), nb, merged.id))
        yield a, b, merged


def selective_search(image, k: float = 150.0, min_size: int = 20, dedup: bool = True) -> ProposalSet:
    img = _check_image(image)
    labels = fh_segment(img, k, min_size)
    regions = build_regions(img, labels)
    image_size = img.shape[1] * img.shape[2]
    boxes = [regions[r].bbox for r in sorted(regions)]
    for _, _, merged in hierarchical_merge(regions, image_size):
        boxes.append(merged.bbox)
    props = ProposalSet(boxes, list(range(len(boxes))), False, img.shape[1:], len(regions))
    return props.dedup() if dedup else props

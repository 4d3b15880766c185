"""Hierarchical segmentation in the selective-search style.

A graph-based pass (Felzenszwalb-Huttenlocher merge predicate on the
8-connected pixel graph) produces initial regions. Adjacent regions are then
merged greedily by a weighted sum of colour, texture, size and fill
similarities until the requested granularity is reached.
"""

from __future__ import annotations

import heapq
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .classifier import orientation_bins
from .raster import MultibandRaster

SMOOTHING_SIGMA = 0.8
COLOR_BINS = 16
TEXTURE_BINS = 8
SEG_MAGIC = "SEG1"


class SegmentationFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SegConfig:
    k_scale: float = 400.0
    min_region: int = 50
    merge_stop: float = 0.002
    w_color: float = 1.0
    w_texture: float = 1.0
    w_size: float = 1.0
    w_fill: float = 1.0

    def __post_init__(self):
        if not self.k_scale > 0:
            raise ValueError("k_scale must be > 0")
        if self.min_region < 1:
            raise ValueError("min_region must be >= 1")
        if not 0.0 <= self.merge_stop <= 1.0:
            raise ValueError("merge_stop must lie in [0, 1]")
        weights = (self.w_color, self.w_texture, self.w_size, self.w_fill)
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError("similarity weights must be >= 0 and not all zero")


@dataclass(frozen=True, eq=False)
class Segmentation:
    region_ids: np.ndarray
    region_count: int

    def __post_init__(self):
        ids = np.array(self.region_ids, dtype=np.int32, copy=True)
        if ids.ndim != 2 or ids.size == 0:
            raise ValueError("region_ids must be a non-empty 2-D array")
        if ids.min() != 0 or ids.max() != self.region_count - 1:
            raise ValueError("region ids must be dense in 0..region_count-1")
        if np.unique(ids).size != self.region_count:
            raise ValueError("region ids must be dense in 0..region_count-1")
        ids.setflags(write=False)
        object.__setattr__(self, "region_ids", ids)

    @property
    def height(self) -> int:
        return self.region_ids.shape[0]

    @property
    def width(self) -> int:
        return self.region_ids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Segmentation):
            return NotImplemented
        return self.region_count == other.region_count and np.array_equal(self.region_ids, other.region_ids)

    __hash__ = None  # type: ignore[assignment]


def relabel_dense(ids: np.ndarray) -> Segmentation:
    """Renumber arbitrary ids to ``0..n-1`` in raster-scan order of first appearance."""
    flat = np.asarray(ids).ravel()
    uniq, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    return Segmentation(rank[inverse].reshape(np.shape(ids)), len(uniq))


def is_partition(seg: Segmentation) -> bool:
    """Dense ids and every region a single 4-connected component."""
    ids = seg.region_ids
    if np.unique(ids).size != seg.region_count:
        return False
    _, n = split_4connected(ids)
    return n == seg.region_count


def split_4connected(ids: np.ndarray) -> tuple[np.ndarray, int]:
    """Split labelled regions into their 4-connected pieces."""
    h, w = ids.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    same_r = ids[:, :-1] == ids[:, 1:]
    rows.append(idx[:, :-1][same_r])
    cols.append(idx[:, 1:][same_r])
    same_d = ids[:-1, :] == ids[1:, :]
    rows.append(idx[:-1, :][same_d])
    cols.append(idx[1:, :][same_d])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(h * w, h * w))
    n, labels = connected_components(graph, directed=False)
    return labels.reshape(h, w), n


def smooth(r: MultibandRaster) -> np.ndarray:
    data = np.asarray(r.data, dtype=np.float64)
    return np.stack([ndimage.gaussian_filter(b, SMOOTHING_SIGMA, mode="nearest") for b in data])


def pixel_edges(img: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Edges ``(u, v, weight)`` of the pixel graph.

    Edges are enumerated direction by direction (right, down, down-right,
    down-left), each in row-major order of ``u``; weight is the Euclidean
    distance between band vectors.
    """
    _, h, w = img.shape
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        ((slice(None), slice(0, w - 1)), (slice(None), slice(1, w))),
        ((slice(0, h - 1), slice(None)), (slice(1, h), slice(None))),
    ]
    if connectivity == 8:
        pairs += [
            ((slice(0, h - 1), slice(0, w - 1)), (slice(1, h), slice(1, w))),
            ((slice(0, h - 1), slice(1, w)), (slice(1, h), slice(0, w - 1))),
        ]
    us, vs, ws = [], [], []
    for a, b in pairs:
        us.append(idx[a].ravel())
        vs.append(idx[b].ravel())
        diff = img[(slice(None),) + a] - img[(slice(None),) + b]
        ws.append(np.sqrt(np.sum(diff * diff, axis=0)).ravel())
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ws)


class _DisjointSet:
    def __init__(self, n: int, sizes=None):
        self.parent = list(range(n))
        self.size = [1] * n if sizes is None else list(sizes)
        self.internal = [0.0] * n

    def find(self, a: int) -> int:
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a: int, b: int, weight: float = 0.0) -> int:
        if self.size[a] < self.size[b] or (self.size[a] == self.size[b] and b < a):
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight
        return a


def _graph_merge(n: int, u, v, w, k: float) -> np.ndarray:
    ds = _DisjointSet(n)
    find = ds.find
    size = ds.size
    internal = ds.internal
    order = np.argsort(w, kind="stable")
    for e, a, b in zip(w[order].tolist(), u[order].tolist(), v[order].tolist()):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if e <= min(internal[ra] + k / size[ra], internal[rb] + k / size[rb]):
            ds.union(ra, rb, e)
    return np.array([find(i) for i in range(n)])


def _absorb_small(labels: np.ndarray, u, v, w, min_region: int) -> np.ndarray:
    flat = labels.ravel()
    n = int(flat.max()) + 1
    ds = _DisjointSet(n, np.bincount(flat, minlength=n).tolist())
    find = ds.find
    size = ds.size
    order = np.argsort(w, kind="stable")
    ca = flat[u[order]].tolist()
    cb = flat[v[order]].tolist()
    for a, b in zip(ca, cb):
        if a == b:
            continue
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_region or size[rb] < min_region):
            ds.union(ra, rb)
    roots = np.array([find(i) for i in range(n)])
    return roots[flat].reshape(labels.shape)


def initial_segmentation(r: MultibandRaster, cfg: SegConfig) -> Segmentation:
    """Graph-based initial regions.

    Steps: Gaussian smoothing, the merge predicate over sorted 8-connected
    edges, a split into 4-connected pieces, then absorption of pieces smaller
    than ``min_region`` along the weakest 4-connected edges.
    """
    img = smooth(r)
    _, h, w = img.shape
    u, v, wt = pixel_edges(img, 8)
    roots = _graph_merge(h * w, u, v, wt, float(cfg.k_scale)).reshape(h, w)
    pieces, _ = split_4connected(roots)
    if cfg.min_region > 1:
        u4, v4, w4 = pixel_edges(img, 4)
        pieces = _absorb_small(pieces, u4, v4, w4, cfg.min_region)
    return relabel_dense(pieces)


@dataclass(frozen=True, eq=False)
class RegionStats:
    size: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    color: np.ndarray
    texture: np.ndarray


def _check_dims(r: MultibandRaster, s: Segmentation):
    if (r.width, r.height) != (s.width, s.height):
        raise ValueError(f"raster {r.width}x{r.height} and segmentation {s.width}x{s.height} differ")


def pixel_bins(r: MultibandRaster) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel colour and texture bin indices, each ``(bands, h, w)``.

    Bin indices are already offset by band so that a flat histogram over
    ``COLOR_BINS * bands`` (resp. ``TEXTURE_BINS * bands``) entries results.
    """
    data = np.asarray(r.data, dtype=np.float64)
    bands, h, w = data.shape
    band_off = np.arange(bands)[:, None, None]
    color = np.clip((data * (COLOR_BINS / 256.0)).astype(np.intp), 0, COLOR_BINS - 1) + band_off * COLOR_BINS
    gy = np.gradient(data, axis=1) if h > 1 else np.zeros_like(data)
    gx = np.gradient(data, axis=2) if w > 1 else np.zeros_like(data)
    texture = orientation_bins(gx, gy, TEXTURE_BINS) + band_off * TEXTURE_BINS
    return color, texture


def _histograms(ids: np.ndarray, bins: np.ndarray, nbins: int, count: int) -> np.ndarray:
    combined = (ids[None].astype(np.intp) * nbins + bins).ravel()
    hist = np.bincount(combined, minlength=count * nbins).reshape(count, nbins).astype(np.float64)
    return hist / hist.sum(axis=1, keepdims=True)


def region_stats(r: MultibandRaster, s: Segmentation) -> list[RegionStats]:
    _check_dims(r, s)
    ids = s.region_ids
    n = s.region_count
    color_bins, texture_bins = pixel_bins(r)
    color = _histograms(ids, color_bins, COLOR_BINS * r.bands, n)
    texture = _histograms(ids, texture_bins, TEXTURE_BINS * r.bands, n)
    sizes = np.bincount(ids.ravel(), minlength=n)
    ys, xs = np.indices(ids.shape)
    flat = ids.ravel()
    x0 = np.full(n, ids.shape[1]); np.minimum.at(x0, flat, xs.ravel())
    y0 = np.full(n, ids.shape[0]); np.minimum.at(y0, flat, ys.ravel())
    x1 = np.full(n, -1); np.maximum.at(x1, flat, xs.ravel())
    y1 = np.full(n, -1); np.maximum.at(y1, flat, ys.ravel())
    return [
        RegionStats(int(sizes[i]), (int(x0[i]), int(y0[i]), int(x1[i]), int(y1[i])), color[i], texture[i])
        for i in range(n)
    ]


def merge_stats(a: RegionStats, b: RegionStats) -> RegionStats:
    n = a.size + b.size
    box = (min(a.bbox[0], b.bbox[0]), min(a.bbox[1], b.bbox[1]), max(a.bbox[2], b.bbox[2]), max(a.bbox[3], b.bbox[3]))
    color = (a.color * a.size + b.color * b.size) / n
    texture = (a.texture * a.size + b.texture * b.size) / n
    return RegionStats(n, box, color, texture)


def similarity_terms(a: RegionStats, b: RegionStats, image_area: int) -> tuple[float, float, float, float]:
    s_color = float(np.minimum(a.color, b.color).sum())
    s_texture = float(np.minimum(a.texture, b.texture).sum())
    s_size = 1.0 - (a.size + b.size) / image_area
    bw = max(a.bbox[2], b.bbox[2]) - min(a.bbox[0], b.bbox[0]) + 1
    bh = max(a.bbox[3], b.bbox[3]) - min(a.bbox[1], b.bbox[1]) + 1
    s_fill = 1.0 - (bw * bh - a.size - b.size) / image_area
    return tuple(min(max(t, 0.0), 1.0) for t in (s_color, s_texture, s_size, s_fill))  # type: ignore[return-value]


def similarity(a: RegionStats, b: RegionStats, image_area: int, cfg: SegConfig) -> float:
    sc, st, ss, sf = similarity_terms(a, b, image_area)
    return cfg.w_color * sc + cfg.w_texture * st + cfg.w_size * ss + cfg.w_fill * sf


def region_adjacency(ids: np.ndarray) -> set[tuple[int, int]]:
    """Unordered pairs ``(a, b)``, ``a < b``, of 4-adjacent regions."""
    pairs = []
    for a, b in ((ids[:, :-1], ids[:, 1:]), (ids[:-1, :], ids[1:, :])):
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        pairs.append(np.stack([lo, hi], axis=1))
    allp = np.unique(np.concatenate(pairs), axis=0)
    return {(int(a), int(b)) for a, b in allp}


def target_region_count(area: int, merge_stop: float) -> int:
    """Merging stops once ``count <= target`` (mean region size reaches the fraction)."""
    if merge_stop <= 0:
        return 1
    return max(1, int(np.floor(1.0 / merge_stop + 1e-9)))


def hierarchical_merge(
    r: MultibandRaster, s: Segmentation, cfg: SegConfig, history: list | None = None
) -> Segmentation:
    """Greedy merging of the most similar adjacent pair.

    Every merge creates a new region id (``count``, ``count + 1``, ...), so
    heap entries touching a merged-away region are simply skipped when popped.
    ``history``, when given, receives ``(a, b, new_id, similarity)`` per merge.
    """
    _check_dims(r, s)
    area = s.width * s.height
    stats: dict[int, RegionStats] = dict(enumerate(region_stats(r, s)))
    neighbours: dict[int, set[int]] = {i: set() for i in stats}
    heap = []
    for a, b in region_adjacency(s.region_ids):
        neighbours[a].add(b)
        neighbours[b].add(a)
        heap.append((-similarity(stats[a], stats[b], area, cfg), a, b))
    heapq.heapify(heap)
    parent = list(range(s.region_count))
    alive = s.region_count
    target = target_region_count(area, cfg.merge_stop)
    next_id = s.region_count
    while alive > target and heap:
        neg, a, b = heapq.heappop(heap)
        if a not in stats or b not in stats:
            continue
        t = next_id
        next_id += 1
        stats[t] = merge_stats(stats.pop(a), stats.pop(b))
        parent.append(t)
        parent[a] = parent[b] = t
        nb = (neighbours.pop(a) | neighbours.pop(b)) - {a, b}
        neighbours[t] = nb
        for n in nb:
            neighbours[n].discard(a)
            neighbours[n].discard(b)
            neighbours[n].add(t)
            heapq.heappush(heap, (-similarity(stats[n], stats[t], area, cfg), n, t))
        alive -= 1
        if history is not None:
            history.append((a, b, t, -neg))
    final = np.array(parent)
    # parent links always point to larger ids, so one reverse sweep resolves roots
    for i in range(len(final) - 1, -1, -1):
        final[i] = final[final[i]]
    return relabel_dense(final[s.region_ids])


def segment(r: MultibandRaster, cfg: SegConfig) -> Segmentation:
    return hierarchical_merge(r, initial_segmentation(r, cfg), cfg)


def write_segmentation(s: Segmentation, path: str | os.PathLike) -> None:
    header = f"{SEG_MAGIC} {s.width} {s.height} {s.region_count}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(s.region_ids, dtype="<u4").tobytes())


def read_segmentation(path: str | os.PathLike) -> Segmentation:
    with open(path, "rb") as fh:
        parts = fh.readline(256).decode("ascii", errors="replace").split()
        if len(parts) != 4 or parts[0] != SEG_MAGIC:
            raise SegmentationFormatError(f"{path}: not a {SEG_MAGIC} file")
        try:
            w, h, n = (int(p) for p in parts[1:])
        except ValueError:
            raise SegmentationFormatError(f"{path}: bad header") from None
        payload = fh.read()
    if w < 1 or h < 1 or len(payload) != 4 * w * h:
        raise SegmentationFormatError(f"{path}: expected {4 * w * h} payload bytes, got {len(payload)}")
    ids = np.frombuffer(payload, dtype="<u4").reshape(h, w).astype(np.int64)
    try:
        return Segmentation(ids, n)
    except ValueError as exc:
        raise SegmentationFormatError(f"{path}: {exc}") from None


def boundary_mask(s: Segmentation) -> np.ndarray:
    ids = s.region_ids
    edge = np.zeros(ids.shape, dtype=bool)
    edge[:, 1:] |= ids[:, 1:] != ids[:, :-1]
    edge[1:, :] |= ids[1:, :] != ids[:-1, :]
    return edge


def export_boundary_overlay(r: MultibandRaster, s: Segmentation, path: str | os.PathLike, color=(255, 255, 0)) -> None:
    from PIL import Image

    _check_dims(r, s)
    bands = [0, 1, 2] if r.bands >= 3 else [0, 0, 0]
    rgb = np.clip(np.stack([r.data[b] for b in bands], axis=-1), 0, 255).astype(np.uint8)
    rgb[boundary_mask(s)] = color
    Image.fromarray(rgb, mode="RGB").save(path)

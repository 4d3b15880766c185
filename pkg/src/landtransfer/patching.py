"""Patch sampling: grid cells, multi-scale windows, training samples, candidates."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .raster import BACKGROUND, LabelMask, MultibandRaster, clamp_window, resize_array

log = logging.getLogger(__name__)

ATTEMPTS_PER_SAMPLE = 50


@dataclass(frozen=True)
class ScaleConfig:
    """Window sizes ``s_1 < ... < s_N`` and the size every patch is resized to.

    ``scales[0]`` doubles as the grid cell size for map production unless
    ``cell_size`` overrides it (used to compare single-scale maps on a common grid).
    """

    scales: tuple[int, ...] = (16, 32, 64)
    canonical_size: int = 32
    cell_size: int | None = None

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales:
            raise ValueError("at least one scale is required")
        if any(s < 1 for s in scales):
            raise ValueError(f"scales must be >= 1, got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly ascending, got {scales}")
        if self.canonical_size < 1:
            raise ValueError("canonical_size must be >= 1")
        if self.cell_size is not None and self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        object.__setattr__(self, "scales", scales)

    @property
    def cell(self) -> int:
        return self.scales[0] if self.cell_size is None else int(self.cell_size)


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: MultibandRaster
    origin: tuple[int, int]
    scale: int
    reference: tuple[int, int]


@dataclass(frozen=True, eq=False)
class LabeledSample:
    patch: Patch
    label: int


def window_origin(center: int, size: int, extent: int) -> tuple[int, int]:
    """Origin and (possibly shrunk) length of a window of ``size`` centred on ``center``."""
    size = min(size, extent)
    start = min(max(center - size // 2, 0), extent - size)
    return start, size


def make_patches(
    r: MultibandRaster,
    windows: Sequence[tuple[int, int, int]],
    canonical_size: int,
    references: Sequence[tuple[int, int]] | None = None,
) -> list[Patch]:
    """Crop and resize square windows ``(x, y, s)``; windows of one size are batched."""
    out: list[Patch | None] = [None] * len(windows)
    by_size: dict[tuple[int, int], list[int]] = {}
    clamped = []
    for i, (x, y, s) in enumerate(windows):
        cx, cy, w, h = clamp_window(x, y, s, s, r.width, r.height)
        clamped.append((cx, cy, w, h, s))
        by_size.setdefault((w, h), []).append(i)
    for (w, h), idx in by_size.items():
        stack = np.stack([r.data[:, clamped[i][1] : clamped[i][1] + h, clamped[i][0] : clamped[i][0] + w] for i in idx])
        resized = resize_array(stack, canonical_size, canonical_size)
        for j, i in enumerate(idx):
            cx, cy, _, _, s = clamped[i]
            ref = references[i] if references is not None else (cx + w // 2, cy + h // 2)
            out[i] = Patch(MultibandRaster(resized[j]), (cx, cy), s, ref)
    return out  # type: ignore[return-value]


def grid_cells(width: int, height: int, cell: int) -> list[tuple[int, int]]:
    nx, ny = width // cell, height // cell
    return [(i * cell, j * cell) for j in range(ny) for i in range(nx)]


def grid_partition(r: MultibandRaster, cfg: ScaleConfig) -> list[Patch]:
    s1 = cfg.cell
    if r.width < s1 or r.height < s1:
        raise ValueError(f"raster {r.width}x{r.height} smaller than one {s1}x{s1} grid cell")
    origins = grid_cells(r.width, r.height, s1)
    windows = [(x, y, s1) for x, y in origins]
    refs = [(x + s1 // 2, y + s1 // 2) for x, y in origins]
    return make_patches(r, windows, cfg.canonical_size, refs)


def multiscale_windows(r: MultibandRaster, z: tuple[int, int], cfg: ScaleConfig) -> list[tuple[int, int, int]]:
    zx, zy = z
    if not (0 <= zx < r.width and 0 <= zy < r.height):
        raise ValueError(f"reference pixel {z} outside raster {r.width}x{r.height}")
    windows = []
    for s in cfg.scales:
        x0, _ = window_origin(zx, s, r.width)
        y0, _ = window_origin(zy, s, r.height)
        windows.append((x0, y0, s))
    return windows


def multiscale_sample(r: MultibandRaster, z: tuple[int, int], cfg: ScaleConfig) -> list[Patch]:
    windows = multiscale_windows(r, z, cfg)
    return make_patches(r, windows, cfg.canonical_size, [tuple(z)] * len(windows))


def _class_integrals(labels: np.ndarray, num_classes: int) -> np.ndarray:
    h, w = labels.shape
    integ = np.zeros((num_classes, h + 1, w + 1), dtype=np.int64)
    for c in range(num_classes):
        integ[c, 1:, 1:] = np.cumsum(np.cumsum(labels == c, axis=0), axis=1)
    return integ


def window_class_counts(integ: np.ndarray, xs: np.ndarray, ys: np.ndarray, w: int, h: int) -> np.ndarray:
    """Per-class pixel counts of windows, shape ``(n_windows, K)``."""
    a = integ[:, ys + h, xs + w]
    b = integ[:, ys, xs + w]
    c = integ[:, ys + h, xs]
    d = integ[:, ys, xs]
    return (a - b - c + d).T


def extract_training_samples(
    r: MultibandRaster,
    m: LabelMask,
    cfg: ScaleConfig,
    per_class_per_scale: int,
    purity: float = 0.8,
    seed: int = 0,
) -> list[LabeledSample]:
    """Randomly sample windows whose dominant class covers more than ``purity``.

    Background pixels stay in the denominator, so heavily unlabeled windows are
    rejected. Each scale draws at most ``50 * K * per_class_per_scale``
    windows; classes that do not fill their quota are logged.
    """
    if (m.width, m.height) != (r.width, r.height):
        raise ValueError("mask and raster dimensions differ")
    if not 0.5 < purity <= 1.0:
        raise ValueError(f"purity must lie in (0.5, 1], got {purity}")
    if per_class_per_scale < 1:
        raise ValueError("per_class_per_scale must be >= 1")
    k = m.num_classes
    present = set(np.unique(m.labels).tolist()) - {BACKGROUND}
    for c in range(k):
        if c not in present:
            log.warning("class %d absent from mask; it yields no samples", c)
    integ = _class_integrals(m.labels, k)
    rng = np.random.default_rng(seed)
    samples: list[LabeledSample] = []
    for s in cfg.scales:
        w, h = min(s, r.width), min(s, r.height)
        attempts = ATTEMPTS_PER_SAMPLE * per_class_per_scale * k
        xs = rng.integers(0, r.width - w + 1, size=attempts)
        ys = rng.integers(0, r.height - h + 1, size=attempts)
        counts = window_class_counts(integ, xs, ys, w, h)
        dominant = counts.argmax(axis=1)
        pure = counts[np.arange(attempts), dominant] > purity * (w * h)
        quota = np.zeros(k, dtype=np.int64)
        chosen, labels = [], []
        for i in np.flatnonzero(pure):
            c = dominant[i]
            if quota[c] < per_class_per_scale:
                quota[c] += 1
                chosen.append((int(xs[i]), int(ys[i]), s))
                labels.append(int(c))
                if quota.min() >= per_class_per_scale:
                    break
        short = [c for c in present if quota[c] < per_class_per_scale]
        if short:
            log.info("scale %d: classes %s below quota %d", s, sorted(short), per_class_per_scale)
        patches = make_patches(r, chosen, cfg.canonical_size)
        samples.extend(LabeledSample(p, lab) for p, lab in zip(patches, labels))
    return samples


def sliding_windows(width: int, height: int, cfg: ScaleConfig) -> list[tuple[int, int, int]]:
    if width < cfg.scales[0] or height < cfg.scales[0]:
        raise ValueError(f"raster {width}x{height} smaller than the {cfg.scales[0]}px window")
    windows = []
    for s in cfg.scales:
        stride = max(1, s // 2)
        xs = range(0, max(width - s, 0) + 1, stride)
        ys = range(0, max(height - s, 0) + 1, stride)
        windows.extend((x, y, s) for y in ys for x in xs)
    return windows


def sliding_candidates(r: MultibandRaster, cfg: ScaleConfig) -> list[Patch]:
    return make_patches(r, sliding_windows(r.width, r.height, cfg), cfg.canonical_size)

"""Specificity-weighted fusion of per-scale class probabilities."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .classifier import ClassifierModel, patch_features, predict_proba_features
from .patching import ScaleConfig, grid_cells, make_patches, multiscale_windows
from .raster import BACKGROUND, LabelMask, MultibandRaster


class Fused(NamedTuple):
    probs: np.ndarray
    uniform_fallback: bool


def specificity_weights(probs: np.ndarray) -> np.ndarray:
    """Specificity of each probability vector along the last axis.

    With ``q`` sorted in descending order the weight is
    ``sum_k (q_k - q_{k+1}) / k`` for ``k = 1..K-1``; 0 for a uniform vector,
    1 for a one-hot vector.
    """
    q = -np.sort(-np.asarray(probs, dtype=np.float64), axis=-1)
    k = q.shape[-1]
    if k < 2:
        return np.ones(q.shape[:-1])
    gaps = q[..., :-1] - q[..., 1:]
    return np.clip(gaps @ (1.0 / np.arange(1, k)), 0.0, 1.0)


def specificity_weight(p: np.ndarray) -> float:
    return float(specificity_weights(np.asarray(p)[None])[0])


def fuse_batch(scale_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fuse an ``(n, N, K)`` array over its scale axis.

    Returns the fused ``(n, K)`` probabilities and a boolean array marking rows
    where every scale had zero weight (these fall back to the plain mean).
    """
    sp = np.asarray(scale_probs, dtype=np.float64)
    if sp.ndim != 3 or sp.shape[1] < 1:
        raise ValueError(f"expected (n, scales, classes) array, got shape {sp.shape}")
    w = specificity_weights(sp)
    total = w.sum(axis=1)
    fallback = total <= 0
    w = np.where(fallback[:, None], 1.0, w)
    total = np.where(fallback, sp.shape[1], total)
    fused = np.einsum("ns,nsk->nk", w, sp) / total[:, None]
    return fused, fallback


def fuse(scale_probs: Sequence[np.ndarray] | np.ndarray) -> Fused:
    sp = np.asarray(scale_probs, dtype=np.float64)
    if sp.ndim != 2:
        raise ValueError("expected one probability vector per scale")
    fused, fallback = fuse_batch(sp[None])
    return Fused(fused[0], bool(fallback[0]))


def decide(p: np.ndarray) -> int:
    """Most probable class; ties go to the lowest class id."""
    return int(np.argmax(p))


def cell_scale_probs(m: ClassifierModel, r: MultibandRaster, cfg: ScaleConfig) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Grid-cell origins and their ``(cells, N, K)`` per-scale probabilities."""
    s1 = cfg.cell
    if r.width < s1 or r.height < s1:
        raise ValueError(f"raster {r.width}x{r.height} smaller than one {s1}x{s1} grid cell")
    origins = grid_cells(r.width, r.height, s1)
    windows, refs = [], []
    for x, y in origins:
        z = (x + s1 // 2, y + s1 // 2)
        windows.extend(multiscale_windows(r, z, cfg))
        refs.extend([z] * len(cfg.scales))
    probs = []
    chunk = 1024 * len(cfg.scales)
    for start in range(0, len(windows), chunk):
        patches = make_patches(r, windows[start : start + chunk], cfg.canonical_size, refs[start : start + chunk])
        probs.append(predict_proba_features(m, patch_features(patches)))
    probs = np.concatenate(probs).reshape(len(origins), len(cfg.scales), m.num_classes)
    return origins, probs


def stamp_cells(origins, labels, cell: int, width: int, height: int, num_classes: int) -> LabelMask:
    out = np.full((height, width), BACKGROUND, dtype=np.uint16)
    for (x, y), lab in zip(origins, labels):
        out[y : y + cell, x : x + cell] = lab
    return LabelMask(out, num_classes)


def classify_map(m: ClassifierModel, r: MultibandRaster, cfg: ScaleConfig) -> LabelMask:
    """Patch-wise classification map: one fused label per grid cell.

    Pixels in the margins not covered by a full cell are BACKGROUND.
    """
    origins, probs = cell_scale_probs(m, r, cfg)
    fused, _ = fuse_batch(probs)
    return stamp_cells(origins, fused.argmax(axis=1), cfg.cell, r.width, r.height, m.num_classes)

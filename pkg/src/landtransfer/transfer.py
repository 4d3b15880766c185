"""Mining pseudo-labelled target samples for fine-tuning.

Candidates from the unlabelled target image are kept when the pre-trained
model is confident, ranked by prediction entropy, capped per class, and then
validated by nearest-neighbour retrieval against the labelled source samples.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .classifier import (
    ClassifierModel,
    embed_features,
    patch_features,
    predict_proba_features,
)
from .patching import LabeledSample, Patch


class EmptySurvivorSet(RuntimeError):
    """No candidate survived selection; callers fall back to the pre-trained model."""

    def __init__(self, message: str, audit: list | None = None):
        super().__init__(message)
        self.audit = audit or []


@dataclass(frozen=True)
class TransferConfig:
    sigma: float = 0.8
    delta: int = 5
    mu: int = 4000

    def __post_init__(self):
        if not 0.0 < self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in (0, 1], got {self.sigma}")
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")
        if self.mu < 1:
            raise ValueError(f"mu must be >= 1, got {self.mu}")


# Reference settings for 5-class and 15-class label sets.
TRANSFER_5_CLASSES = TransferConfig(sigma=0.8, delta=5, mu=4000)
TRANSFER_15_CLASSES = TransferConfig(sigma=0.7, delta=5, mu=2000)


@dataclass(frozen=True, eq=False)
class PseudoLabeledSample:
    patch: Patch | None
    pseudo_label: int
    confidence: float
    entropy: float
    embedding: np.ndarray
    index: int = 0
    probs: np.ndarray | None = field(default=None, repr=False)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with ``0 * log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return float(-np.sum(np.where(p > 0, p * np.log(safe), 0.0)))


def entropies(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    safe = np.where(probs > 0, probs, 1.0)
    return -np.sum(np.where(probs > 0, probs * np.log(safe), 0.0), axis=-1)


def pseudo_label_arrays(
    probs: np.ndarray, embeddings: np.ndarray, sigma: float, patches: Sequence[Patch | None] | None = None
) -> list[PseudoLabeledSample]:
    probs = np.atleast_2d(probs)
    labels = probs.argmax(axis=1)
    conf = probs[np.arange(len(probs)), labels]
    ent = entropies(probs)
    out = []
    for i in np.flatnonzero(conf >= sigma):
        out.append(
            PseudoLabeledSample(
                patch=patches[i] if patches is not None else None,
                pseudo_label=int(labels[i]),
                confidence=float(conf[i]),
                entropy=float(ent[i]),
                embedding=embeddings[i],
                index=int(i),
                probs=probs[i],
            )
        )
    return out


def assign_pseudo_labels(m: ClassifierModel, candidates: Sequence[Patch], sigma: float) -> list[PseudoLabeledSample]:
    """Keep candidates whose top class probability is at least ``sigma``."""
    if not 0.0 < sigma <= 1.0:
        raise ValueError(f"sigma must lie in (0, 1], got {sigma}")
    if not candidates:
        return []
    feats = patch_features(candidates)
    return pseudo_label_arrays(predict_proba_features(m, feats), embed_features(m, feats), sigma, candidates)


def rank_and_cap(samples: Sequence[PseudoLabeledSample], mu: int) -> list[PseudoLabeledSample]:
    """Highest-entropy ``mu`` samples per pseudo-label, in descending entropy order.

    Equal entropies keep their input order.
    """
    if mu < 1:
        raise ValueError("mu must be >= 1")
    ordered = sorted(range(len(samples)), key=lambda i: -samples[i].entropy)
    taken: dict[int, int] = {}
    out = []
    for i in ordered:
        s = samples[i]
        if taken.get(s.pseudo_label, 0) < mu:
            taken[s.pseudo_label] = taken.get(s.pseudo_label, 0) + 1
            out.append(s)
    return out


def nearest_indices(queries: np.ndarray, source: np.ndarray, k: int, chunk: int = 64) -> np.ndarray:
    """Indices of the ``k`` nearest source rows per query (Euclidean, ties by index)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    source = np.atleast_2d(np.asarray(source, dtype=np.float64))
    if source.shape[0] < k:
        raise ValueError(f"source has {source.shape[0]} points, need at least {k}")
    out = np.empty((queries.shape[0], k), dtype=np.intp)
    for start in range(0, queries.shape[0], chunk):
        q = queries[start : start + chunk]
        d = np.sum((q[:, None, :] - source[None, :, :]) ** 2, axis=2)
        out[start : start + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def _split_source(source: Sequence[tuple[np.ndarray, int]] | tuple[np.ndarray, np.ndarray]):
    if isinstance(source, tuple) and len(source) == 2 and isinstance(source[0], np.ndarray) and source[0].ndim == 2:
        return np.asarray(source[0], dtype=np.float64), np.asarray(source[1], dtype=np.intp)
    emb = np.array([np.asarray(e, dtype=np.float64) for e, _ in source])
    lab = np.array([int(c) for _, c in source], dtype=np.intp)
    return emb, lab


def retrieve_filter(
    samples: Sequence[PseudoLabeledSample],
    source: Sequence[tuple[np.ndarray, int]] | tuple[np.ndarray, np.ndarray],
    delta: int,
    audit: list | None = None,
) -> list[PseudoLabeledSample]:
    """Keep samples whose ``delta`` nearest source embeddings all carry the pseudo-label.

    ``source`` is either a sequence of ``(embedding, label)`` pairs or a pair of
    arrays ``(embeddings, labels)``.
    """
    if delta < 1:
        raise ValueError("delta must be >= 1")
    emb, lab = _split_source(source)
    if emb.shape[0] < delta:
        raise ValueError(f"source has {emb.shape[0]} samples, fewer than delta={delta}")
    if not samples:
        return []
    queries = np.stack([s.embedding for s in samples])
    nn = nearest_indices(queries, emb, delta)
    nn_labels = lab[nn]
    keep = np.all(nn_labels == np.array([s.pseudo_label for s in samples])[:, None], axis=1)
    if audit is not None:
        for s, row, ok in zip(samples, nn_labels, keep):
            audit.append((s, row.tolist(), bool(ok)))
    return [s for s, ok in zip(samples, keep) if ok]


@dataclass
class Selection:
    survivors: list[PseudoLabeledSample]
    audit: list[dict]

    def labeled_samples(self) -> list[LabeledSample]:
        return [LabeledSample(s.patch, s.pseudo_label) for s in self.survivors]


def select_samples(
    probs: np.ndarray,
    embeddings: np.ndarray,
    source_embeddings: np.ndarray,
    source_labels: np.ndarray,
    cfg: TransferConfig,
    patches: Sequence[Patch | None] | None = None,
) -> Selection:
    """Array-level selection: threshold, entropy rank and cap, retrieval check."""
    probs = np.atleast_2d(probs)
    labels = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    ent = entropies(probs)
    records = [
        {
            "index": i,
            "pseudo_label": int(labels[i]),
            "confidence": float(conf[i]),
            "entropy": float(ent[i]),
            "decision": "low_confidence",
            "neighbors": [],
        }
        for i in range(len(probs))
    ]
    confident = pseudo_label_arrays(probs, embeddings, cfg.sigma, patches)
    capped = rank_and_cap(confident, cfg.mu)
    for s in confident:
        records[s.index]["decision"] = "capped"
    trail: list = []
    survivors = retrieve_filter(capped, (source_embeddings, source_labels), cfg.delta, audit=trail)
    for s, neigh, ok in trail:
        records[s.index]["neighbors"] = neigh
        records[s.index]["decision"] = "kept" if ok else "retrieval_mismatch"
    return Selection(survivors, records)


def build_finetune_set(
    m: ClassifierModel,
    candidates: Sequence[Patch],
    source: Sequence[LabeledSample],
    cfg: TransferConfig,
    audit_path: str | os.PathLike | None = None,
) -> list[LabeledSample]:
    """Pseudo-labelled target samples that survive the whole selection chain.

    Raises:
        EmptySurvivorSet: when nothing survives.
    """
    if not candidates or not source:
        raise ValueError("candidates and source samples must be non-empty")
    feats = patch_features(candidates)
    src_feats = patch_features([s.patch for s in source])
    selection = select_samples(
        predict_proba_features(m, feats),
        embed_features(m, feats),
        embed_features(m, src_feats),
        np.array([s.label for s in source], dtype=np.intp),
        cfg,
        candidates,
    )
    if audit_path is not None:
        write_audit(selection.audit, audit_path)
    if not selection.survivors:
        raise EmptySurvivorSet("no candidate survived pseudo-label selection", selection.audit)
    return selection.labeled_samples()


def write_audit(records: Iterable[dict], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_audit(path: str | os.PathLike) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

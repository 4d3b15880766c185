"""Patch classifier: handcrafted features feeding a one-hidden-layer softmax network.

The network exposes the two things the transfer scheme needs, class
probabilities and a feature embedding (the hidden tanh activations).
Training is plain minibatch SGD with momentum and a plateau learning-rate drop.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .patching import LabeledSample, Patch

INTENSITY_BINS = 16
ORIENTATION_BINS = 8
INIT_STD = 0.1
PLATEAU_TOL = 1e-3
MODEL_MAGIC = "CLF1"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 15
    momentum: float = 0.9
    initial_lr: float = 0.1
    lr_drop_factor: float = 10.0
    plateau_patience: int = 2
    seed: int = 0
    hidden: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be > 0")
        if not self.lr_drop_factor >= 1.0:
            raise ValueError("lr_drop_factor must be >= 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")


@dataclass(frozen=True, eq=False)
class PatchFeatures:
    intensity: np.ndarray
    gradient: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.intensity.ravel(), self.gradient, self.means, self.stds])


def feature_length(bands: int) -> int:
    return INTENSITY_BINS * bands + ORIENTATION_BINS + 2 * bands


def orientation_bins(gx: np.ndarray, gy: np.ndarray, nbins: int = ORIENTATION_BINS) -> np.ndarray:
    """Unsigned gradient orientation bin; bin 0 is centred on the horizontal axis."""
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    return np.floor(theta / (np.pi / nbins) + 0.5).astype(np.intp) % nbins


def features_array(stack: np.ndarray) -> np.ndarray:
    """Feature matrix for a ``(n, bands, h, w)`` stack of canonical-size patches."""
    stack = np.asarray(stack, dtype=np.float64)
    n, bands, h, w = stack.shape
    npx = h * w

    bins = np.clip((stack * (INTENSITY_BINS / 256.0)).astype(np.intp), 0, INTENSITY_BINS - 1)
    offsets = (np.arange(n * bands) * INTENSITY_BINS).reshape(n, bands, 1, 1)
    inten = np.bincount((bins + offsets).ravel(), minlength=n * bands * INTENSITY_BINS)
    inten = inten.reshape(n, bands * INTENSITY_BINS) / npx

    gray = stack.mean(axis=1)
    gy = np.gradient(gray, axis=1) if h > 1 else np.zeros_like(gray)
    gx = np.gradient(gray, axis=2) if w > 1 else np.zeros_like(gray)
    mag = np.hypot(gx, gy)
    obin = orientation_bins(gx, gy) + (np.arange(n) * ORIENTATION_BINS)[:, None, None]
    grad = np.bincount(obin.ravel(), weights=mag.ravel(), minlength=n * ORIENTATION_BINS)
    grad = grad.reshape(n, ORIENTATION_BINS)
    total = grad.sum(axis=1, keepdims=True)
    grad = np.divide(grad, total, out=np.zeros_like(grad), where=total > 0)

    flat = stack.reshape(n, bands, npx)
    means = flat.mean(axis=2) / 255.0
    stds = flat.std(axis=2) / 255.0
    return np.concatenate([inten, grad, means, stds], axis=1)


def extract_features(p: Patch) -> PatchFeatures:
    bands = p.pixels.bands
    vec = features_array(p.pixels.data[None])[0]
    nb = INTENSITY_BINS * bands
    return PatchFeatures(
        intensity=vec[:nb].reshape(bands, INTENSITY_BINS),
        gradient=vec[nb : nb + ORIENTATION_BINS],
        means=vec[nb + ORIENTATION_BINS : nb + ORIENTATION_BINS + bands],
        stds=vec[nb + ORIENTATION_BINS + bands :],
    )


def patch_features(patches: Sequence[Patch], chunk: int = 512) -> np.ndarray:
    """Feature matrix for many patches, computed in chunks of equal-shape stacks."""
    if not patches:
        raise ValueError("no patches given")
    rows = []
    for start in range(0, len(patches), chunk):
        part = patches[start : start + chunk]
        rows.append(features_array(np.stack([p.pixels.data for p in part])))
    return np.concatenate(rows)


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        d, h = np.shape(self.w1)
        if np.shape(self.b1) != (h,) or np.shape(self.w2)[0] != h:
            raise ValueError("hidden layer shapes disagree")
        k = np.shape(self.w2)[1]
        if np.shape(self.b2) != (k,):
            raise ValueError("output layer shapes disagree")
        if np.shape(self.feature_mean) != (d,) or np.shape(self.feature_scale) != (d,):
            raise ValueError("feature normalisation shape disagrees with input dimension")
        for name in ("w1", "b1", "w2", "b2", "feature_mean", "feature_scale"):
            arr = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "hyper", dict(self.hyper))

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    def params(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in (self.feature_mean, self.feature_scale, *self.params())])

    def __eq__(self, other):
        if not isinstance(other, ClassifierModel):
            return NotImplemented
        return (
            self.w1.shape == other.w1.shape
            and self.w2.shape == other.w2.shape
            and np.array_equal(self.parameter_vector(), other.parameter_vector())
            and self.hyper == other.hyper
        )

    __hash__ = None  # type: ignore[assignment]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params, x):
    w1, b1, w2, b2 = params
    a = np.tanh(x @ w1 + b1)
    return a, softmax(a @ w2 + b2)


def loss_and_grads(params: Sequence[np.ndarray], x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over ``x`` (already normalised) and its gradients."""
    w1, b1, w2, b2 = params
    n = x.shape[0]
    a, p = _forward(params, x)
    loss = -np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-300)))
    dz2 = p.copy()
    dz2[np.arange(n), y] -= 1.0
    dz2 /= n
    gw2 = a.T @ dz2
    gb2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2.T) * (1.0 - a * a)
    gw1 = x.T @ dz1
    gb1 = dz1.sum(axis=0)
    return loss, (gw1, gb1, gw2, gb2)


def _normalise(m: ClassifierModel, feats: np.ndarray) -> np.ndarray:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if feats.shape[1] != m.input_dim:
        raise ValueError(f"feature dimension {feats.shape[1]} != model input {m.input_dim}")
    return (feats - m.feature_mean) / m.feature_scale


def predict_proba_features(m: ClassifierModel, feats: np.ndarray) -> np.ndarray:
    return _forward(m.params(), _normalise(m, feats))[1]


def embed_features(m: ClassifierModel, feats: np.ndarray) -> np.ndarray:
    return _forward(m.params(), _normalise(m, feats))[0]


def predict_proba(m: ClassifierModel, p: Patch) -> np.ndarray:
    return predict_proba_features(m, extract_features(p).vector[None])[0]


def embed(m: ClassifierModel, p: Patch) -> np.ndarray:
    return embed_features(m, extract_features(p).vector[None])[0]


def mean_loss(m: ClassifierModel, feats: np.ndarray, labels: np.ndarray) -> float:
    return float(loss_and_grads(m.params(), _normalise(m, feats), np.asarray(labels))[0])


def _sgd(params, x, y, cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in params]
    velocity = [np.zeros_like(p) for p in params]
    lr = cfg.initial_lr
    best = loss_and_grads(params, x, y)[0]
    stall = 0
    history = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grads(params, x[idx], y[idx])
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= lr * g
                p += v
        loss = loss_and_grads(params, x, y)[0]
        if not np.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        history.append(float(loss))
        if loss < best * (1.0 - PLATEAU_TOL):
            best = loss
            stall = 0
        else:
            stall += 1
            if stall >= cfg.plateau_patience:
                lr /= cfg.lr_drop_factor
                stall = 0
    return params, history


def _hyper(cfg: TrainConfig, history, stage: str) -> dict:
    return {
        "stage": stage,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "momentum": cfg.momentum,
        "initial_lr": cfg.initial_lr,
        "lr_drop_factor": cfg.lr_drop_factor,
        "plateau_patience": cfg.plateau_patience,
        "seed": cfg.seed,
        "loss_history": list(history),
    }


def _labels(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=np.intp)


def feature_blocks(bands: int) -> list[slice]:
    """Slices of the intensity, gradient, mean and std blocks of a feature vector."""
    nb = INTENSITY_BINS * bands
    g = nb + ORIENTATION_BINS
    return [slice(0, nb), slice(nb, g), slice(g, g + bands), slice(g + bands, g + 2 * bands)]


def block_scale(feats: np.ndarray, blocks: Sequence[slice] | None) -> np.ndarray:
    """Normalisation scale: the RMS standard deviation of each feature block.

    A shared scale per block keeps rarely active histogram bins from being
    inflated by their tiny individual spread. Without blocks every feature is
    its own block.
    """
    std = feats.std(axis=0)
    if blocks is None:
        return np.where(std > 1e-8, std, 1.0)
    scale = np.ones(feats.shape[1])
    for b in blocks:
        rms = float(np.sqrt(np.mean(std[b] ** 2)))
        scale[b] = rms if rms > 1e-8 else 1.0
    return scale


def train_features(
    feats: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    num_classes: int | None = None,
    blocks: Sequence[slice] | None = None,
) -> ClassifierModel:
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if feats.ndim != 2 or feats.shape[0] != labels.shape[0] or feats.shape[0] == 0:
        raise ValueError("features and labels must be non-empty and aligned")
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside 0..{k - 1}")
    counts = np.bincount(labels, minlength=k)
    if k < 2 or np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise TrainingError(f"class coverage violated: need >= 2 classes, missing {missing}")
    mean = feats.mean(axis=0)
    scale = block_scale(feats, blocks)
    x = (feats - mean) / scale
    rng = np.random.default_rng(cfg.seed)
    d = feats.shape[1]
    init = [
        rng.normal(0.0, INIT_STD, size=(d, cfg.hidden)),
        np.zeros(cfg.hidden),
        rng.normal(0.0, INIT_STD, size=(cfg.hidden, k)),
        np.zeros(k),
    ]
    # Separate stream for shuffling so init and batch order are both seeded.
    params, history = _sgd(init, x, labels, replace(cfg, seed=cfg.seed + 1))
    return ClassifierModel(*params, feature_mean=mean, feature_scale=scale, hyper=_hyper(cfg, history, "train"))


def train(samples: Sequence[LabeledSample], cfg: TrainConfig, num_classes: int | None = None) -> ClassifierModel:
    if not samples:
        raise TrainingError("class coverage violated: no training samples")
    bands = samples[0].patch.pixels.bands
    feats = patch_features([s.patch for s in samples])
    return train_features(feats, _labels(samples), cfg, num_classes, feature_blocks(bands))


def fine_tune_features(m: ClassifierModel, feats: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> ClassifierModel:
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.intp)
    if feats.shape[0] == 0:
        raise ValueError("fine-tuning needs at least one sample")
    if feats.shape[1] != m.input_dim:
        raise ValueError(f"feature dimension {feats.shape[1]} != model input {m.input_dim}")
    if labels.min() < 0 or labels.max() >= m.num_classes:
        raise ValueError(f"labels outside 0..{m.num_classes - 1}")
    if cfg.epochs == 0:
        return m
    x = _normalise(m, feats)
    params, history = _sgd(m.params(), x, labels, cfg)
    return ClassifierModel(
        *params, feature_mean=m.feature_mean, feature_scale=m.feature_scale, hyper=_hyper(cfg, history, "fine_tune")
    )


def fine_tune(m: ClassifierModel, samples: Sequence[LabeledSample], cfg: TrainConfig) -> ClassifierModel:
    if not samples:
        raise ValueError("fine-tuning needs at least one sample")
    return fine_tune_features(m, patch_features([s.patch for s in samples]), _labels(samples), cfg)


def save_model(m: ClassifierModel, path: str | os.PathLike) -> None:
    header = f"{MODEL_MAGIC} {MODEL_VERSION} {m.input_dim} {m.hidden} {m.num_classes}\n"
    meta = json.dumps(m.hyper, sort_keys=True, separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(meta.encode("utf-8"))
        fh.write(np.ascontiguousarray(m.parameter_vector(), dtype="<f8").tobytes())


def load_model(path: str | os.PathLike) -> ClassifierModel:
    with open(path, "rb") as fh:
        parts = fh.readline(256).decode("ascii", errors="replace").split()
        if len(parts) != 5 or parts[0] != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: not a {MODEL_MAGIC} model file")
        if parts[1] != str(MODEL_VERSION):
            raise ModelFormatError(f"{path}: unsupported model version {parts[1]}")
        try:
            d, h, k = (int(v) for v in parts[2:])
        except ValueError:
            raise ModelFormatError(f"{path}: bad dimensions in header") from None
        try:
            hyper = json.loads(fh.readline().decode("utf-8"))
        except ValueError:
            raise ModelFormatError(f"{path}: bad hyperparameter record") from None
        sizes = [d, d, d * h, h, h * k, k]
        payload = fh.read()
    if len(payload) != 8 * sum(sizes):
        raise ModelFormatError(f"{path}: expected {8 * sum(sizes)} parameter bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8")
    chunks = np.split(flat, np.cumsum(sizes)[:-1])
    mean, scale, w1, b1, w2, b2 = chunks
    return ClassifierModel(w1.reshape(d, h), b1, w2.reshape(h, k), b2, feature_mean=mean, feature_scale=scale, hyper=hyper)

"""Synthetic labelled scenes standing in for annotated satellite tiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import LabelMask, MultibandRaster

DEFAULT_MEANS = (
    (70.0, 95.0, 135.0),
    (140.0, 105.0, 70.0),
    (95.0, 150.0, 90.0),
    (125.0, 80.0, 125.0),
    (60.0, 60.0, 60.0),
)
DEFAULT_FREQS = (0.0, 0.06, 0.12, 0.25, 0.0)
DEFAULT_AMPS = (0.0, 30.0, 30.0, 30.0, 0.0)


def _per_class(values, k: int, name: str) -> tuple:
    values = tuple(values)
    if len(values) < k:
        raise ValueError(f"{name}: need {k} entries, got {len(values)}")
    return values


@dataclass(frozen=True)
class SceneSpec:
    """Layout and appearance of a synthetic scene.

    Regions are Voronoi cells around ``voronoi_seeds`` random points, each
    assigned a class (every class appears when ``voronoi_seeds >= K``). A pixel
    is ``clamp(gain * clamp(mean + texture + noise) + offset)``, where the
    texture is a per-class oriented sinusoid with a random phase per region.
    ``region_jitter`` adds a per-region, per-band brightness offset drawn from
    a zero-mean Gaussian of that standard deviation. ``illumination`` is the
    half-range of a linear brightness ramp across the scene in a random
    direction, as left behind by haze or varying sun angle.
    Optional fine structures are ``fine_count`` squares of ``fine_size`` pixels
    of class ``fine_class`` pasted over the layout.
    """

    width: int = 256
    height: int = 256
    bands: int = 3
    num_classes: int = 4
    class_means: tuple = DEFAULT_MEANS
    noise_std: float = 8.0
    texture_freq: tuple = DEFAULT_FREQS
    texture_amp: tuple = DEFAULT_AMPS
    voronoi_seeds: int = 12
    region_jitter: float = 0.0
    illumination: float = 0.0
    gain: tuple = (1.0,)
    offset: tuple = (0.0,)
    fine_class: int = -1
    fine_size: int = 8
    fine_count: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.bands < 1:
            raise ValueError("scene dimensions and band count must be positive")
        if self.num_classes < 2:
            raise ValueError("a scene needs at least two classes")
        means = tuple(tuple(float(v) for v in row) for row in _per_class(self.class_means, self.num_classes, "class_means"))
        if any(len(row) < self.bands for row in means):
            raise ValueError("class_means rows must cover every band")
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "texture_freq", tuple(float(v) for v in _per_class(self.texture_freq, self.num_classes, "texture_freq")))
        object.__setattr__(self, "texture_amp", tuple(float(v) for v in _per_class(self.texture_amp, self.num_classes, "texture_amp")))
        object.__setattr__(self, "gain", self._band_tuple(self.gain, "gain"))
        object.__setattr__(self, "offset", self._band_tuple(self.offset, "offset"))
        if any(g <= 0 for g in self.gain):
            raise ValueError("gains must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.region_jitter < 0:
            raise ValueError("region_jitter must be >= 0")
        if self.illumination < 0:
            raise ValueError("illumination must be >= 0")
        if self.voronoi_seeds < 1:
            raise ValueError("voronoi_seeds must be >= 1")
        if self.fine_count and not 0 <= self.fine_class < self.num_classes:
            raise ValueError("fine_class must be a valid class when fine_count > 0")

    def _band_tuple(self, values, name):
        values = tuple(float(v) for v in np.atleast_1d(values))
        if len(values) == 1:
            values = values * self.bands
        if len(values) != self.bands:
            raise ValueError(f"{name} needs 1 or {self.bands} entries")
        return values

    @property
    def shifted(self) -> bool:
        return any(g != 1.0 for g in self.gain) or any(o != 0.0 for o in self.offset)


def voronoi_layout(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """Region index per pixel, plus each region's class, texture phase and brightness offset."""
    n = spec.voronoi_seeds
    px = rng.uniform(0, spec.width, size=n)
    py = rng.uniform(0, spec.height, size=n)
    classes = np.arange(n) % spec.num_classes
    rng.shuffle(classes)
    phases = rng.uniform(0, 2 * np.pi, size=n)
    jitter = rng.normal(0.0, 1.0, size=(n, spec.bands)) * spec.region_jitter
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    region = np.zeros((spec.height, spec.width), dtype=np.intp)
    best = np.full((spec.height, spec.width), np.inf)
    for i in range(n):
        d = (xs + 0.5 - px[i]) ** 2 + (ys + 0.5 - py[i]) ** 2
        closer = d < best
        region[closer] = i
        best[closer] = d[closer]
    return region, classes, phases, jitter


def synth_scene(spec: SceneSpec) -> tuple[MultibandRaster, LabelMask]:
    rng = np.random.default_rng(spec.seed)
    region, classes, phases, jitter = voronoi_layout(spec, rng)
    labels = classes[region]
    phase = phases[region]
    if spec.fine_count:
        s = spec.fine_size
        fx = rng.integers(0, max(spec.width - s, 0) + 1, size=spec.fine_count)
        fy = rng.integers(0, max(spec.height - s, 0) + 1, size=spec.fine_count)
        for x, y in zip(fx, fy):
            labels[y : y + s, x : x + s] = spec.fine_class
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    k = spec.num_classes
    angles = np.pi * np.arange(k) / k
    freq = np.asarray(spec.texture_freq[:k])[labels]
    amp = np.asarray(spec.texture_amp[:k])[labels]
    ang = angles[labels]
    texture = amp * np.sin(2 * np.pi * freq * (xs * np.cos(ang) + ys * np.sin(ang)) + phase)
    class_means = np.array([row[: spec.bands] for row in spec.class_means[:k]])
    means = class_means[labels] + jitter[region]  # (h, w, bands)
    noise = rng.normal(0.0, 1.0, size=(spec.bands, spec.height, spec.width)) * spec.noise_std
    phi = rng.uniform(0, 2 * np.pi)
    proj = (xs - spec.width / 2) * np.cos(phi) + (ys - spec.height / 2) * np.sin(phi)
    ramp = spec.illumination * proj / max(np.abs(proj).max(), 1e-12)
    data = np.moveaxis(means, -1, 0) + (texture + ramp)[None] + noise
    data = np.clip(data, 0.0, 255.0)
    if spec.shifted:
        # shift what an unshifted scene would store, so the two agree exactly
        data = data.astype(np.float32).astype(np.float64)
        gain = np.asarray(spec.gain)[:, None, None]
        offset = np.asarray(spec.offset)[:, None, None]
        data = np.clip(gain * data + offset, 0.0, 255.0)
    return MultibandRaster(data), LabelMask(labels.astype(np.uint16), k)

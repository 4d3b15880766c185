"""Multiband rasters, label masks and their on-disk formats.

Rasters are held as ``(bands, height, width)`` float32 arrays. The sample at
column ``x``, row ``y`` and band ``b`` is ``data[b, y, x]``.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BACKGROUND = 0xFFFF

RASTER_MAGIC = "MBR1"
MASK_MAGIC = "MSK1"


class RasterFormatError(ValueError):
    """Base class for malformed raster or mask files."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class MalformedHeaderError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class BandCountError(RasterFormatError):
    pass


class WindowError(ValueError):
    """A crop window does not fit inside the raster."""


@dataclass(frozen=True, eq=False)
class MultibandRaster:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"raster data must be (bands, height, width), got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise BandCountError("bands", "raster must have at least one band")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"raster must be at least 1x1, got {arr.shape[2]}x{arr.shape[1]}")
        arr = np.array(arr, dtype=np.float32, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def sample(self, x: int, y: int, b: int) -> float:
        return float(self.data[b, y, x])

    def __eq__(self, other):
        if not isinstance(other, MultibandRaster):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class LabelMask:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask labels must be a non-empty 2-D array, got shape {arr.shape}")
        if not 1 <= self.num_classes < BACKGROUND:
            raise ValueError(f"num_classes out of range: {self.num_classes}")
        if arr.size and arr.min() < 0:
            raise ValueError("mask labels must be non-negative")
        arr = np.array(arr, dtype=np.uint16, copy=True)
        bad = (arr != BACKGROUND) & (arr >= self.num_classes)
        if bad.any():
            raise ValueError(f"label {int(arr[bad][0])} >= num_classes {self.num_classes}")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabelMask):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.labels.shape == other.labels.shape
            and np.array_equal(self.labels, other.labels)
        )

    def __hash__(self):
        return hash((self.num_classes, self.labels.shape, self.labels.tobytes()))


@dataclass(frozen=True)
class ColorLegend:
    """Display colors and names for class ids ``0..K-1``."""

    colors: tuple[tuple[int, int, int], ...]
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        colors = tuple(tuple(int(v) for v in c) for c in self.colors)
        if not colors:
            raise ValueError("legend needs at least one class")
        for c in colors:
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise ValueError(f"invalid RGB color {c}")
        if len(set(colors)) != len(colors):
            raise ValueError("legend colors must be pairwise distinct")
        if (0, 0, 0) in colors:
            raise ValueError("black is reserved for BACKGROUND")
        names = tuple(self.names) or tuple(f"class_{i}" for i in range(len(colors)))
        if len(names) != len(colors):
            raise ValueError("legend names and colors differ in length")
        object.__setattr__(self, "colors", colors)
        object.__setattr__(self, "names", names)

    @property
    def num_classes(self) -> int:
        return len(self.colors)

    def color_of(self, label: int) -> tuple[int, int, int]:
        if label == BACKGROUND:
            return (0, 0, 0)
        return self.colors[label]

    def lookup_table(self) -> np.ndarray:
        """Return a ``(BACKGROUND + 1, 3)`` uint8 table; unused ids render black."""
        table = np.zeros((BACKGROUND + 1, 3), dtype=np.uint8)
        table[: self.num_classes] = np.asarray(self.colors, dtype=np.uint8)
        return table


# Five land-cover colours, then a few extras for larger label sets.
DEFAULT_COLORS = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 255, 255),
    (255, 255, 0),
    (0, 0, 255),
    (255, 0, 255),
    (128, 128, 128),
    (255, 128, 0),
    (128, 0, 255),
    (0, 128, 64),
    (128, 64, 0),
    (255, 192, 203),
    (64, 64, 128),
    (192, 255, 128),
    (0, 64, 128),
)
DEFAULT_NAMES = ("built-up", "farmland", "forest", "meadow", "water")


def default_legend(num_classes: int) -> ColorLegend:
    if num_classes > len(DEFAULT_COLORS):
        raise ValueError(f"no default legend for {num_classes} classes")
    names = DEFAULT_NAMES[:num_classes] if num_classes <= len(DEFAULT_NAMES) else ()
    return ColorLegend(DEFAULT_COLORS[:num_classes], names)


def _read_header(fh, magic: str, path) -> tuple[int, int, int]:
    line = fh.readline(256)
    if not line.endswith(b"\n"):
        raise MalformedHeaderError("header", f"{path}: missing header line")
    try:
        parts = line.decode("ascii").split()
    except UnicodeDecodeError:
        raise MalformedHeaderError("header", f"{path}: header is not ASCII") from None
    if len(parts) != 4:
        raise MalformedHeaderError("header", f"{path}: expected 4 header fields, got {len(parts)}")
    if parts[0] != magic:
        raise MalformedHeaderError("magic", f"{path}: expected {magic!r}, got {parts[0]!r}")
    values = []
    for name, tok in zip(("width", "height", "third"), parts[1:]):
        try:
            values.append(int(tok))
        except ValueError:
            raise MalformedHeaderError(name, f"{path}: not an integer: {tok!r}") from None
    w, h, third = values
    if w < 1:
        raise MalformedHeaderError("width", f"{path}: width must be >= 1, got {w}")
    if h < 1:
        raise MalformedHeaderError("height", f"{path}: height must be >= 1, got {h}")
    return w, h, third


def read_raster(path: str | os.PathLike) -> MultibandRaster:
    with open(path, "rb") as fh:
        w, h, bands = _read_header(fh, RASTER_MAGIC, path)
        if bands < 1:
            raise BandCountError("bands", f"{path}: band count must be >= 1, got {bands}")
        expected = w * h * bands * 4
        payload = fh.read(expected + 1)
    if len(payload) < expected:
        raise TruncatedPayloadError(
            "payload", f"{path}: expected {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise MalformedHeaderError("payload", f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, h, w)
    return MultibandRaster(data)


def write_raster(r: MultibandRaster, path: str | os.PathLike) -> None:
    if r.bands < 1:
        raise BandCountError("bands", "cannot write a raster with no bands")
    header = f"{RASTER_MAGIC} {r.width} {r.height} {r.bands}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(r.data, dtype="<f4").tobytes())


def read_mask(path: str | os.PathLike) -> LabelMask:
    with open(path, "rb") as fh:
        w, h, k = _read_header(fh, MASK_MAGIC, path)
        if not 1 <= k < BACKGROUND:
            raise MalformedHeaderError("num_classes", f"{path}: invalid class count {k}")
        expected = w * h * 2
        payload = fh.read(expected + 1)
    if len(payload) < expected:
        raise TruncatedPayloadError(
            "payload", f"{path}: expected {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise MalformedHeaderError("payload", f"{path}: trailing bytes after payload")
    labels = np.frombuffer(payload, dtype="<u2").reshape(h, w)
    try:
        return LabelMask(labels, k)
    except ValueError as exc:
        raise RasterFormatError("labels", f"{path}: {exc}") from None


def write_mask(m: LabelMask, path: str | os.PathLike) -> None:
    header = f"{MASK_MAGIC} {m.width} {m.height} {m.num_classes}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(m.labels, dtype="<u2").tobytes())


def render_mask(m: LabelMask, legend: ColorLegend) -> np.ndarray:
    """Return an ``(height, width, 3)`` uint8 RGB rendering of ``m``."""
    if legend.num_classes < m.num_classes:
        raise ValueError(f"legend has {legend.num_classes} colors, mask needs {m.num_classes}")
    return legend.lookup_table()[m.labels]


def export_mask_image(m: LabelMask, legend: ColorLegend, path: str | os.PathLike) -> None:
    from PIL import Image

    Image.fromarray(render_mask(m, legend), mode="RGB").save(path)


def crop(r: MultibandRaster, x: int, y: int, w: int, h: int, clamp: bool = False) -> MultibandRaster:
    """Cut a ``w x h`` window whose top-left corner is ``(x, y)``.

    With ``clamp=True`` a window hanging over an edge is shifted inward (and
    shrunk to the raster size if it is larger than the raster).
    """
    if w < 1 or h < 1:
        raise WindowError(f"window size must be positive, got {w}x{h}")
    if clamp:
        x, y, w, h = clamp_window(x, y, w, h, r.width, r.height)
    elif x < 0 or y < 0 or x + w > r.width or y + h > r.height:
        raise WindowError(
            f"window ({x}, {y}, {w}, {h}) exceeds raster bounds {r.width}x{r.height}"
        )
    return MultibandRaster(r.data[:, y : y + h, x : x + w])


def clamp_window(x: int, y: int, w: int, h: int, width: int, height: int) -> tuple[int, int, int, int]:
    w = min(w, width)
    h = min(h, height)
    x = min(max(x, 0), width - w)
    y = min(max(y, 0), height - h)
    return x, y, w, h


@functools.lru_cache(maxsize=256)
def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Pixel-centre alignment; samples outside the source clamp to the edge.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    for a in (i0, i1, frac):
        a.setflags(write=False)
    return i0, i1, frac


def resize_array(data: np.ndarray, w: int, h: int) -> np.ndarray:
    """Bilinearly resize the last two axes of ``data`` to ``(h, w)``.

    Works on any leading shape, so a stack of patches can be resized at once.
    Returns float64.
    """
    if w < 1 or h < 1:
        raise ValueError(f"target size must be positive, got {w}x{h}")
    data = np.asarray(data, dtype=np.float64)
    in_h, in_w = data.shape[-2:]
    if (in_h, in_w) == (h, w):
        return data.copy()
    y0, y1, fy = _axis_weights(in_h, h)
    x0, x1, fx = _axis_weights(in_w, w)
    top = data[..., y0, :]
    bottom = data[..., y1, :]
    rows = top + fy[:, None] * (bottom - top)
    left = rows[..., x0]
    right = rows[..., x1]
    return left + fx * (right - left)


def resize_bilinear(r: MultibandRaster, w: int, h: int) -> MultibandRaster:
    return MultibandRaster(resize_array(r.data, w, h))


def stack_rasters(rasters: Sequence[MultibandRaster]) -> np.ndarray:
    return np.stack([r.data for r in rasters])

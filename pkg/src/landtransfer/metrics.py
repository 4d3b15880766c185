"""Confusion matrices, Kappa, overall accuracy and user's accuracy.

Only pixels with a non-background ground truth are scored. A BACKGROUND
prediction under labelled truth is counted in a separate ``rejected`` column:
it is an error, so it stays in the row totals but never in a class column.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .raster import BACKGROUND, LabelMask


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray
    rejected: np.ndarray | None = None

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion counts must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        rej = np.zeros(counts.shape[0], dtype=np.int64) if self.rejected is None else np.array(self.rejected, dtype=np.int64)
        if rej.shape != (counts.shape[0],) or (rej < 0).any():
            raise ValueError("rejected column must be a non-negative vector of length K")
        counts.setflags(write=False)
        rej.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "rejected", rej)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def row_totals(self) -> np.ndarray:
        """``t_a``: labelled pixels of each true class."""
        return self.counts.sum(axis=1) + self.rejected

    @property
    def column_totals(self) -> np.ndarray:
        """``t_b``: pixels predicted as each class."""
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.row_totals.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.rejected + other.rejected)

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts) and np.array_equal(self.rejected, other.rejected)

    __hash__ = None  # type: ignore[assignment]


class EmptyMatrixError(ValueError):
    pass


def confusion(truth: LabelMask, pred: LabelMask, num_classes: int) -> ConfusionMatrix:
    if truth.labels.shape != pred.labels.shape:
        raise ValueError(f"truth {truth.labels.shape} and prediction {pred.labels.shape} shapes differ")
    t = truth.labels.ravel().astype(np.int64)
    p = pred.labels.ravel().astype(np.int64)
    scored = t != BACKGROUND
    t, p = t[scored], p[scored]
    if (t >= num_classes).any():
        raise ValueError(f"truth label {int(t[t >= num_classes][0])} >= K={num_classes}")
    bad = (p != BACKGROUND) & (p >= num_classes)
    if bad.any():
        raise ValueError(f"predicted label {int(p[bad][0])} >= K={num_classes}")
    rej = p == BACKGROUND
    counts = np.bincount(t[~rej] * num_classes + p[~rej], minlength=num_classes * num_classes)
    rejected = np.bincount(t[rej], minlength=num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes), rejected)


def _require_total(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total <= 0:
        raise EmptyMatrixError("confusion matrix holds no labelled pixels")
    return float(total)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts)) / _require_total(cm)


def chance_agreement(cm: ConfusionMatrix) -> float:
    total = _require_total(cm)
    return float(np.dot(cm.row_totals.astype(np.float64), cm.column_totals.astype(np.float64))) / (total * total)


def kappa(cm: ConfusionMatrix, return_flag: bool = False):
    """Cohen's kappa. When chance agreement is 1 the value is defined as 0.

    With ``return_flag=True`` returns ``(kappa, degenerate)``.
    """
    po = overall_accuracy(cm)
    pc = chance_agreement(cm)
    degenerate = pc >= 1.0
    value = 0.0 if degenerate else (po - pc) / (1.0 - pc)
    return (value, degenerate) if return_flag else value


def users_accuracy(cm: ConfusionMatrix, b: int) -> float | None:
    """Fraction of pixels predicted as ``b`` that are truly ``b``; ``None`` if none were predicted."""
    if not 0 <= b < cm.num_classes:
        raise ValueError(f"class id {b} outside 0..{cm.num_classes - 1}")
    tb = int(cm.column_totals[b])
    if tb == 0:
        return None
    return float(cm.counts[b, b]) / tb


@dataclass(frozen=True)
class MetricReport:
    kappa: float
    overall_accuracy: float
    users_accuracy: tuple[float | None, ...]
    class_names: tuple[str, ...]
    labelled_pixels: int
    kappa_degenerate: bool = False


def report_from_confusion(cm: ConfusionMatrix, class_names: Sequence[str] | None = None) -> MetricReport:
    names = tuple(class_names) if class_names else tuple(f"class_{i}" for i in range(cm.num_classes))
    if len(names) != cm.num_classes:
        raise ValueError("class_names length differs from class count")
    k, degenerate = kappa(cm, return_flag=True)
    return MetricReport(
        kappa=k,
        overall_accuracy=overall_accuracy(cm),
        users_accuracy=tuple(users_accuracy(cm, b) for b in range(cm.num_classes)),
        class_names=names,
        labelled_pixels=cm.total,
        kappa_degenerate=degenerate,
    )


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else repr(float(v))


def report_csv(rep: MetricReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kappa", "oa", *(f"ua_{n}" for n in rep.class_names)])
    writer.writerow([_fmt(rep.kappa), _fmt(rep.overall_accuracy), *(_fmt(v) for v in rep.users_accuracy)])
    return buf.getvalue()


def report_text(rep: MetricReport, note: str | None = None) -> str:
    lines = [
        f"Kappa    {rep.kappa:.4f}" + ("  (degenerate: chance agreement is 1)" if rep.kappa_degenerate else ""),
        f"OA (%)   {100 * rep.overall_accuracy:.2f}",
        f"Labelled pixels {rep.labelled_pixels}",
        "User's accuracy (%)",
    ]
    for name, ua in zip(rep.class_names, rep.users_accuracy):
        lines.append(f"  {name:<12} {'n/a' if ua is None else f'{100 * ua:.2f}'}")
    if note:
        lines.append(note)
    return "\n".join(lines) + "\n"


def write_report(rep: MetricReport, prefix: str | os.PathLike, note: str | None = None) -> tuple[str, str]:
    prefix = os.fspath(prefix)
    csv_path, txt_path = prefix + ".csv", prefix + ".txt"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report_csv(rep))
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(report_text(rep, note))
    return csv_path, txt_path


def read_report_csv(path: str | os.PathLike) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    header, values = rows[0], rows[1]
    parsed = {h: (None if v == "n/a" else float(v)) for h, v in zip(header, values)}
    return {
        "kappa": parsed.pop("kappa"),
        "oa": parsed.pop("oa"),
        "users_accuracy": {h[3:]: v for h, v in parsed.items()},
    }

"""Object-based majority voting of a patch-wise map over segmentation regions."""

from __future__ import annotations

import numpy as np

from .raster import BACKGROUND, LabelMask
from .segmentation import Segmentation


def region_label_counts(classified: LabelMask, seg: Segmentation) -> np.ndarray:
    """``(regions, K)`` table of non-background label counts per region."""
    if (classified.width, classified.height) != (seg.width, seg.height):
        raise ValueError(
            f"map {classified.width}x{classified.height} and segmentation {seg.width}x{seg.height} differ"
        )
    k = classified.num_classes
    labels = classified.labels.ravel().astype(np.int64)
    ids = seg.region_ids.ravel().astype(np.int64)
    valid = labels != BACKGROUND
    counts = np.bincount(ids[valid] * k + labels[valid], minlength=seg.region_count * k)
    return counts.reshape(seg.region_count, k)


def majority_vote(classified: LabelMask, seg: Segmentation) -> LabelMask:
    """Give every region the most frequent label of its pixels.

    BACKGROUND pixels do not vote; a region with no labelled pixel stays
    BACKGROUND. Ties go to the lowest class id.
    """
    counts = region_label_counts(classified, seg)
    winner = counts.argmax(axis=1).astype(np.uint16)
    winner[counts.sum(axis=1) == 0] = BACKGROUND
    return LabelMask(winner[seg.region_ids], classified.num_classes)

"""Mask post-processing and localization / classification metrics."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .boxlabels import BoxAnnotation

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def mask_to_box(mask_probs, threshold: float = 0.5) -> BoxAnnotation | None:
    """Tight box of the largest 8-connected component of ``mask_probs > threshold``.

    Equal-size components resolve to the one whose first pixel in raster
    order comes first. Returns None when no pixel exceeds the threshold.
    """
    binary = np.asarray(mask_probs) > threshold
    labels, count = ndimage.label(binary, structure=EIGHT_CONNECTED)
    if count == 0:
        return None
    # ndimage numbers components in raster order of their first pixel,
    # so argmax (first maximum) implements the tie rule
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    rows, cols = np.nonzero(labels == best)
    return BoxAnnotation(int(cols.min()), int(rows.min()),
                         int(cols.max() - cols.min() + 1), int(rows.max() - rows.min() + 1))


def iou(a: BoxAnnotation | None, b: BoxAnnotation | None) -> float:
    if a is None or b is None:
        return 0.0
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(iw, 0) * max(ih, 0)
    union = a.w * a.h + b.w * b.h - inter
    return float(inter / union) if union > 0 else 0.0


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predicted == labels))

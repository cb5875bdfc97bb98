"""Discrete box labels from bounding-box geometry.

Each box yields four features (area, symmetric squareness, width, height).
Features are Min-Max scaled with statistics from a training split, then
clustered with K-means; the cluster index is the box label.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnnotationError, UsageError

log = logging.getLogger(__name__)

FEATURE_NAMES = ("area", "ss", "w", "h")
MAX_ITER = 300


@dataclass(frozen=True)
class BoxAnnotation:
    """Axis-aligned box; covers columns [x, x+w) and rows [y, y+h)."""

    x: float
    y: float
    w: float
    h: float

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class BoxFeatures:
    area: float
    ss: float
    w: float
    h: float

    def vector(self) -> np.ndarray:
        return np.array([self.area, self.ss, self.w, self.h], dtype=np.float64)


def symmetric_squareness(w: float, h: float) -> float:
    """``1 - min(w/h, h/w)``: 0 for squares, toward 1 for elongated boxes."""
    return 1.0 - min(w, h) / max(w, h)


def compute_features(box: BoxAnnotation, ident=None) -> BoxFeatures:
    if not (box.w > 0 and box.h > 0):
        who = f" (box {ident})" if ident is not None else ""
        raise AnnotationError(f"box{who} has nonpositive dimension: w={box.w}, h={box.h}")
    return BoxFeatures(area=box.w * box.h, ss=symmetric_squareness(box.w, box.h), w=box.w, h=box.h)


def feature_matrix(boxes: Sequence[BoxAnnotation]) -> np.ndarray:
    return np.array([compute_features(b, i).vector() for i, b in enumerate(boxes)]).reshape(-1, 4)


@dataclass
class NormStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def to_dict(self) -> dict:
        return {"features": list(FEATURE_NAMES), "min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64))


def fit_minmax(features) -> NormStats:
    """Per-column min and max of an (N, d) matrix or a list of BoxFeatures."""
    x = _as_matrix(features)
    if x.shape[0] == 0:
        raise UsageError("fit_minmax: empty feature list")
    return NormStats(x.min(axis=0), x.max(axis=0))


def apply_minmax(features, stats: NormStats) -> np.ndarray:
    """Scale to [0, 1] using ``stats``; unseen values are clamped, constant columns map to 0."""
    x = _as_matrix(features)
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - stats.minimum) / safe, 0.0)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if isinstance(features, BoxFeatures) else out


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, BoxFeatures):
        return features.vector()[None, :]
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features.astype(np.float64))
    rows = [f.vector() if isinstance(f, BoxFeatures) else np.asarray(f, dtype=np.float64) for f in features]
    if not rows:
        return np.zeros((0, len(FEATURE_NAMES)))
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# K-means


@dataclass
class KMeansModel:
    k: int
    centroids: np.ndarray
    wcss: float

    def assign(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return _nearest(pts, self.centroids)[0]


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    # argmin returns the first minimum, i.e. the lowest centroid index on ties
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(points)), labels]


def _plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_ITER) -> KMeansModel:
    """Lloyd iterations from given centroids until assignments stop changing."""
    centroids = centroids.astype(np.float64, copy=True)
    k = len(centroids)
    labels = None
    for _ in range(max_iter):
        new_labels, d2 = _nearest(points, centroids)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        for j in range(k):
            if not np.any(labels == j):
                # reseed an empty cluster at the point farthest from its own centroid
                far = int(np.argmax(((points - centroids[labels]) ** 2).sum(axis=1)))
                centroids[j] = points[far]
                labels[far] = j
    labels, d2 = _nearest(points, centroids)
    return KMeansModel(k=k, centroids=centroids, wcss=float(d2.sum()))


def kmeans_fit(points, k: int, seed: int = 0, restarts: int = 10) -> KMeansModel:
    """Best-of-``restarts`` Lloyd runs with k-means++ seeding.

    Ties in WCSS keep the lowest restart index.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(pts)
    if k < 1 or n < k:
        raise UsageError(f"kmeans_fit: need 1 <= k <= N, got k={k}, N={n}")
    if restarts < 1:
        raise UsageError("kmeans_fit: restarts must be >= 1")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, k, r])
        model = lloyd(pts, _plus_plus(pts, k, rng))
        if best is None or model.wcss < best.wcss:
            best = model
    return best


def kmeans_assign(model: KMeansModel, point) -> int:
    return int(model.assign(point)[0])


def wcss_curve(points, k_max: int, seed: int = 0, restarts: int = 10) -> list[tuple[int, float]]:
    """(k, WCSS) for k = 1..k_max, made non-increasing by a split candidate.

    For each k > 1, the k-1 solution plus its worst-fit point as a new
    centroid is refined with Lloyd and competes with the fresh fit.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k_max > len(pts):
        raise UsageError(f"wcss_curve: k_max={k_max} exceeds N={len(pts)}")
    if k_max < 3:
        warnings.warn("wcss_curve: k_max < 3 cannot show an inflection point", stacklevel=2)
    curve: list[tuple[int, float]] = []
    prev = None
    for k in range(1, k_max + 1):
        model = kmeans_fit(pts, k, seed=seed, restarts=restarts)
        if prev is not None:
            labels, d2 = _nearest(pts, prev.centroids)
            split = np.vstack([prev.centroids, pts[int(np.argmax(d2))]])
            candidate = lloyd(pts, split)
            if candidate.wcss < model.wcss:
                model = candidate
        curve.append((k, model.wcss))
        prev = model
    return curve


def elbow_suggest(curve: Sequence[tuple[int, float]]) -> int | None:
    """k maximizing the discrete second difference of WCSS over interior k."""
    if len(curve) < 3:
        warnings.warn("elbow_suggest: need at least 3 curve points", stacklevel=2)
        return None
    ks = [k for k, _ in curve]
    w = np.array([v for _, v in curve])
    second = w[:-2] - 2 * w[1:-1] + w[2:]
    return int(ks[1 + int(np.argmax(second))])


# ---------------------------------------------------------------------------
# fitted labeler and its artifact file


@dataclass
class BoxLabeler:
    """Frozen normalization statistics plus clustering: boxes -> labels."""

    stats: NormStats
    model: KMeansModel
    seed: int = 0
    restarts: int = 10

    @classmethod
    def fit(cls, boxes: Sequence[BoxAnnotation], k: int = 3, seed: int = 0, restarts: int = 10) -> "BoxLabeler":
        feats = feature_matrix(boxes)
        stats = fit_minmax(feats)
        model = kmeans_fit(apply_minmax(feats, stats), k, seed=seed, restarts=restarts)
        return cls(stats, model, seed, restarts)

    def normalized(self, boxes: Sequence[BoxAnnotation]) -> np.ndarray:
        return apply_minmax(feature_matrix(boxes), self.stats)

    def labels(self, boxes: Sequence[BoxAnnotation]) -> np.ndarray:
        if len(boxes) == 0:
            return np.zeros(0, dtype=int)
        return self.model.assign(self.normalized(boxes))

    def profile(self, boxes: Sequence[BoxAnnotation]) -> list[dict]:
        """Per-cluster size and mean normalized area / squareness."""
        x = self.normalized(boxes)
        lab = self.model.assign(x)
        rows = []
        for j in range(self.model.k):
            sel = x[lab == j]
            rows.append({
                "label": j,
                "count": int(len(sel)),
                "mean_area": float(sel[:, 0].mean()) if len(sel) else float("nan"),
                "mean_ss": float(sel[:, 1].mean()) if len(sel) else float("nan"),
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "k": self.model.k,
            "seed": self.seed,
            "restarts": self.restarts,
            "norm_stats": self.stats.to_dict(),
            "centroids": self.model.centroids.tolist(),
            "wcss": self.model.wcss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoxLabeler":
        try:
            centroids = np.asarray(d["centroids"], dtype=np.float64)
            model = KMeansModel(k=int(d["k"]), centroids=centroids, wcss=float(d["wcss"]))
            if centroids.shape != (model.k, len(FEATURE_NAMES)):
                raise UsageError(f"box-label artifact: centroids shape {centroids.shape} does not match k={model.k}")
            return cls(NormStats.from_dict(d["norm_stats"]), model, int(d.get("seed", 0)), int(d.get("restarts", 10)))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"malformed box-label artifact: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "BoxLabeler":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read box-label artifact {path}: {exc}") from exc

"""Triplet mining and the class / box / combined triplet losses.

The combined loss mixes a class-label term and a box-label term on the same
embeddings::

    L = (1 - lam) * L_class + lam * L_box

Each term mines its own triplets from its own labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

DISTANCES = ("squared_euclidean", "euclidean")
MINING = ("batch_all", "batch_hard")


@dataclass
class LossConfig:
    margin: float = 1.0
    lam: float = 0.0
    distance: str = "squared_euclidean"
    mining: str = "batch_all"
    normalize_embeddings: bool = False

    def validate(self) -> "LossConfig":
        if not self.margin >= 0:
            raise ConfigError(f"loss.margin: must be >= 0, got {self.margin}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss.lambda: must lie in [0, 1], got {self.lam}")
        if self.distance not in DISTANCES:
            raise ConfigError(f"loss.distance: expected one of {DISTANCES}, got {self.distance!r}")
        if self.mining not in MINING:
            raise ConfigError(f"loss.mining: expected one of {MINING}, got {self.mining!r}")
        return self


def mine_triplets(labels, mining: str = "batch_all", distances: np.ndarray | None = None) -> np.ndarray:
    """Return an (T, 3) array of (anchor, positive, negative) indices.

    ``batch_all`` enumerates every valid triplet in lexicographic order.
    ``batch_hard`` needs a pairwise ``distances`` matrix and keeps, per
    anchor, the farthest positive and the nearest negative (first index on ties).
    """
    y = np.asarray(labels).reshape(-1)
    n = len(y)
    same = y[:, None] == y[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    if mining == "batch_all":
        a, p, q = np.nonzero(pos[:, :, None] & neg[:, None, :])
        return np.stack([a, p, q], axis=1).astype(np.intp)
    if mining != "batch_hard":
        raise ConfigError(f"loss.mining: unknown strategy {mining!r}")
    if distances is None:
        raise DimensionError("mine_triplets: batch_hard needs a pairwise distance matrix")
    rows = []
    for a in range(n):
        if pos[a].any() and neg[a].any():
            p = int(np.argmax(np.where(pos[a], distances[a], -np.inf)))
            q = int(np.argmin(np.where(neg[a], distances[a], np.inf)))
            rows.append((a, p, q))
    return np.array(rows, dtype=np.intp).reshape(-1, 3)


def _pair_distance(x: Tensor, i, j, kind: str) -> Tensor:
    diff = ad.sub(ad.take_rows(x, i), ad.take_rows(x, j))
    d2 = ad.sum_(ad.mul(diff, diff), axis=1)
    return ad.sqrt(d2) if kind == "euclidean" else d2


def pairwise_distances(x: np.ndarray, kind: str = "squared_euclidean") -> np.ndarray:
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] - 2 * x @ x.T + sq[None, :], 0.0)
    return np.sqrt(d2) if kind == "euclidean" else d2


def _prepare(embeddings: Tensor, cfg: LossConfig) -> Tensor:
    return ad.l2_normalize(embeddings) if cfg.normalize_embeddings else embeddings


def triplet_loss(embeddings: Tensor, triplets, cfg: LossConfig) -> Tensor:
    """Mean over triplets of max(d(a, p) - d(a, n) + margin, 0).

    An empty triplet set yields a zero that still sits on the tape, so it
    contributes zero gradient.
    """
    t = np.asarray(triplets, dtype=np.intp).reshape(-1, 3)
    x = _prepare(embeddings, cfg)
    if len(t) == 0:
        return ad.mul_scalar(ad.sum_(x), 0.0)
    d_ap = _pair_distance(x, t[:, 0], t[:, 1], cfg.distance)
    d_an = _pair_distance(x, t[:, 0], t[:, 2], cfg.distance)
    hinge = ad.relu(ad.add_scalar(ad.sub(d_ap, d_an), cfg.margin))
    return ad.mean(hinge)


def label_triplet_loss(embeddings: Tensor, labels, cfg: LossConfig) -> Tensor:
    y = np.asarray(labels).reshape(-1)
    if len(y) != embeddings.shape[0]:
        raise DimensionError(f"triplet loss: {len(y)} labels for {embeddings.shape[0]} embeddings")
    dist = None
    if cfg.mining == "batch_hard":
        x = _prepare(embeddings, cfg).data if cfg.normalize_embeddings else embeddings.data
        dist = pairwise_distances(x.astype(np.float64), cfg.distance)
    return triplet_loss(embeddings, mine_triplets(y, cfg.mining, dist), cfg)


def class_triplet_loss(embeddings: Tensor, y_class, cfg: LossConfig) -> Tensor:
    return label_triplet_loss(embeddings, y_class, cfg)


def box_triplet_loss(embeddings: Tensor, y_box, cfg: LossConfig) -> Tensor:
    return label_triplet_loss(embeddings, y_box, cfg)


def matl_loss(embeddings: Tensor, y_class, y_box, cfg: LossConfig) -> Tensor:
    """(1 - lam) * class term + lam * box term, terms mined independently."""
    if len(np.asarray(y_class).reshape(-1)) != len(np.asarray(y_box).reshape(-1)):
        raise DimensionError("matl_loss: class and box label vectors differ in length")
    lam = cfg.lam
    lc = class_triplet_loss(embeddings, y_class, cfg)
    lb = box_triplet_loss(embeddings, y_box, cfg)
    return ad.add(ad.mul_scalar(lc, 1.0 - lam), ad.mul_scalar(lb, lam))

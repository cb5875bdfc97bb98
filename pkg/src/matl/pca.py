"""Two-component PCA of embeddings via deflated power iteration."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError

PCA_COLUMNS = ("id", "pc1", "pc2", "class_label", "box_label")


def power_eigenpairs(cov: np.ndarray, count: int = 2, tol: float = 1e-14,
                     max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Leading eigenpairs of a symmetric PSD matrix by power iteration with deflation.

    Stops early when the remaining spectrum is numerically zero. Each
    eigenvector's first nonzero component is made positive.
    """
    a = np.array(cov, dtype=np.float64)
    d = a.shape[0]
    scale = max(float(np.abs(a).max()), np.finfo(float).tiny)
    values, vectors = [], []
    # deterministic start that is unlikely to be orthogonal to any eigenvector
    start = 1.0 + np.arange(d) / (d + 1.0)
    for _ in range(min(count, d)):
        v = start / np.linalg.norm(start)
        lam = 0.0
        for _ in range(max_iter):
            w = a @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-13 * scale:
                lam = 0.0
                break
            w /= norm
            new_lam = float(w @ a @ w)
            if abs(new_lam - lam) <= tol * scale and np.linalg.norm(w - v) < 1e-10:
                v, lam = w, new_lam
                break
            v, lam = w, new_lam
        if lam <= 1e-12 * scale:
            break
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if len(nz) and v[nz[0]] < 0:
            v = -v
        values.append(lam)
        vectors.append(v)
        a = a - lam * np.outer(v, v)
    return np.array(values), np.array(vectors).reshape(len(values), d)


@dataclass
class PCAResult:
    scores: np.ndarray  # (N, 2); missing components are zero
    explained_variance: np.ndarray  # eigenvalues of the sample covariance
    components: np.ndarray  # (k, D), k <= 2


def pca_project(embeddings, n_components: int = 2) -> PCAResult:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise UsageError(f"PCA needs at least 3 embeddings as an (N, D) array, got shape {x.shape}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (x.shape[0] - 1)
    values, vectors = power_eigenpairs(cov, n_components)
    if len(values) < n_components:
        warnings.warn(f"only {len(values)} nonzero-variance direction(s); missing components are zero", stacklevel=2)
    scores = np.zeros((x.shape[0], n_components))
    if len(values):
        scores[:, :len(values)] = xc @ vectors.T
    return PCAResult(scores, values, vectors)


def pca_export(embeddings, class_labels, box_labels, ids=None) -> list[dict]:
    """Rows of (id, pc1, pc2, class_label, box_label)."""
    res = pca_project(embeddings)
    n = res.scores.shape[0]
    ids = [f"{i:05d}" for i in range(n)] if ids is None else list(ids)
    if not (len(ids) == len(class_labels) == len(box_labels) == n):
        raise UsageError("pca_export: ids, labels and embeddings differ in length")
    return [
        {"id": ids[i], "pc1": float(res.scores[i, 0]), "pc2": float(res.scores[i, 1]),
         "class_label": int(class_labels[i]), "box_label": "" if box_labels[i] is None else int(box_labels[i])}
        for i in range(n)
    ]


def write_pca_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PCA_COLUMNS)
        for r in rows:
            w.writerow([r["id"], repr(r["pc1"]), repr(r["pc2"]), r["class_label"], r["box_label"]])

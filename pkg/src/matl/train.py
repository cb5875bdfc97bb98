"""Training loop and evaluation for one model / loss configuration."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, TrainingError
from .data import Tile
from .metrics import accuracy, iou, mask_to_box
from .nn import MODES, Adam, Model, ModelConfig
from .triplet import LossConfig, class_triplet_loss, matl_loss

log = logging.getLogger(__name__)

LOSS_MODES = ("WTL", "CLTL", "MATL")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class ExperimentConfig:
    """One trainable configuration plus the evaluation protocol around it."""

    model_mode: str = "multi_task"
    loss_mode: str = "MATL"
    lam: float | None = 0.25
    folds: int = 8
    train_fraction: float = 0.30
    epochs: int = 16
    batch_size: int = 16
    learning_rate: float = 3e-3
    lr_schedule: str = "constant"
    embed_weight: float = 1.0
    seed: int = 0
    box_k: int = 3
    kmeans_restarts: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "ExperimentConfig":
        if self.model_mode not in MODES:
            raise ConfigError(f"model_mode: expected one of {MODES}, got {self.model_mode!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode: expected one of {LOSS_MODES}, got {self.loss_mode!r}")
        if (self.lam is not None) != (self.loss_mode == "MATL"):
            raise ConfigError("lambda: must be given for MATL and only for MATL")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda: must lie in [0, 1], got {self.lam}")
        if self.folds < 2:
            raise ConfigError(f"folds: must be >= 2, got {self.folds}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction: must lie in (0, 1), got {self.train_fraction}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate: must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule: expected one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        self.model.validate()
        self.loss.validate()
        return self

    def loss_config(self) -> LossConfig:
        return LossConfig(**{**asdict(self.loss), "lam": self.lam if self.lam is not None else 0.0})


@dataclass
class TrainResult:
    model: Model
    history: list[float]  # mean total loss per epoch
    batch_log: list[dict]  # per-batch sample indices and loss components


@dataclass
class Metrics:
    accuracy: float | None
    iou: float | None
    n: int


def images_tensor(tiles: Sequence[Tile], dtype=np.float32) -> ad.Tensor:
    return ad.Tensor(np.stack([t.image for t in tiles]).transpose(0, 3, 1, 2).astype(dtype, copy=False))


def _embed_term(cfg: ExperimentConfig, lcfg: LossConfig, emb: ad.Tensor, y_class, y_box) -> ad.Tensor | None:
    if cfg.loss_mode == "WTL":
        return None
    if cfg.loss_mode == "CLTL":
        return class_triplet_loss(emb, y_class, lcfg)
    return matl_loss(emb, y_class, y_box, lcfg)


def train(cfg: ExperimentConfig, tiles: Sequence[Tile], stream: int = 0) -> TrainResult:
    """Train a fresh model on ``tiles``.

    Batch order depends only on ``cfg.seed`` and ``stream`` (the fold index),
    never on the loss mode, so runs that differ only in loss see identical data.
    """
    cfg.validate()
    if not tiles:
        raise ConfigError("train: no training tiles")
    if cfg.loss_mode == "MATL" and any(t.box_label is None for t in tiles):
        raise ConfigError("train: MATL needs box labels on every training tile")
    lcfg = cfg.loss_config()
    model = Model(cfg.model, cfg.model_mode)
    opt = Adam(cfg.learning_rate)
    order_rng = np.random.default_rng([cfg.seed, stream, 7])
    images = np.stack([t.image for t in tiles]).transpose(0, 3, 1, 2).astype(np.float32)
    masks = np.stack([t.mask for t in tiles]).astype(np.float32)
    y_class = np.array([t.class_label for t in tiles])
    y_box = np.array([-1 if t.box_label is None else t.box_label for t in tiles])
    n = len(tiles)
    history, batch_log = [], []
    params = model.params
    names = list(params)
    tensors = [params[k] for k in names]

    for epoch in range(cfg.epochs):
        if cfg.lr_schedule == "cosine":
            opt.lr = cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        perm = order_rng.permutation(n)
        totals = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics are undefined for one sample
            x = ad.Tensor(images[idx])
            entry = {"epoch": epoch, "batch": b, "samples": idx.tolist()}
            with ad.Tape() as tape:
                out = model.forward(x, training=True)
                terms = []
                if out.class_probs is not None:
                    ce = ad.cross_entropy(out.class_probs, y_class[idx])
                    entry["classification"] = ce.item()
                    terms.append(ce)
                if out.mask is not None:
                    bce = ad.binary_cross_entropy(out.mask, masks[idx])
                    entry["mask"] = bce.item()
                    terms.append(bce)
                emb = _embed_term(cfg, lcfg, out.embedding, y_class[idx], y_box[idx])
                if emb is not None:
                    entry["embedding"] = emb.item()
                    terms.append(ad.mul_scalar(emb, cfg.embed_weight))
                total = terms[0]
                for t in terms[1:]:
                    total = ad.add(total, t)
            value = total.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {entry}")
            entry["total"] = value
            grads = ad.backward(tape, total, tensors)
            try:
                opt.step(params, dict(zip(names, grads)))
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            batch_log.append(entry)
            totals.append(value)
        history.append(float(np.mean(totals)) if totals else float("nan"))
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    return TrainResult(model, history, batch_log)


def predict(model: Model, tiles: Sequence[Tile], batch_size: int = 64):
    """Inference-mode embeddings, class probabilities and mask probabilities."""
    embs, probs, masks = [], [], []
    for start in range(0, len(tiles), batch_size):
        out = model.forward(images_tensor(tiles[start:start + batch_size], model.dtype), training=False)
        embs.append(out.embedding.data)
        if out.class_probs is not None:
            probs.append(out.class_probs.data)
        if out.mask is not None:
            masks.append(out.mask.data)
    cat = lambda xs: np.concatenate(xs) if xs else None  # noqa: E731
    return cat(embs), cat(probs), cat(masks)


def evaluate(model: Model, tiles: Sequence[Tile], threshold: float = 0.5) -> Metrics:
    """Accuracy (classifier heads) and mean IoU (mask heads; None-box counts as 0)."""
    _, probs, masks = predict(model, tiles)
    acc = accuracy(probs.argmax(axis=1), [t.class_label for t in tiles]) if probs is not None else None
    mean_iou = None
    if masks is not None:
        mean_iou = float(np.mean([iou(mask_to_box(m, threshold), t.box) for m, t in zip(masks, tiles)]))
    return Metrics(acc, mean_iou, len(tiles))

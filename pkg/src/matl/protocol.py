"""Stratified splits, the K-fold experiment grid and result tables."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .boxlabels import BoxLabeler
from .data import Tile, generate_synthetic, load_dataset
from .errors import ConfigError
from .nn import ModelConfig, save_checkpoint
from .train import LOSS_MODES, ExperimentConfig, evaluate, train
from .triplet import LossConfig

log = logging.getLogger(__name__)

CELL_MODES = ("single_task", "multi_task", "single_task_classify", "single_task_mask")
FOLD_COLUMNS = ("model_mode", "loss_mode", "lambda", "fold", "accuracy", "iou")
AGGREGATE_COLUMNS = ("model_mode", "loss_mode", "lambda", "folds",
                     "accuracy_mean", "accuracy_std", "iou_mean", "iou_std")


# ---------------------------------------------------------------- splitting

def stratified_kfold(class_labels, k: int, seed: int = 0) -> list[np.ndarray]:
    """Partition indices into ``k`` folds with per-class counts differing by at most one.

    Each class is shuffled and dealt round-robin; the starting fold rotates
    from class to class so that leftover samples do not pile up in fold 0.
    """
    labels = np.asarray(class_labels)
    if k < 2:
        raise ConfigError(f"folds: K must be >= 2, got {k}")
    rng = np.random.default_rng([seed, 13])
    folds: list[list[int]] = [[] for _ in range(k)]
    start = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ConfigError(f"folds: class {c} has {len(idx)} samples, fewer than K={k}")
        idx = rng.permutation(idx)
        for j, i in enumerate(idx):
            folds[(start + j) % k].append(int(i))
        start = (start + len(idx)) % k
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


def stratified_split(class_labels, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(working, held_out) index arrays; each class contributes round(fraction * n_c) to working."""
    labels = np.asarray(class_labels)
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"train_fraction: must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng([seed, 11])
    work, rest = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n = int(round(fraction * len(idx)))
        work.extend(idx[:n])
        rest.extend(idx[n:])
    return np.array(sorted(work), dtype=np.intp), np.array(sorted(rest), dtype=np.intp)


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class Cell:
    """One row of the results grid. ``single_task`` pairs a classifier with a mask model."""

    model_mode: str
    loss_mode: str
    lam: float | None = None

    def validate(self, where: str = "cell") -> "Cell":
        if self.model_mode not in CELL_MODES:
            raise ConfigError(f"{where}.model_mode: expected one of {CELL_MODES}, got {self.model_mode!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"{where}.loss_mode: expected one of {LOSS_MODES}, got {self.loss_mode!r}")
        if (self.lam is not None) != (self.loss_mode == "MATL"):
            raise ConfigError(f"{where}.lambda: must be given for MATL and only for MATL")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"{where}.lambda: must lie in [0, 1], got {self.lam}")
        return self

    @property
    def model_modes(self) -> tuple[str, ...]:
        if self.model_mode == "single_task":
            return ("single_task_classify", "single_task_mask")
        return (self.model_mode,)

    @property
    def slug(self) -> str:
        lam = "" if self.lam is None else f"{self.lam:g}"
        return f"{self.model_mode}-{self.loss_mode}{lam}"

    def to_dict(self) -> dict:
        d = {"model_mode": self.model_mode, "loss_mode": self.loss_mode}
        if self.lam is not None:
            d["lambda"] = self.lam
        return d


def default_cells() -> list[Cell]:
    cells = []
    for mode in ("single_task", "multi_task"):
        cells += [Cell(mode, "WTL"), Cell(mode, "CLTL")]
        cells += [Cell(mode, "MATL", lam) for lam in (0.25, 0.5, 0.75)]
    return cells


@dataclass
class SyntheticSource:
    per_class: int = 200
    tile_size: int = 64
    seed: int = 0


@dataclass
class DataSource:
    synthetic: SyntheticSource | None = field(default_factory=SyntheticSource)
    directory: str | None = None
    normalization: str = "per_image"

    def validate(self) -> "DataSource":
        if (self.synthetic is None) == (self.directory is None):
            raise ConfigError("data: give exactly one of 'synthetic' or 'directory'")
        if self.normalization not in ("per_image", "per_dataset"):
            raise ConfigError(f"data.normalization: unknown mode {self.normalization!r}")
        if self.synthetic is not None and self.synthetic.per_class < 1:
            raise ConfigError("data.synthetic.per_class: must be >= 1")
        return self

    def load(self) -> list[Tile]:
        if self.directory is not None:
            return load_dataset(self.directory, self.normalization)
        s = self.synthetic
        return generate_synthetic(s.per_class, s.tile_size, s.seed)


@dataclass
class RunConfig:
    """Everything needed to reproduce an experiment run."""

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
    loss: LossConfig = field(default_factory=lambda: LossConfig(margin=0.5, normalize_embeddings=True))
    cells: list[Cell] = field(default_factory=default_cells)
    data: DataSource = field(default_factory=DataSource)
    output: str = "runs/experiment"
    checkpoints: bool = True
    threads: int = 1

    def experiment(self, model_mode: str, cell: Cell) -> ExperimentConfig:
        return ExperimentConfig(
            model_mode=model_mode, loss_mode=cell.loss_mode, lam=cell.lam, folds=self.folds,
            train_fraction=self.train_fraction, epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, lr_schedule=self.lr_schedule,
            embed_weight=self.embed_weight, seed=self.seed, box_k=self.box_k,
            kmeans_restarts=self.kmeans_restarts, model=self.model, loss=self.loss)

    def validate(self) -> "RunConfig":
        if not self.cells:
            raise ConfigError("cells: at least one cell is required")
        for i, cell in enumerate(self.cells):
            cell.validate(f"cells[{i}]")
            for mode in cell.model_modes:
                self.experiment(mode, cell).validate()
        if self.box_k < 1:
            raise ConfigError("box_k: must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads: must be >= 1")
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cells"] = [c.to_dict() for c in self.cells]
        d["loss"].pop("lam")
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        return _build(cls, obj, "").validate()


def _check_scalar(value, default, path: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")
    return value


_NESTED = {("RunConfig", "model"): ModelConfig, ("RunConfig", "loss"): LossConfig,
           ("RunConfig", "data"): DataSource, ("DataSource", "synthetic"): SyntheticSource}
_NULLABLE = {("DataSource", "synthetic"), ("DataSource", "directory")}


def _build(cls, obj, path: str, template=None):
    """Strictly parse ``obj`` into ``cls``; omitted keys keep the values of ``template``."""
    where = path or "config"
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    template = cls() if template is None else template
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is LossConfig:
        names.discard("lam")  # lambda belongs to cells
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for key, value in obj.items():
        sub = f"{path}.{key}" if path else key
        nested = _NESTED.get((cls.__name__, key))
        if value is None and (cls.__name__, key) in _NULLABLE:
            kwargs[key] = None
        elif nested is not None:
            kwargs[key] = _build(nested, value, sub, getattr(template, key))
        elif cls is RunConfig and key == "cells":
            kwargs[key] = _build_cells(value, sub)
        elif cls is DataSource and key == "directory":
            kwargs[key] = _check_scalar(value, "", sub)
        else:
            kwargs[key] = _check_scalar(value, getattr(template, key), sub)
    if cls is DataSource and "directory" in kwargs and kwargs["directory"] is not None and "synthetic" not in kwargs:
        kwargs["synthetic"] = None  # a directory replaces the default synthetic source
    return dataclasses.replace(template, **kwargs)


def _build_cells(value, path: str) -> list[Cell]:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list")
    cells = []
    for i, item in enumerate(value):
        where = f"{path}[{i}]"
        if not isinstance(item, dict):
            raise ConfigError(f"{where}: expected an object")
        unknown = sorted(set(item) - {"model_mode", "loss_mode", "lambda"})
        if unknown:
            raise ConfigError(f"{where}.{unknown[0]}: unknown key")
        for key in ("model_mode", "loss_mode"):
            if not isinstance(item.get(key), str):
                raise ConfigError(f"{where}.{key}: required string")
        lam = item.get("lambda")
        if lam is not None:
            lam = _check_scalar(lam, 0.0, f"{where}.lambda")
        cells.append(Cell(item["model_mode"], item["loss_mode"], lam).validate(where))
    return cells


def load_run_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return RunConfig.from_dict(obj)


# ------------------------------------------------------------------ running

@dataclass
class FoldResult:
    cell: Cell
    fold: int
    accuracy: float | None
    iou: float | None
    history: dict[str, list[float]]  # model mode -> mean loss per epoch
    val_accuracy: float | None = None
    val_iou: float | None = None


@dataclass
class ExperimentResult:
    config: RunConfig
    folds: list[FoldResult]

    def fold_rows(self) -> list[dict]:
        return [{"model_mode": r.cell.model_mode, "loss_mode": r.cell.loss_mode, "lambda": r.cell.lam,
                 "fold": r.fold, "accuracy": r.accuracy, "iou": r.iou} for r in self.folds]

    def aggregate_rows(self) -> list[dict]:
        rows = []
        for cell in self.config.cells:
            mine = [r for r in self.folds if r.cell == cell]
            row = {"model_mode": cell.model_mode, "loss_mode": cell.loss_mode, "lambda": cell.lam,
                   "folds": len(mine)}
            for metric in ("accuracy", "iou"):
                vals = [getattr(r, metric) for r in mine if getattr(r, metric) is not None]
                row[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
                # sample standard deviation over folds
                row[f"{metric}_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
            rows.append(row)
        return rows


def _label_boxes(tiles: Sequence[Tile], labeler: BoxLabeler) -> list[Tile]:
    labels = labeler.labels([t.box for t in tiles])
    return [dataclasses.replace(t, box_label=int(b)) for t, b in zip(tiles, labels)]


def run_fold(run: RunConfig, fold: int, train_tiles: Sequence[Tile], val_tiles: Sequence[Tile],
             test_tiles: Sequence[Tile], out_dir: Path | None = None) -> list[FoldResult]:
    """Train and evaluate every cell on one fold. Box labels come from the training part only."""
    labeler = BoxLabeler.fit([t.box for t in train_tiles], run.box_k, run.seed, run.kmeans_restarts)
    train_tiles = _label_boxes(train_tiles, labeler)
    results = []
    for cell in run.cells:
        metrics, val, history = {}, {}, {}
        for mode in cell.model_modes:
            cfg = run.experiment(mode, cell)
            trained = train(cfg, train_tiles, stream=fold)
            history[mode] = trained.history
            metrics[mode] = evaluate(trained.model, test_tiles)
            if val_tiles:
                val[mode] = evaluate(trained.model, val_tiles)
            if out_dir is not None and run.checkpoints:
                save_checkpoint(out_dir / "checkpoints" / f"{cell.slug}_{mode}_fold{fold}.json", trained.model,
                                extra={"cell": cell.to_dict(), "fold": fold, "box_labeler": labeler.to_dict()})
            log.info("fold %d %s %s: acc=%s iou=%s", fold, cell.slug, mode,
                     metrics[mode].accuracy, metrics[mode].iou)
        pick = lambda table, attr: next(  # noqa: E731
            (getattr(m, attr) for m in table.values() if getattr(m, attr) is not None), None)
        results.append(FoldResult(cell, fold, pick(metrics, "accuracy"), pick(metrics, "iou"), history,
                                  pick(val, "accuracy"), pick(val, "iou")))
    return results


def run_experiment(run: RunConfig, tiles: Sequence[Tile] | None = None, out_dir=None,
                   threads: int | None = None,
                   progress: Callable[[FoldResult], None] | None = None) -> ExperimentResult:
    """Stratified working/test split, K folds over the working part, every cell per fold.

    Each fold trains on K-1 folds of the working set, validates on the
    remaining fold and is tested on the held-out part. Results do not depend
    on ``threads``.
    """
    run.validate()
    tiles = run.data.load() if tiles is None else list(tiles)
    labels = np.array([t.class_label for t in tiles])
    work, test = stratified_split(labels, run.train_fraction, run.seed)
    folds = stratified_kfold(labels[work], run.folds, run.seed)
    test_tiles = [tiles[i] for i in test]
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        write_effective_config(run, out / "effective_config.json")

    def job(k: int) -> list[FoldResult]:
        val_idx = set(folds[k].tolist())
        train_tiles = [tiles[work[i]] for i in range(len(work)) if i not in val_idx]
        val_tiles = [tiles[work[i]] for i in sorted(val_idx)]
        res = run_fold(run, k, train_tiles, val_tiles, test_tiles, out)
        if progress is not None:
            for r in res:
                progress(r)
        return res

    n_threads = run.threads if threads is None else threads
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            per_fold = list(pool.map(job, range(run.folds)))
    else:
        per_fold = [job(k) for k in range(run.folds)]
    order = {c: i for i, c in enumerate(run.cells)}
    flat = sorted((r for fold in per_fold for r in fold), key=lambda r: (order[r.cell], r.fold))
    result = ExperimentResult(run, flat)
    if out is not None:
        write_results(result, out)
    return result


# ----------------------------------------------------------------- writing

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: list[dict], columns: Sequence[str], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_effective_config(run: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(run.to_dict(), indent=2) + "\n")


def write_results(result: ExperimentResult, out: Path) -> None:
    write_csv(result.fold_rows(), FOLD_COLUMNS, out / "folds.csv")
    write_csv(result.aggregate_rows(), AGGREGATE_COLUMNS, out / "aggregate.csv")
    detail = [{"cell": r.cell.to_dict(), "fold": r.fold, "history": r.history,
               "val_accuracy": r.val_accuracy, "val_iou": r.val_iou} for r in result.folds]
    (out / "history.json").write_text(json.dumps(detail, indent=1) + "\n")

"""Command-line entry point: ``matl {gen-data,box-labels,experiment,pca}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or training failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from .boxlabels import BoxLabeler, apply_minmax, elbow_suggest, feature_matrix, fit_minmax, wcss_curve
from .data import generate_synthetic, load_dataset, write_dataset
from .errors import MatlError, TrainingError, UsageError
from .nn import load_checkpoint
from .pca import pca_export, write_pca_csv
from .protocol import load_run_config, run_experiment, write_effective_config
from .train import predict

log = logging.getLogger("matl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


def _echo(command: str, config: dict) -> None:
    print(json.dumps({"command": command, "effective_config": config}, sort_keys=True))


def cmd_gen_data(args) -> int:
    if args.per_class < 1:
        raise UsageError(f"--per-class must be >= 1, got {args.per_class}")
    config = {"out": args.out, "per_class": args.per_class, "tile_size": args.tile_size, "seed": args.seed}
    _echo("gen-data", config)
    tiles = generate_synthetic(args.per_class, args.tile_size, args.seed)
    out = write_dataset(tiles, args.out)
    (out / "effective_config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(tiles)} tiles to {out}")
    return EXIT_OK


def cmd_box_labels(args) -> int:
    tiles = load_dataset(args.data)
    boxes = [t.box for t in tiles]
    out = Path(args.out)
    if args.elbow:
        kmax = args.kmax if args.kmax is not None else min(8, len(boxes))
        _echo("box-labels", {"data": args.data, "elbow": True, "kmax": kmax, "seed": args.seed,
                             "restarts": args.restarts, "out": args.out})
        points = apply_minmax(feature_matrix(boxes), fit_minmax(feature_matrix(boxes)))
        curve = wcss_curve(points, kmax, args.seed, args.restarts)
        with out.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("k", "wcss"))
            for k, v in curve:
                w.writerow((k, repr(float(v))))
        print(f"elbow curve k=1..{kmax} written to {out}; suggested k = {elbow_suggest(curve)}")
        return EXIT_OK
    _echo("box-labels", {"data": args.data, "k": args.k, "seed": args.seed,
                         "restarts": args.restarts, "out": args.out})
    labeler = BoxLabeler.fit(boxes, args.k, args.seed, args.restarts)
    labeler.save(out)
    labels_path = out.with_name(out.stem + "_labels.csv")
    with labels_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "class_label", "box_label"))
        for t, b in zip(tiles, labeler.labels(boxes)):
            w.writerow((t.ident, t.class_label, int(b)))
    for i, p in enumerate(labeler.profile(boxes)):
        print(f"cluster {i}: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                             for k, v in p.items()))
    print(f"artifact {out}, labels {labels_path}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    run = load_run_config(args.config)
    if args.threads is not None:
        run.threads = args.threads
    if args.out is not None:
        run.output = args.out
    run.validate()
    _echo("experiment", run.to_dict())
    out = Path(run.output)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(run, out / "effective_config.json")
    start = time.time()

    def progress(r):
        fmt = lambda v: "-" if v is None else f"{v:.3f}"  # noqa: E731
        print(f"[{time.time() - start:7.1f}s] fold {r.fold} {r.cell.slug}: "
              f"accuracy {fmt(r.accuracy)} iou {fmt(r.iou)}", flush=True)

    result = run_experiment(run, out_dir=out, progress=progress)
    print("model_mode,loss_mode,lambda,accuracy_mean,accuracy_std,iou_mean,iou_std")
    for row in result.aggregate_rows():
        vals = [row["model_mode"], row["loss_mode"], "" if row["lambda"] is None else row["lambda"]]
        vals += ["" if row[k] is None else f"{row[k]:.4f}"
                 for k in ("accuracy_mean", "accuracy_std", "iou_mean", "iou_std")]
        print(",".join(str(v) for v in vals))
    print(f"results in {out}")
    return EXIT_OK


def cmd_pca(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    _echo("pca", {"checkpoint": args.checkpoint, "data": args.data, "out": args.out,
                  "mode": model.mode, "model_config": asdict(model.cfg)})
    tiles = load_dataset(args.data)
    shapes = {t.image.shape for t in tiles}
    want = (model.cfg.input_size, model.cfg.input_size, model.cfg.input_channels)
    if shapes != {want}:
        raise UsageError(f"checkpoint expects {want} tiles, dataset has {sorted(shapes)}")
    emb, _, _ = predict(model, tiles)
    if "box_labeler" in extra:
        box_labels = BoxLabeler.from_dict(extra["box_labeler"]).labels([t.box for t in tiles]).tolist()
    else:
        box_labels = [None] * len(tiles)
    rows = pca_export(emb, [t.class_label for t in tiles], box_labels, [t.ident for t in tiles])
    write_pca_csv(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matl", description="Multi-annotation triplet loss lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic tile dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--tile-size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("box-labels", help="cluster box geometry into box labels")
    b.add_argument("--data", required=True)
    b.add_argument("--k", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--restarts", type=int, default=10)
    b.add_argument("--out", required=True, help="artifact JSON, or the curve CSV with --elbow")
    b.add_argument("--elbow", action="store_true", help="write the (k, wcss) curve instead")
    b.add_argument("--kmax", type=int, default=None)
    b.set_defaults(func=cmd_box_labels)

    e = sub.add_parser("experiment", help="run the K-fold grid from a JSON config")
    e.add_argument("--config", required=True)
    e.add_argument("--threads", type=int, default=None, help="folds trained in parallel")
    e.add_argument("--out", default=None, help="override the config's output directory")
    e.set_defaults(func=cmd_experiment)

    c = sub.add_parser("pca", help="export a 2-D PCA of checkpoint embeddings")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_pca)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MatlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""``orthoseg`` command-line entry point.

Exit codes: 0 success, 1 runtime error (diagnostic on stderr), 2 usage error.
``ORTHOSEG_THREADS`` caps the BLAS worker threads.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger("orthoseg")


def _thread_limit():
    value = os.environ.get("ORTHOSEG_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = max(1, int(value))
    except ValueError:
        raise SystemExit(f"error: ORTHOSEG_THREADS must be an integer, got {value!r}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


# --------------------------------------------------------------- commands


def cmd_split(args) -> int:
    from .raster import load_raster
    from .tiler import mask_tiles, save_tiles, split

    image = load_raster(args.input, args.bands)
    grid = split(image, args.tile_size)
    out = Path(args.out)
    paths = save_tiles(grid, out / "image")
    if args.mask:
        mask = load_raster(args.mask, ["MASK"])
        if (mask.width, mask.height) != (image.width, image.height):
            raise ValueError("mask and image dimensions differ")
        save_tiles(mask_tiles(mask, args.tile_size), out / "mask")
    print(f"wrote {len(paths)} tiles ({grid.shape[0]} rows x {grid.shape[1]} cols) to {out}")
    return 0


def _load_config(args):
    from .config import load_run_config

    overrides = {
        "network": {"arch": getattr(args, "arch", None)},
        "train": {
            "epochs": getattr(args, "epochs", None),
            "seed": getattr(args, "seed", None),
            "repetitions": getattr(args, "repetitions", None),
        },
    }
    return load_run_config(args.config, overrides)


def cmd_train(args) -> int:
    from .trainer import cross_validate

    cfg = _load_config(args)
    folds = [cfg.fold(name) for name in args.fold] if args.fold else list(cfg.folds)
    if not folds:
        raise ValueError("no folds configured; add [dataset.folds.<name>] tables")
    out = Path(args.out) if args.out else cfg.output_dir
    report, records = cross_validate(
        cfg.manifest, folds, cfg.bands, cfg.network, cfg.train,
        repetitions=cfg.repetitions, augcfg=cfg.augment, checkpoint_dir=out / "checkpoints",
    )
    for r in records:
        r.save(out / "records" / f"{r.fold}_{r.arch}_{r.selection}_r{r.repetition}.json")
        print(f"{r.fold} {r.arch} {r.selection} rep {r.repetition}: "
              f"best val F1 {r.best_val_f1 if r.best_val_f1 is None else round(r.best_val_f1, 4)}, "
              f"test F1 {r.test_f1:.4f}")
    report.write(out)
    print(report.to_markdown(), end="")
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .pipeline import predict_raster
    from .raster import load_raster, save_raster

    ck = Path(args.checkpoint)
    if not ck.exists():
        print(f"error: checkpoint not found: {ck}", file=sys.stderr)
        return 1
    params, netcfg, meta = load_checkpoint(ck)
    bands = args.bands or meta.get("bands")
    if not bands:
        raise ValueError("checkpoint carries no band selection; pass --bands")
    raster = load_raster(args.input, args.input_bands)
    tile_size = args.tile_size or int(meta.get("tile_size", 240))
    threshold = args.threshold if args.threshold is not None else float(meta.get("threshold", 0.5))
    mask = predict_raster(params, netcfg, raster, bands, tile_size, threshold)
    out = save_raster(mask, args.out)
    preview = out.with_name(out.stem + "_preview.png")
    Image.fromarray((mask.binary_mask() * 255).astype(np.uint8), mode="L").save(preview)
    print(f"wrote {out} ({mask.width}x{mask.height}) and {preview}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import confusion, f1
    from .raster import load_raster

    pred = load_raster(args.pred, ["MASK"])
    truth = load_raster(args.truth, ["MASK"])
    valid = pred.valid_mask() & truth.valid_mask()
    counts = confusion(pred.binary_mask(), truth.binary_mask(), valid)
    result = {**counts.as_dict(), "f1": f1(counts)}
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    print(" ".join(f"{k}={v}" for k, v in result.items()))
    return 0


def cmd_baseline(args) -> int:
    from .baselines import baseline_evaluate
    from .metrics import make_report

    cfg = _load_config(args)
    if args.fold:
        folds = [cfg.fold(name) for name in args.fold]
        plots = [f.test_plot for f in folds]
        names = {f.test_plot: f.name for f in folds}
    else:
        plots = cfg.manifest.plot_names
        names = None
    results = baseline_evaluate(cfg.manifest, plots, cfg.bands, args.method,
                                seed=cfg.train.seed, folds=names)
    report = make_report(results)
    out = Path(args.out) if args.out else cfg.output_dir
    report.write(out)
    for r in results:
        print(f"{r.method} {r.selection} {r.fold or r.plot}: F1 {r.f1:.4f}")
    return 0


def cmd_report(args) -> int:
    from .metrics import make_report
    from .trainer import load_records

    paths: list[Path] = []
    for p in map(Path, args.records):
        paths.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not paths:
        raise ValueError("no record files found")
    report = make_report(load_records(paths))
    csv_path, md_path = report.write(args.out)
    print(report.to_markdown(), end="")
    print(f"wrote {csv_path} and {md_path}")
    return 0


def cmd_synth(args) -> int:
    from .config import read_toml
    from .synth import spec_from_dict, write_dataset

    doc = read_toml(args.spec)
    table = doc.get("field", doc)
    spec = spec_from_dict(table)
    plots = table.get("plots") or doc.get("plots")
    manifest = write_dataset(spec, args.out, plots, args.tile_size, "." + args.format)
    print(f"wrote {len(manifest.plots)} plot(s) and {Path(args.out) / 'manifest.json'}")
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="orthoseg",
        description="Vine segmentation of multi-band orthomosaics.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    s = sub.add_parser("split", help="cut a raster (and mask) into tiles")
    s.add_argument("--input", required=True, help="multi-band raster (.tif or .hdr)")
    s.add_argument("--mask", help="ground-truth mask raster")
    s.add_argument("--tile-size", type=int, default=240)
    s.add_argument("--bands", nargs="+", help="band ids of the input, in file order")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train and cross-validate from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--fold", action="append", help="fold name (repeatable); default: all")
    s.add_argument("--arch", choices=("unet", "segnet", "modsegnet"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--repetitions", type=int)
    s.add_argument("--out", help="output directory (default: [output] dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict a full-size mask for a raster")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True, help="mask raster path (.tif or .hdr)")
    s.add_argument("--bands", nargs="+", help="band selection (default: from checkpoint)")
    s.add_argument("--input-bands", nargs="+", help="band ids of the input file, in order")
    s.add_argument("--tile-size", type=int)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="F1 of a predicted mask against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--json", help="also write the counts to this JSON file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="evaluate OTSU or K-means per tile")
    s.add_argument("--method", required=True, choices=("otsu", "kmeans"))
    s.add_argument("--config", required=True)
    s.add_argument("--fold", action="append", help="score the test plot of this fold")
    s.add_argument("--out", help="output directory (default: [output] dir)")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("report", help="tabulate run records as CSV and Markdown")
    s.add_argument("--records", nargs="+", required=True, help="record JSON files or folders")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("synth", help="generate a synthetic vineyard dataset")
    s.add_argument("--spec", required=True, help="field spec TOML")
    s.add_argument("--out", required=True)
    s.add_argument("--tile-size", type=int, default=240)
    s.add_argument("--format", choices=("tif", "hdr"), default="tif")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        with _thread_limit():
            return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command line entry point.

Subcommands mirror the pipeline stages:

    synth         write a synthetic scene (cloud, imagery, truth, zones)
    ground-truth  LiDAR + NAIP -> tree mask, pixel height, CHM, treetops
    prepare       imagery + truth -> normalized training patches + band stats
    train         patches -> model.bin + history.csv
    eval          models x patches -> fixed-schema results report
    predict       model + imagery -> per-task prediction rasters
    aggregate     mask + height [+ zones] -> citywide percent, zone CSV

A JSON config file (--config) supplies defaults for any long option, keyed
by the option's dest name (e.g. {"ndvi_threshold": 0.1}); explicit flags
always win. Exit codes: 0 ok, 2 bad configuration or arguments, 3 bad or
missing data, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .aggregate import (
    citywide_cover, format_percent, read_zones, zonal_stats, zone_stats_csv,
)
from .errors import AlignmentError, ConfigError, DataError, NumericalError
from .grid import NODATA_BYTE, NODATA_FLOAT, Raster
from .las_io import read_points
from .metrics import evaluate, results_csv, results_table
from .pipeline import (
    GroundTruthParams, build_input_stack, ground_truth, predict_raster,
    prepare_patches,
)
from .raster_io import (
    read_band_stats, read_patch_file, read_raster, write_band_stats,
    write_patch_file, write_raster,
)
from .train import LossWeights, TrainConfig, history_csv, train
from .unet import TASKS, load_model, save_model
from . import synth

log = logging.getLogger("canopymap")


def _read_stack(path: str):
    return read_raster(path)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="ascii")


def cmd_synth(args: argparse.Namespace) -> int:
    params = synth.SynthParams(
        extent_x=float(args.extent_x),
        extent_y=float(args.extent_y),
        n_trees=int(args.n_trees),
        seed=int(args.seed),
    )
    scene = synth.generate_scene(params)
    paths = synth.write_scene(scene, args.out)
    log.info("wrote synthetic scene with %d trees to %s", len(scene.trees), args.out)
    for name, p in sorted(paths.items()):
        log.info("  %s: %s", name, p)
    return 0


def cmd_ground_truth(args: argparse.Namespace) -> int:
    clouds = [read_points(p) for p in args.lidar]
    naip = _read_stack(args.naip)
    params = GroundTruthParams(
        ndvi_threshold=float(args.ndvi_threshold),
        zmin=float(args.zmin),
        zmax=float(args.zmax),
        window_radius=float(args.window_radius),
        th_seed=float(args.th_seed),
        th_cr=float(args.th_cr),
        max_cr_pixels=float(args.max_cr),
    )
    tree_mask, pixel_height, chm, tops, _crowns = ground_truth(clouds, naip, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(out / "tree_mask.tif", tree_mask)
    write_raster(out / "pixel_height.tif", pixel_height)
    write_raster(out / "chm.tif", chm)
    lines = ["id,row,col,height"]
    lines += [f"{t.id},{t.row},{t.col},{t.height!r}" for t in tops]
    _write_text(out / "treetops.csv", "\n".join(lines) + "\n")
    log.info("ground truth: %d treetops, outputs in %s", len(tops), out)
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    naip = _read_stack(args.naip)
    s2_10m = _read_stack(args.s2_10m)
    s2_20m = _read_stack(args.s2_20m)
    tree_mask = _as_single(args.tree_mask)
    height = _as_single(args.height)
    aux = _as_single(args.aux)
    inputs = build_input_stack(naip, s2_10m, s2_20m)
    patches, stats = prepare_patches(
        inputs, tree_mask, height, aux, patch_size=int(args.patch_size)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_patch_file(out / "patches.bin", patches)
    write_band_stats(out / "band_stats.json", stats, patches.band_roles)
    log.info("prepared %d patches of %d bands in %s", len(patches), patches.in_bands, out)
    return 0


def _as_single(path: str) -> Raster:
    stack = _read_stack(path)
    return Raster(stack.geometry, stack.values[0], stack.nodata)


def cmd_train(args: argparse.Namespace) -> int:
    stats, roles = read_band_stats(args.stats) if args.stats else (None, None)
    patches = read_patch_file(args.patches, band_roles=roles)
    tasks = tuple(t.strip() for t in str(args.tasks).split(",") if t.strip())
    config = TrainConfig(
        variant=str(args.variant),
        tasks=tasks,
        bands=str(args.bands),
        depth=int(args.depth),
        base_channels=int(args.base_channels),
        weights=LossWeights(
            float(args.w_tree), float(args.w_height), float(args.w_aux)
        ),
        lr=float(args.lr),
        batch_size=int(args.batch_size),
        epochs=int(args.epochs),
        seed=int(args.seed),
        test_fraction=float(args.test_fraction),
    )
    model, history = train(patches, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.bin", model)
    _write_text(out / "history.csv", history_csv(history))
    if history:
        last = history[-1]
        log.info(
            "trained %s for %d epochs, final train loss %.6f",
            config.variant, len(history), last.train_loss,
        )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    stats, roles = read_band_stats(args.stats) if args.stats else (None, None)
    patches = read_patch_file(args.patches, band_roles=roles)
    rows = []
    for model_path in args.models:
        model = load_model(model_path)
        subset = patches
        if model.config.in_bands != patches.in_bands:
            from .train import select_bands

            if model.config.in_bands != 3:
                raise DataError(
                    f"{model_path}: model wants {model.config.in_bands} bands, "
                    f"patch set has {patches.in_bands}"
                )
            subset = select_bands(patches, "rgb")
        rows.append(evaluate(model, subset, batch_size=int(args.batch_size)))
    report = results_csv(rows)
    if args.out:
        _write_text(Path(args.out), report)
    print(results_table(rows))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    stats, _roles = read_band_stats(args.stats)
    naip = _read_stack(args.naip)
    s2_10m = _read_stack(args.s2_10m)
    s2_20m = _read_stack(args.s2_20m)
    inputs = build_input_stack(naip, s2_10m, s2_20m)
    outputs = predict_raster(model, inputs, stats, patch_size=int(args.patch_size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task, raster in outputs.items():
        write_raster(out / f"{task}.tif", raster)
    log.info("wrote %s to %s", ", ".join(sorted(outputs)), out)
    return 0


def cmd_aggregate(args: argparse.Namespace) -> int:
    mask_in = read_raster(args.mask)
    mask_vals = mask_in.values[0]
    if mask_vals.dtype.kind == "f":
        valid = (mask_vals != mask_in.nodata) & np.isfinite(mask_vals)
        binary = np.where(valid, (mask_vals >= 0.5).astype(np.uint8), NODATA_BYTE)
        mask = Raster(mask_in.geometry, binary.astype(np.uint8), nodata=NODATA_BYTE)
    else:
        mask = Raster(mask_in.geometry, mask_vals, nodata=mask_in.nodata)
    cover = citywide_cover(mask)
    print(f"citywide tree cover: {format_percent(cover)}")

    if args.zones:
        height_in = read_raster(args.height) if args.height else None
        if height_in is None:
            raise ConfigError("--zones requires --height for mean canopy height")
        hv = height_in.values[0].astype(np.float32)
        scale = float(args.height_scale)
        hvalid = (hv != height_in.nodata) & np.isfinite(hv)
        hv = np.where(hvalid, hv * scale, NODATA_FLOAT).astype(np.float32)
        height = Raster(height_in.geometry, hv, NODATA_FLOAT)
        zones = read_zones(args.zones)
        stats = zonal_stats(mask, height, zones)
        csv_text = zone_stats_csv(stats)
        if args.out:
            _write_text(Path(args.out), csv_text)
        else:
            print(csv_text, end="")
        bad = [s for s in stats if s.error]
        for s in bad:
            log.warning("zone %s skipped: %s", s.zone_id, s.error)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canopy",
        description="Tree canopy mapping from LiDAR and multi-resolution imagery.",
    )
    parser.add_argument("--config", help="JSON file of option defaults")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-trees", type=int, default=5)
    p.add_argument("--extent-x", type=float, default=240.0)
    p.add_argument("--extent-y", type=float, default=240.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ground-truth", help="LiDAR + NAIP -> truth rasters")
    p.add_argument("--lidar", nargs="+", required=True, help="point cloud file(s)")
    p.add_argument("--naip", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ndvi-threshold", type=float, default=0.05)
    p.add_argument("--zmin", type=float, default=6.0)
    p.add_argument("--zmax", type=float, default=80.0)
    p.add_argument("--window-radius", type=float, default=3.0)
    p.add_argument("--th-seed", type=float, default=0.45)
    p.add_argument("--th-cr", type=float, default=0.55)
    p.add_argument("--max-cr", type=float, default=10.0)
    p.set_defaults(func=cmd_ground_truth)

    p = sub.add_parser("prepare", help="imagery + truth -> training patches")
    p.add_argument("--naip", required=True)
    p.add_argument("--s2-10m", required=True)
    p.add_argument("--s2-20m", required=True)
    p.add_argument("--tree-mask", required=True)
    p.add_argument("--height", required=True)
    p.add_argument("--aux", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=240)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="patches -> model + history")
    p.add_argument("--patches", required=True)
    p.add_argument("--stats", help="band stats sidecar (band_stats.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="fully_shared",
                   choices=["fully_shared", "partially_shared", "single_task"])
    p.add_argument("--tasks", default=",".join(TASKS))
    p.add_argument("--bands", default="all", choices=["all", "rgb"])
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--w-tree", type=float, default=1.0)
    p.add_argument("--w-height", type=float, default=0.5)
    p.add_argument("--w-aux", type=float, default=0.25)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="models x patches -> results report")
    p.add_argument("--patches", required=True)
    p.add_argument("--stats")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--out", help="write CSV report here (table prints either way)")
    p.add_argument("--batch-size", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="model + imagery -> prediction rasters")
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--naip", required=True)
    p.add_argument("--s2-10m", required=True)
    p.add_argument("--s2-20m", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=240)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("aggregate", help="mask [+ zones] -> canopy statistics")
    p.add_argument("--mask", required=True, help="tree mask raster (prob or binary)")
    p.add_argument("--height", help="canopy height raster")
    p.add_argument("--zones", help="GeoJSON zone polygons")
    p.add_argument("--height-scale", type=float, default=1.0,
                   help="multiply heights by this (80 undoes training normalization)")
    p.add_argument("--out", help="zone stats CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_aggregate)
    return parser


def _apply_defaults(parser: argparse.ArgumentParser, config: dict) -> None:
    """Install config values as defaults on the parser and every subparser.

    A subparser re-applies its own defaults when it runs, so setting them
    only on the root parser would not reach subcommand options. Each
    subparser takes just the keys matching its own dests.
    """
    parser.set_defaults(**config)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                dests = {a.dest for a in sub._actions}
                sub.set_defaults(**{k: v for k, v in config.items() if k in dests})


def _load_config(argv: list[str]) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    try:
        loaded = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"config {known.config} must hold a JSON object")
    return loaded


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        config = _load_config(argv)
        parser = build_parser()
        _apply_defaults(parser, config)
        args = parser.parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        return int(args.func(args))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, AlignmentError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

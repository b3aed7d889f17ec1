"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import struct
import sys
from pathlib import Path

import numpy as np

from . import dfsom
from .config import ConfigError, PipelineConfig, load_config
from .hog import descriptors_to_bytes, image_descriptors
from .market_data import DataError, write_minute_bars
from .pipeline import (PipelineError, TIME_FORMAT, backtest, emit_report, prepare, read_predictions,
                       run_pipeline)
from .synthetic import generate_series
from .trading import write_trade_log

log = logging.getLogger("dfsom_trading")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# direct flags -> dotted config keys
FLAG_KEYS = {
    "data": "data.path",
    "market": "market",
    "period": "period",
    "output_dir": "output_dir",
    "seed": "seed",
    "windows": "schedule.count",
    "train_days": "schedule.train_days",
    "test_days": "schedule.test_days",
    "rate": "trading.rate",
    "fee_rate": "trading.fee_rate",
    "epochs": "gru.epochs",
    "max_iter": "fsom.max_iter",
    "cache_dir": "cache_dir",
}


def exit_code_for(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, PipelineError) else exc
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, ArithmeticError):
        return EXIT_NUMERIC
    return EXIT_DATA


def _parse_set(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


def build_config(args) -> PipelineConfig:
    overrides = _parse_set(args.set)
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def _write_images(images, out: Path, png: bool) -> None:
    with open(out / "images.bin", "wb") as fh:
        fh.write(struct.pack("<q", len(images)))
        for img in images:
            blob = img.to_bytes()
            fh.write(struct.pack("<q", len(blob)))
            fh.write(blob)
    if png:
        (out / "png").mkdir(exist_ok=True)
        for i, img in enumerate(images):
            img.save_png(out / "png" / f"window_{i:05d}.png")


def cmd_run(config: PipelineConfig, args) -> int:
    result = run_pipeline(config)
    c = result.cumulative
    print(f"windows={len(result.windows)} trades={c.tn} PR={c.pr * 100:.4f}% "
          f"leak_free={result.manifest['leak_free']} output={result.output_dir}")
    return EXIT_OK


def cmd_render(config: PipelineConfig, args) -> int:
    _, bars, images = prepare(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_images(images, out, config.png or args.png)
    print(f"{len(images)} images from {len(bars)} bars -> {out}")
    return EXIT_OK


def cmd_features(config: PipelineConfig, args) -> int:
    _, _, images = prepare(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, layer in enumerate(config.layers):
        with open(out / f"features_layer{k}.bin", "wb") as fh:
            fh.write(struct.pack("<q", len(images)))
            for img in images:
                blob = descriptors_to_bytes(image_descriptors(img, layer), img.shape, layer)
                fh.write(struct.pack("<q", len(blob)))
                fh.write(blob)
    print(f"descriptors for {len(images)} images, {len(config.layers)} layers -> {out}")
    return EXIT_OK


def cmd_cluster(config: PipelineConfig, args) -> int:
    _, bars, images = prepare(config)
    model = dfsom.train(images, config.layers, config.fsom.layer_grid, config.fsom.output_grid,
                        config.fsom.epsilon, config.fsom.max_iter, config.seed)
    clusters = dfsom.assign_clusters(model, images)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "dfsom.bin").write_bytes(model.to_bytes())
    with open(out / "clusters.csv", "w") as fh:
        fh.write("image,start_time,cluster\n")
        for i, c in enumerate(clusters.tolist()):
            fh.write(f"{i},{bars[i].start_time.strftime(TIME_FORMAT)},{c}\n")
    print(f"{len(images)} images in {len(np.unique(clusters))} clusters -> {out}")
    return EXIT_OK


def cmd_backtest(config: PipelineConfig, args) -> int:
    src = Path(args.predictions or Path(config.output_dir) / "predictions.csv")
    try:
        preds = read_predictions(src)
    except OSError as exc:
        raise DataError(f"cannot read predictions {src}: {exc}") from None
    windows, reports, trades = backtest(preds, config.trading.rate, config.fee_rate,
                                        resignal=not args.keep_signals)
    out = Path(args.backtest_dir or Path(config.output_dir) / "backtest")
    emit_report(reports, out, windows, trades=trades)
    write_trade_log(trades, out / "trades.csv", TIME_FORMAT)
    total = sum(r.pr for r in reports) * 100
    print(f"windows={len(windows)} trades={len(trades)} PR={total:.4f}% -> {out}")
    return EXIT_OK


def cmd_synth(config: PipelineConfig, args) -> int:
    series = generate_series(days=args.days, minutes_per_day=args.minutes_per_day, seed=args.synth_seed)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_minute_bars(series, path, config.data.time_format)
    print(f"{len(series)} minute bars -> {path}")
    return EXIT_OK


COMMANDS = {
    "run": (cmd_run, "full walk-forward pipeline"),
    "render": (cmd_render, "render candlestick images only"),
    "features": (cmd_features, "dump HOG descriptors per layer"),
    "cluster": (cmd_cluster, "train the DFSOM on all images and list cluster ids"),
    "backtest": (cmd_backtest, "re-run trading and metrics from stored predictions"),
    "synth": (cmd_synth, "write a synthetic minute-bar CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key, e.g. --set fsom.max_iter=200 (repeatable)")
    common.add_argument("--data", help="minute-bar CSV")
    common.add_argument("--market", choices=("futures", "forex"))
    common.add_argument("--period", type=int, help="aggregation period in minutes")
    common.add_argument("--output-dir", "-o", dest="output_dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--windows", type=int, help="number of walk-forward windows")
    common.add_argument("--train-days", type=float, dest="train_days")
    common.add_argument("--test-days", type=float, dest="test_days")
    common.add_argument("--rate", type=float, help="signal threshold rate")
    common.add_argument("--fee-rate", type=float, dest="fee_rate")
    common.add_argument("--epochs", type=int, help="GRU epochs")
    common.add_argument("--max-iter", type=int, dest="max_iter", help="FSOM iteration cap")
    common.add_argument("--cache-dir", dest="cache_dir")
    common.add_argument("--quiet", "-q", action="store_true")

    parser = argparse.ArgumentParser(prog="dfsom-trading", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "render":
            p.add_argument("--png", action="store_true", help="also write PNG files")
        elif name == "backtest":
            p.add_argument("--predictions", help="predictions.csv (default: <output-dir>/predictions.csv)")
            p.add_argument("--backtest-dir", dest="backtest_dir")
            p.add_argument("--keep-signals", action="store_true",
                           help="use stored signals instead of recomputing them")
        elif name == "synth":
            p.add_argument("out", help="CSV path to write")
            p.add_argument("--days", type=int, default=60)
            p.add_argument("--minutes-per-day", type=int, default=240, dest="minutes_per_day")
            p.add_argument("--synth-seed", type=int, default=0, dest="synth_seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        config = build_config(args)
        return handler(config, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
    except (PipelineError, DataError, OSError, ValueError, ArithmeticError) as exc:
        log.error("%s", exc)
        return exit_code_for(exc)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Walk-forward orchestration: ingest, render, cluster, predict, trade, report."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dfsom
from .chart import CandleImage, render_series
from .config import ConfigError, PipelineConfig
from .gru import ClusterModelSet, train_models
from .market_data import (AggBar, BarSeries, DataError, SplitWindow, aggregate, make_schedule,
                          parse_minute_bars)
from .trading import Decision, MetricsReport, Signal, Trade, decide, metrics_from_totals, report, \
    simulate, write_trade_log

log = logging.getLogger(__name__)

TIME_FORMAT = "%Y-%m-%dT%H:%M"
METRIC_COLUMNS = ("window", "PR", "SUMPR", "TN", "TN+", "TN-", "Avg_return", "Avg_profit",
                  "Avg_loss", "P/L", "Accuracy")
PREDICTION_COLUMNS = ("window", "decision_time", "cluster", "close_t", "predicted", "signal",
                      "entry_time", "exit_time", "entry_price", "exit_price")
CUMULATIVE_LABEL = "cumulative"
WINDOW_SEED_STRIDE = 1000


class PipelineError(RuntimeError):
    """A module failure tagged with the stage and walk-forward window it happened in."""

    def __init__(self, stage: str, window: Optional[int], cause: BaseException):
        self.stage = stage
        self.window = window
        self.cause = cause
        where = f"window {window}, " if window is not None else ""
        super().__init__(f"[{where}stage {stage}] {type(cause).__name__}: {cause}")


@contextlib.contextmanager
def stage(name: str, window: Optional[int] = None, timings: Optional[dict] = None):
    t0 = time.perf_counter()
    try:
        yield
    except (PipelineError, ConfigError):
        raise
    except Exception as exc:
        raise PipelineError(name, window, exc) from exc
    finally:
        dt = time.perf_counter() - t0
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + dt
        log.info("%sstage %s: %.2fs", f"window {window} " if window is not None else "", name, dt)


# ---------------------------------------------------------------- samples

@dataclass
class MinMaxScaler:
    lo: float
    hi: float

    @classmethod
    def fit(cls, values) -> "MinMaxScaler":
        values = np.asarray(values, dtype=float)
        return cls(float(values.min()), float(values.max()))

    @property
    def span(self) -> float:
        return self.hi - self.lo if self.hi > self.lo else 1.0

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.lo) / self.span

    def inverse(self, x):
        return np.asarray(x, dtype=float) * self.span + self.lo


def sample_indices(bars: Sequence[AggBar], split: SplitWindow, n_bars: int) -> tuple[list[int], list[int]]:
    """Image indices usable for training and testing in one split.

    Image ``i`` covers ``bars[i:i+n_bars]`` and its target is ``bars[i+n_bars]``.
    A training sample lies entirely inside the train range, target included; a
    test sample is one whose target bar lies entirely inside the test range.
    """
    train, test = [], []
    for i in range(len(bars) - n_bars):
        target = bars[i + n_bars]
        if bars[i].start_time >= split.train_range.start and target.end_time < split.train_range.end:
            train.append(i)
        if target.start_time >= split.test_range.start and target.end_time < split.test_range.end:
            test.append(i)
    return train, test


def close_sequences(bars: Sequence[AggBar], indices: Sequence[int], n_bars: int) -> np.ndarray:
    closes = np.array([b.close for b in bars])
    return np.stack([closes[i:i + n_bars] for i in indices])[:, :, None]


# ---------------------------------------------------------------- results

@dataclass
class WindowResult:
    split: SplitWindow
    report: MetricsReport
    trades: list[Trade]
    predictions: list[tuple]
    seed: int
    n_train: int
    n_test: int
    fsom_iterations: list[int]
    cluster_sizes: dict[int, int]
    max_train_time: Optional[datetime]
    min_test_time: Optional[datetime]
    timings: dict = field(default_factory=dict)

    @property
    def leak_free(self) -> bool:
        if self.max_train_time is None or self.min_test_time is None:
            return True
        return self.max_train_time < self.min_test_time


@dataclass
class RunResult:
    output_dir: Path
    windows: list[WindowResult]
    cumulative: MetricsReport
    manifest: dict

    @property
    def trades(self) -> list[Trade]:
        return [t for w in self.windows for t in w.trades]


# ---------------------------------------------------------------- stages

def load_series(config: PipelineConfig) -> BarSeries:
    if config.data.path is None:
        raise ConfigError("data.path is required")
    return parse_minute_bars(config.data.path, config.data.delimiter, config.data.has_header,
                             config.data.time_format)


def series_digest(series: Sequence) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    for b in series:
        w.writerow([b.timestamp.strftime(TIME_FORMAT), repr(b.open), repr(b.high), repr(b.low),
                    repr(b.close), repr(b.volume)])
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()


def _train_key(config: PipelineConfig, images: Sequence[CandleImage], seed: int) -> str:
    h = hashlib.sha256()
    h.update(json.dumps({"layers": [list(vars(c).values()) for c in config.layers],
                         "fsom": vars(config.fsom), "seed": seed},
                        sort_keys=True, default=list).encode())
    for img in images:
        h.update(img.to_bytes())
    return h.hexdigest()


def train_dfsom(config: PipelineConfig, images: Sequence[CandleImage], seed: int) -> dfsom.DfsomModel:
    """Fit a fresh DFSOM, reusing a cached one when ``cache_dir`` holds the same inputs."""
    cache_path = None
    if config.cache_dir:
        cache_path = Path(config.cache_dir) / f"dfsom-{_train_key(config, images, seed)}.bin"
        if cache_path.exists():
            log.info("DFSOM cache hit %s", cache_path.name)
            return dfsom.DfsomModel.from_bytes(cache_path.read_bytes())
    model = dfsom.train(images, config.layers, config.fsom.layer_grid, config.fsom.output_grid,
                        config.fsom.epsilon, config.fsom.max_iter, seed)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_bytes(model.to_bytes())
    return model


def run_window(config: PipelineConfig, bars: Sequence[AggBar], images: Sequence[CandleImage],
               split: SplitWindow, out_dir: Optional[Path] = None) -> WindowResult:
    n_bars = config.image.bars
    w = split.index
    seed = config.seed + WINDOW_SEED_STRIDE * w
    timings: dict = {}

    with stage("split", w, timings):
        train_idx, test_idx = sample_indices(bars, split, n_bars)
        if not train_idx:
            raise DataError(f"no training samples in {split.train_range.start}..{split.train_range.end}")
        used = sorted({j for i in train_idx for j in range(i, i + n_bars + 1)})
        scaler = MinMaxScaler.fit([bars[j].close for j in used])
        max_train = max(bars[i + n_bars].end_time for i in train_idx)
        min_test = min(bars[i + n_bars].start_time for i in test_idx) if test_idx else None

    with stage("dfsom", w, timings):
        model = train_dfsom(config, [images[i] for i in train_idx], seed)
        train_clusters = dfsom.assign_clusters(model, [images[i] for i in train_idx])
        iterations = [g.iterations for g in model.layer_fsoms] + [model.output_fsom.iterations]

    with stage("gru", w, timings):
        xs = scaler.transform(close_sequences(bars, train_idx, n_bars))
        ys = scaler.transform([bars[i + n_bars].close for i in train_idx])
        models = train_models(zip(train_clusters.tolist(), xs, ys), config.gru.epochs,
                              config.gru.learning_rate, seed, config.gru.hidden_dim,
                              config.gru.min_samples)

    predictions: list[tuple] = []
    decisions: list[Decision] = []
    with stage("predict", w, timings):
        if test_idx:
            test_clusters = dfsom.assign_clusters(model, [images[i] for i in test_idx])
            seqs = scaler.transform(close_sequences(bars, test_idx, n_bars))
            preds = scaler.inverse(models.predict_many(test_clusters, seqs))
            if not np.all(np.isfinite(preds)):
                raise FloatingPointError("non-finite price prediction")
            for i, cid, p in zip(test_idx, test_clusters.tolist(), preds.tolist()):
                last, target = bars[i + n_bars - 1], bars[i + n_bars]
                # a non-positive forecast carries no usable direction
                signal = decide(p, last.close, config.trading.rate) if p > 0 else Signal.NONE
                d = Decision(last.end_time, signal, target.start_time, target.end_time,
                             target.open, target.close)
                decisions.append(d)
                predictions.append((w, d, cid, last.close, p))

    with stage("trade", w, timings):
        trades = simulate(decisions, config.fee_rate)
        rep = report(trades)

    if out_dir is not None:
        (out_dir / "models").mkdir(exist_ok=True)
        (out_dir / "models" / f"dfsom_w{w}.bin").write_bytes(model.to_bytes())
        (out_dir / "models" / f"gru_w{w}.bin").write_bytes(models.to_bytes())
        models.write_loss_csv(out_dir / "models" / f"gru_loss_w{w}.csv")

    sizes = {int(c): int(n) for c, n in zip(*np.unique(train_clusters, return_counts=True))}
    log.info("window %d: %d train, %d test samples, %d clusters, %d trades, PR %.4f",
             w, len(train_idx), len(test_idx), len(sizes), rep.tn, rep.pr)
    return WindowResult(split, rep, trades, predictions, seed, len(train_idx), len(test_idx),
                        iterations, sizes, max_train, min_test, timings)


# ---------------------------------------------------------------- reporting

def _num(x) -> str:
    return "" if x is None else repr(x)


def _pct(x):
    return None if x is None else x * 100


def metrics_row(label, rep: MetricsReport, sumpr: Optional[float]) -> dict:
    """One row in published-table order; PR, SUMPR and Accuracy in percent."""
    return {
        "window": label,
        "PR": _pct(rep.pr),
        "SUMPR": sumpr,
        "TN": rep.tn,
        "TN+": rep.tn_plus,
        "TN-": rep.tn_minus,
        "Avg_return": rep.avg_return,
        "Avg_profit": rep.avg_profit,
        "Avg_loss": rep.avg_loss,
        "P/L": rep.pl_ratio,
        "Accuracy": _pct(rep.accuracy),
    }


def combine_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Report over the concatenation of the windows' trade logs."""
    profit = sum((r.avg_profit or 0.0) * r.tn_plus / 100 for r in reports)
    loss = sum((r.avg_loss or 0.0) * r.tn_minus / 100 for r in reports)
    return metrics_from_totals(profit, loss, sum(r.tn_plus for r in reports),
                               sum(r.tn_minus for r in reports))


def emit_report(reports: Sequence[MetricsReport], out_dir, labels: Optional[Sequence] = None,
                cumulative: Optional[MetricsReport] = None, trades: Optional[Sequence[Trade]] = None) -> dict:
    """Write metrics.csv, metrics.json and equity_curve.csv; returns the paths.

    SUMPR is the running sum of the per-window PRs. A trailing cumulative row is
    added whenever there is at least one window. The equity curve has one point
    per trade when ``trades`` is given, otherwise one per window.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    labels = list(labels) if labels is not None else list(range(len(reports)))
    if len(labels) != len(reports):
        raise ValueError("one label per report is required")
    rows, running = [], 0.0
    for label, rep in zip(labels, reports):
        running += rep.pr * 100
        rows.append(metrics_row(label, rep, running))
    if reports:
        total = cumulative if cumulative is not None else combine_reports(reports)
        rows.append(metrics_row(CUMULATIVE_LABEL, total, running))

    paths = {"csv": out / "metrics.csv", "json": out / "metrics.json", "equity": out / "equity_curve.csv"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row["window"]] + [_num(row[c]) for c in METRIC_COLUMNS[1:]])
    paths["json"].write_text(json.dumps(rows, indent=1) + "\n")

    with open(paths["equity"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("timestamp", "cumulative_pr"))
        if trades is not None:
            acc = 0.0
            for t in trades:
                acc += t.net_return * 100
                w.writerow((t.exit_time.strftime(TIME_FORMAT), repr(acc)))
        else:
            for row in rows[:len(reports)]:
                w.writerow((row["window"], repr(row["SUMPR"])))
    return paths


def write_predictions(predictions: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for window, d, cid, close_t, p in predictions:
            w.writerow((window, d.decision_time.strftime(TIME_FORMAT), cid, repr(close_t), repr(p),
                        d.signal.value, d.entry_time.strftime(TIME_FORMAT),
                        d.exit_time.strftime(TIME_FORMAT), repr(d.entry_price), repr(d.exit_price)))


def read_predictions(path) -> list[tuple]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != PREDICTION_COLUMNS:
            raise DataError(f"{path} is not a predictions file")
        for n, row in enumerate(reader, start=2):
            try:
                d = Decision(datetime.strptime(row["decision_time"], TIME_FORMAT), Signal(row["signal"]),
                             datetime.strptime(row["entry_time"], TIME_FORMAT),
                             datetime.strptime(row["exit_time"], TIME_FORMAT),
                             float(row["entry_price"]), float(row["exit_price"]))
                out.append((int(row["window"]), d, int(row["cluster"]), float(row["close_t"]),
                            float(row["predicted"])))
            except (ValueError, KeyError) as exc:
                raise DataError(f"bad prediction row: {exc}", row=n) from None
    return out


def backtest(predictions: Sequence[tuple], rate: float, fee_rate: float,
             resignal: bool = True) -> tuple[list[int], list[MetricsReport], list[Trade]]:
    """Re-run signals and the trade simulation from stored predictions.

    With ``resignal`` the signal is recomputed from the stored forecast and
    ``rate``; otherwise the stored signal is used as is.
    """
    by_window: dict[int, list[Decision]] = {}
    for window, d, _cid, close_t, p in predictions:
        if resignal:
            sig = decide(p, close_t, rate) if p > 0 else Signal.NONE
            d = Decision(d.decision_time, sig, d.entry_time, d.exit_time, d.entry_price, d.exit_price)
        by_window.setdefault(window, []).append(d)
    windows, reports, trades = [], [], []
    for window in sorted(by_window):
        log_ = simulate(by_window[window], fee_rate)
        windows.append(window)
        reports.append(report(log_))
        trades.extend(log_)
    return windows, reports, trades


# ---------------------------------------------------------------- driver

def prepare(config: PipelineConfig, series: Optional[BarSeries] = None,
            timings: Optional[dict] = None) -> tuple[BarSeries, list[AggBar], list[CandleImage]]:
    with stage("load", None, timings):
        if series is None:
            series = load_series(config)
    with stage("aggregate", None, timings):
        bars = aggregate(series, config.aggregation_period)
    with stage("render", None, timings):
        images = render_series(bars, config.image.rows, config.image.bars)
    return series, bars, images


def run_pipeline(config: PipelineConfig, series: Optional[BarSeries] = None) -> RunResult:
    """Run every walk-forward window and write the run artifacts to ``config.output_dir``.

    Report files are byte-identical across runs with the same config and data;
    only the timing block of manifest.json varies.
    """
    config.validate()
    out = Path(config.output_dir)
    with stage("output", None):
        out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    series, bars, images = prepare(config, series, timings)
    with stage("schedule", None, timings):
        splits = make_schedule(series, config.schedule.train_days, config.schedule.test_days,
                               config.schedule.count)
    results = [run_window(config, bars, images, split, out) for split in splits]

    all_trades = [t for r in results for t in r.trades]
    cumulative = report(all_trades)
    with stage("report", None, timings):
        emit_report([r.report for r in results], out, [r.split.index for r in results], cumulative,
                    all_trades)
        write_trade_log(all_trades, out / "trades.csv", TIME_FORMAT)
        write_predictions([p for r in results for p in r.predictions], out / "predictions.csv")

    manifest = {
        "config_digest": config.digest(),
        "data_sha256": series_digest(series),
        "n_minutes": len(series),
        "n_bars": len(bars),
        "fee_rate": config.fee_rate,
        "aggregation_period": config.aggregation_period,
        "config": config.to_dict(),
        "windows": [{
            "index": r.split.index,
            "seed": r.seed,
            "train_range": [r.split.train_range.start.isoformat(), r.split.train_range.end.isoformat()],
            "test_range": [r.split.test_range.start.isoformat(), r.split.test_range.end.isoformat()],
            "n_train": r.n_train,
            "n_test": r.n_test,
            "fsom_iterations": r.fsom_iterations,
            "cluster_sizes": {str(k): v for k, v in r.cluster_sizes.items()},
            "max_train_timestamp": r.max_train_time.isoformat() if r.max_train_time else None,
            "min_test_timestamp": r.min_test_time.isoformat() if r.min_test_time else None,
            "leak_free": r.leak_free,
        } for r in results],
        "leak_free": all(r.leak_free for r in results),
        "timings": {"global": timings, "windows": [r.timings for r in results]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return RunResult(out, results, cumulative, manifest)


def check_manifest(manifest: dict) -> bool:
    """Independent leak check: every window's last train timestamp precedes its first test timestamp."""
    for w in manifest["windows"]:
        a, b = w["max_train_timestamp"], w["min_test_timestamp"]
        if a is None:
            return False
        if b is not None and not datetime.fromisoformat(a) < datetime.fromisoformat(b):
            return False
    return True


__all__ = ["PipelineError", "run_pipeline", "emit_report", "backtest", "read_predictions",
           "write_predictions", "check_manifest", "prepare", "sample_indices", "MinMaxScaler"]

import csv
import json
from pathlib import Path

import pytest

from dfsom_trading import cli
from dfsom_trading.config import ConfigError, PipelineConfig, config_from_dict, load_config
from dfsom_trading.fsom import FsomError
from dfsom_trading.hog import HogConfig
from dfsom_trading.market_data import aggregate, make_schedule, write_minute_bars
from dfsom_trading.pipeline import (CUMULATIVE_LABEL, METRIC_COLUMNS, PipelineError, backtest,
                                    check_manifest, emit_report, read_predictions, run_pipeline,
                                    sample_indices)
from dfsom_trading.synthetic import generate_series
from dfsom_trading.trading import report

from reference_rows import load_rows, log_for_row

SMALL = {
    "schedule": {"train_days": 6, "test_days": 3, "count": 2},
    "fsom": {"layer_grid": [4, 4], "output_grid": [3, 3], "max_iter": 30},
    "gru": {"epochs": 20, "hidden_dim": 4, "min_samples": 10},
}


def small_config(out, **extra):
    values = json.loads(json.dumps(SMALL))
    values["output_dir"] = str(out)
    values.update(extra)
    return config_from_dict(values)


@pytest.fixture(scope="module")
def series():
    return generate_series(days=12, seed=1)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory, series):
    out = tmp_path_factory.mktemp("run")
    return run_pipeline(small_config(out), series)


def report_files(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(Path(out).rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_default_config_values():
    cfg = config_from_dict({})
    assert cfg.layers == [HogConfig(3, 1, 9), HogConfig(6, 2, 9)]
    assert cfg.fsom.layer_grid == (15, 15) and cfg.fsom.output_grid == (8, 8)
    assert (cfg.image.rows, cfg.image.bars) == (100, 10)
    assert (cfg.aggregation_period, cfg.fee_rate) == (30, 0.002)
    forex = config_from_dict({"market": "forex"})
    assert (forex.aggregation_period, forex.fee_rate) == (60, 0.001)
    assert (cfg.schedule.train_days, cfg.schedule.test_days, cfg.schedule.count) == (105, 14, 6)
    assert cfg.trading.rate == 0.001 and cfg.fsom.epsilon == 1e-4


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("market: forex\nfsom:\n  max_iter: 7\nlayers:\n  - {window_side: 4, stride: 2}\n")
    cfg = load_config(p, {"trading.rate": "0.002", "schedule.count": "3"})
    assert cfg.market == "forex" and cfg.fsom.max_iter == 7 and cfg.layers == [HogConfig(4, 2, 9)]
    assert cfg.trading.rate == 0.002 and cfg.schedule.count == 3
    assert cfg.digest() == load_config(p, {"trading.rate": "0.002", "schedule.count": "3"}).digest()
    assert cfg.digest() != load_config(p).digest()


@pytest.mark.parametrize("values", [
    {"bogus": 1}, {"fsom": {"nope": 2}}, {"market": "crypto"}, {"fsom": {"layer_grid": [3]}},
    {"layers": [{"window_side": 0}]}, {"image": {"rows": 1}}, {"trading": {"rate": -1}},
])
def test_config_errors(values):
    with pytest.raises(ConfigError):
        config_from_dict(values)


def test_sample_split_has_no_leak(series):
    bars = aggregate(series, 30)
    for split in make_schedule(series, 6, 3, 2):
        train, test = sample_indices(bars, split, 10)
        assert train and test
        assert max(bars[i + 10].end_time for i in train) < split.test_range.start
        assert all(bars[i + 10].start_time >= split.test_range.start for i in test)
        assert all(bars[i].start_time >= split.train_range.start for i in train)


def test_run_outputs(small_run):
    out = small_run.output_dir
    with open(out / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2", CUMULATIVE_LABEL]
    assert small_run.manifest["leak_free"] and check_manifest(small_run.manifest)
    assert len(small_run.trades) == small_run.cumulative.tn
    for name in ("trades.csv", "equity_curve.csv", "predictions.csv", "metrics.json",
                 "models/dfsom_w1.bin", "models/gru_w2.bin", "models/gru_loss_w1.csv"):
        assert (out / name).exists(), name
    cum = json.loads((out / "metrics.json").read_text())[-1]
    assert cum["PR"] == pytest.approx(small_run.cumulative.pr * 100)
    assert cum["SUMPR"] == pytest.approx(sum(w.report.pr for w in small_run.windows) * 100)


def test_run_is_byte_identical(small_run, series, tmp_path):
    again = run_pipeline(small_config(tmp_path), series)
    assert report_files(tmp_path) == report_files(small_run.output_dir)
    a, b = dict(small_run.manifest), dict(again.manifest)
    a.pop("timings"), b.pop("timings")
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    a.pop("config_digest"), b.pop("config_digest")
    assert a == b


def test_cache_reuses_models(series, tmp_path):
    cfg = small_config(tmp_path / "a", cache_dir=str(tmp_path / "cache"))
    run_pipeline(cfg, series)
    assert len(list((tmp_path / "cache").glob("dfsom-*.bin"))) == 2
    cfg2 = small_config(tmp_path / "b", cache_dir=str(tmp_path / "cache"))
    run_pipeline(cfg2, series)
    assert report_files(tmp_path / "a") == report_files(tmp_path / "b")


def test_backtest_reproduces_run(small_run):
    cfg = small_run.manifest["config"]
    preds = read_predictions(small_run.output_dir / "predictions.csv")
    windows, reports, trades = backtest(preds, cfg["trading"]["rate"], small_run.manifest["fee_rate"])
    assert windows == [1, 2]
    assert reports == [w.report for w in small_run.windows]
    assert len(trades) == len(small_run.trades)


def test_emit_report_empty(tmp_path):
    emit_report([], tmp_path)
    assert (tmp_path / "metrics.csv").read_text().splitlines() == [",".join(METRIC_COLUMNS)]
    assert json.loads((tmp_path / "metrics.json").read_text()) == []
    assert (tmp_path / "equity_curve.csv").read_text().splitlines() == ["timestamp,cumulative_pr"]


def test_emit_report_running_sum(tmp_path):
    rows = [r for r in load_rows() if r["key"][:2] == ("AG", 6)]
    reports = [report(log_for_row(r)) for r in rows]
    emit_report(reports, tmp_path, [r["key"][2] for r in rows])
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert data[-2]["SUMPR"] == pytest.approx(26.34, abs=1e-9)
    assert data[-1]["window"] == CUMULATIVE_LABEL and data[-1]["TN"] == sum(r["TN"] for r in rows)
    with open(tmp_path / "metrics.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == len(data) == 7
    for j, c in zip(data, table):
        for col in METRIC_COLUMNS:
            if j[col] is None:
                assert c[col] == ""
            elif col == "window":
                assert c[col] == str(j[col])
            else:
                assert float(c[col]) == j[col]


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report([], blocker / "sub")


def test_pipeline_error_is_stage_tagged(tmp_path):
    cfg = small_config(tmp_path, data={"path": str(tmp_path / "missing.csv")})
    with pytest.raises(PipelineError) as err:
        run_pipeline(cfg)
    assert err.value.stage == "load" and "stage load" in str(err.value)


def test_cli_exit_codes(tmp_path, series, monkeypatch, capsys):
    assert cli.main(["run", "-q", "--data", str(tmp_path / "missing.csv"), "-o", str(tmp_path / "out")]) == cli.EXIT_DATA
    assert cli.main(["run", "-q", "--set", "fsom.bogus=1"]) == cli.EXIT_CONFIG
    assert cli.main(["run", "-q", "--set", "novalue"]) == cli.EXIT_CONFIG

    def boom(config):
        raise PipelineError("dfsom", 1, FsomError("non-finite weights"))

    monkeypatch.setattr(cli, "run_pipeline", boom)
    assert cli.main(["run", "-q", "--data", "x.csv"]) == cli.EXIT_NUMERIC


def test_cli_verbs(tmp_path, capsys):
    data = tmp_path / "m.csv"
    assert cli.main(["synth", str(data), "--days", "12", "--synth-seed", "1", "-q"]) == 0
    cfg = tmp_path / "c.yaml"
    cfg.write_text(json.dumps(SMALL))
    base = ["-q", "-c", str(cfg), "--data", str(data)]
    assert cli.main(["render", *base, "-o", str(tmp_path / "r"), "--png"]) == 0
    assert len(list((tmp_path / "r" / "png").glob("*.png"))) == 12 * 8 - 9
    assert cli.main(["features", *base, "-o", str(tmp_path / "f")]) == 0
    assert (tmp_path / "f" / "features_layer1.bin").exists()
    assert cli.main(["run", *base, "-o", str(tmp_path / "run")]) == 0
    assert cli.main(["backtest", *base, "-o", str(tmp_path / "run")]) == 0
    assert ((tmp_path / "run" / "backtest" / "metrics.csv").read_bytes()
            .startswith(b"window,PR,SUMPR"))
    bt = list(csv.reader(open(tmp_path / "run" / "backtest" / "metrics.csv")))
    orig = list(csv.reader(open(tmp_path / "run" / "metrics.csv")))
    assert [r[:6] for r in bt[:-1]] == [r[:6] for r in orig[:-1]]
    assert cli.main(["cluster", *base, "-o", str(tmp_path / "cl")]) == 0
    assert (tmp_path / "cl" / "clusters.csv").exists()

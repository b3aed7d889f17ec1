from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfsom_trading.trading import (FOREX_FEE, FUTURES_FEE, Decision, MetricsReport, Signal,
                                   SignalThresholds, Trade, decide, metrics_from_totals, report,
                                   simulate, trade_return, write_trade_log)

from reference_rows import (AVERAGES_MISPRINTS, AVG_RETURN_MISPRINTS, SUMPR_MISPRINTS, load_rows,
                            log_for_row)

T0 = datetime(2020, 1, 1, 9, 0)


def decision(i, signal, entry=100.0, exit=102.0):
    t = T0 + timedelta(minutes=30 * i)
    return Decision(t - timedelta(minutes=1), signal, t, t + timedelta(minutes=29), entry, exit)


def random_log(r, n, fee=FUTURES_FEE):
    log = []
    for i in range(n):
        e = float(r.uniform(50, 150))
        x = e * float(1 + r.normal(0, 0.01))
        d = Signal.LONG if r.random() < 0.5 else Signal.SHORT
        t = T0 + timedelta(minutes=30 * i)
        log.append(Trade(d, t, t + timedelta(minutes=29), e, x, fee, trade_return(d, e, x, fee)))
    return log


def test_decide_rules():
    assert SignalThresholds.around(100.0, 0.001).long_threshold == pytest.approx(100.1)
    assert decide(100.2, 100.0) is Signal.LONG
    assert decide(99.8, 100.0) is Signal.SHORT
    assert decide(100.0, 100.0) is Signal.NONE
    assert decide(100.0, 100.0, rate=0.0) is Signal.NONE
    assert decide(100.1 + 1e-9, 100.0) is Signal.LONG
    with pytest.raises(ValueError):
        decide(-1.0, 100.0)
    with pytest.raises(ValueError):
        decide(1.0, 1.0, rate=-0.1)


def test_trade_returns():
    assert trade_return(Signal.LONG, 100, 102, 0.002) == pytest.approx(0.018)
    assert trade_return(Signal.SHORT, 100, 102, 0.002) == pytest.approx(-0.022)
    with pytest.raises(ValueError):
        trade_return(Signal.NONE, 100, 102, 0.002)
    assert (FUTURES_FEE, FOREX_FEE) == (0.002, 0.001)


def test_simulate_basic():
    log = simulate([decision(0, Signal.LONG), decision(1, Signal.NONE), decision(2, Signal.SHORT)], 0.002)
    assert [t.direction for t in log] == [Signal.LONG, Signal.SHORT]
    assert log[0].net_return == pytest.approx(0.018) and log[1].net_return == pytest.approx(-0.022)
    empty = simulate([decision(i, Signal.NONE) for i in range(5)])
    assert empty == [] and report(empty).pr == 0 and report(empty).avg_return is None


def test_simulate_guards():
    with pytest.raises(ValueError):
        simulate([decision(1, Signal.LONG), decision(0, Signal.LONG)])
    with pytest.raises(ValueError):
        simulate([decision(0, Signal.LONG, entry=None)])
    d0 = decision(0, Signal.LONG)
    overlapping = Decision(d0.decision_time, Signal.SHORT, d0.entry_time + timedelta(minutes=5),
                           d0.exit_time + timedelta(minutes=5), 100.0, 101.0)
    assert len(simulate([d0, overlapping])) == 1


def test_report_partition_and_none_fields():
    t = random_log(np.random.default_rng(0), 1)[0]
    zero = Trade(Signal.LONG, T0, T0, 100, 100.2, 0.002, 0.0)
    rep = report([zero])
    assert (rep.tn_plus, rep.tn_minus, rep.accuracy, rep.pl_ratio) == (0, 1, 0.0, None)
    win = Trade(Signal.LONG, T0, T0, 100, 103, 0.002, 0.028)
    assert report([win]).pl_ratio is None and report([win]).avg_loss is None
    assert set(report([t]).as_dict()) == {"pr", "tn", "tn_plus", "tn_minus", "avg_return", "avg_profit",
                                          "avg_loss", "pl_ratio", "accuracy"}


def check_identities(rep: MetricsReport, log):
    assert rep.tn == rep.tn_plus + rep.tn_minus == len(log)
    assert rep.pr == pytest.approx(sum(t.net_return for t in log), rel=1e-9, abs=1e-12)
    if rep.tn:
        assert rep.avg_return * rep.tn == pytest.approx(rep.pr * 100, rel=1e-9, abs=1e-12)
        assert rep.accuracy * rep.tn == pytest.approx(rep.tn_plus, rel=1e-9)
    if rep.pl_ratio is not None:
        assert rep.pl_ratio * abs(rep.avg_loss) == pytest.approx(rep.avg_profit, rel=1e-9)
    if rep.avg_profit is not None:
        assert rep.avg_profit > 0
    if rep.avg_loss is not None:
        assert rep.avg_loss <= 0


def test_identities_on_random_logs():
    r = np.random.default_rng(99)
    for _ in range(1000):
        log = random_log(r, int(r.integers(0, 40)))
        check_identities(report(log), log)


def test_pr_additivity():
    r = np.random.default_rng(1)
    for _ in range(200):
        a, b = random_log(r, int(r.integers(0, 20))), random_log(r, int(r.integers(0, 20)))
        assert report(a + b).pr == pytest.approx(report(a).pr + report(b).pr, abs=1e-12)


def test_fee_monotonicity_and_antisymmetry():
    r = np.random.default_rng(7)
    for _ in range(1000):
        e, x = float(r.uniform(1, 500)), float(r.uniform(1, 500))
        f1, f2 = sorted(r.uniform(0, 0.01, 2))
        if f1 == f2:
            continue
        for d in (Signal.LONG, Signal.SHORT):
            assert trade_return(d, e, x, f2) < trade_return(d, e, x, f1)
        assert trade_return(Signal.LONG, e, x, 0.0) == pytest.approx(-trade_return(Signal.SHORT, e, x, 0.0),
                                                                       rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-0.05, 0.05), max_size=60))
def test_metric_identities_property(returns):
    log = [Trade(Signal.LONG, T0, T0, 100.0, 100.0, 0.0, r) for r in returns]
    check_identities(report(log), log)


def test_metrics_from_totals_matches_report():
    log = random_log(np.random.default_rng(3), 50)
    wins = [t.net_return for t in log if t.net_return > 0]
    rest = [t.net_return for t in log if t.net_return <= 0]
    assert metrics_from_totals(sum(wins), sum(rest), len(wins), len(rest)) == report(log)


def test_trade_log_csv(tmp_path):
    log = random_log(np.random.default_rng(2), 3)
    write_trade_log(log, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "direction,entry_time,exit_time,entry_price,exit_price,net_return"
    assert float(lines[1].split(",")[-1]) == log[0].net_return


def test_first_reference_row():
    row = next(r for r in load_rows() if r["key"] == ("AG", 1, 1))
    assert (row["PR"], row["TN"], row["TN+"], row["TN-"]) == (-15.29, 168, 74, 94)
    rep = report(log_for_row(row))
    assert rep.avg_return == pytest.approx(-0.091, abs=5e-4)
    assert rep.pl_ratio == pytest.approx(0.742, abs=1e-3)
    assert rep.accuracy * 100 == pytest.approx(44.05, abs=1e-2)


def test_reference_rows_consistent_within_rounding():
    """Every printed row agrees with the metric formulas once print rounding is accounted for."""
    rows = load_rows()
    assert len(rows) == 144
    for row in rows:
        tn, tp, tm = row["TN"], row["TN+"], row["TN-"]
        assert tn == tp + tm, row["key"]
        assert abs(tp / tn * 100 - row["Accuracy"]) <= 0.005 + 1e-9, row["key"]
        ap, al = row["Avg_profit"], row["Avg_loss"]
        lo = (ap - 5e-4) / (abs(al) + 5e-4)
        hi = (ap + 5e-4) / max(abs(al) - 5e-4, 1e-12)
        assert lo - 5e-4 - 1e-9 <= row["P/L"] <= hi + 5e-4 + 1e-9, row["key"]
        if row["key"] not in AVERAGES_MISPRINTS:
            assert abs(ap * tp + al * tm - row["PR"]) <= 0.005 + 5e-4 * tn + 1e-9, row["key"]
        if row["key"] not in AVG_RETURN_MISPRINTS:
            assert abs(row["PR"] / tn - row["Avg_return"]) <= 5e-4 + 0.005 / tn + 1e-9, row["key"]


def test_mismatched_rows_are_real_outliers():
    for row in load_rows():
        if row["key"] in AVG_RETURN_MISPRINTS:
            assert abs(row["PR"] / row["TN"] - row["Avg_return"]) > 5e-4 + 0.005 / row["TN"]
        if row["key"] in AVERAGES_MISPRINTS:
            residual = row["Avg_profit"] * row["TN+"] + row["Avg_loss"] * row["TN-"] - row["PR"]
            assert abs(residual) > 0.005 + 5e-4 * row["TN"]


def test_cumulative_pr_column():
    by_model = {}
    for row in load_rows():
        inst, model, _ = row["key"]
        by_model.setdefault((inst, model), []).append(row)
    for key, rows in by_model.items():
        printed = [r["SUMPR"] for r in rows if r["SUMPR"] is not None]
        assert len(printed) == 1, key
        if key in SUMPR_MISPRINTS:
            assert abs(sum(r["PR"] for r in rows) - printed[0]) > 0.1, key
            continue
        assert sum(r["PR"] for r in rows) == pytest.approx(printed[0], abs=0.035), key

import json
from datetime import datetime, timedelta
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from dfsom_trading.market_data import AggBar, MinuteBar

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"
T0 = datetime(2020, 1, 6, 9, 0)


def minute(i, o, h, l, c, v=1.0, t0=T0):
    return MinuteBar(t0 + timedelta(minutes=i), float(o), float(h), float(l), float(c), float(v))


def agg_from_rows(rows, start=0):
    """rows: [open, high, low, close, volume] per minute."""
    return AggBar.from_minutes([minute(start + j, *r) for j, r in enumerate(rows)])


def load_golden(name):
    doc = json.loads((GOLDEN / f"chart_{name}.json").read_text())
    bars = []
    t = 0
    for minutes in doc["bars"]:
        bars.append(agg_from_rows(minutes, t))
        t += len(minutes)
    expected = {}
    for ch in ("red", "green", "blue"):
        m = np.zeros((doc["rows"], len(bars)))
        for col, lo, hi, val in doc[ch]:
            m[lo:hi + 1, col] = float(Fraction(val))
        expected[ch] = m
    return bars, doc["rows"], expected


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results.values():
            terminalreporter.write_line(line)

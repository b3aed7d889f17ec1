"""Deterministic synthetic minute bars (sine + trend + seeded noise)."""

from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from .market_data import BarSeries, MinuteBar


def generate_series(
    days: int = 60,
    minutes_per_day: int = 240,
    start: datetime = datetime(2020, 5, 18, 9, 0),
    base_price: float = 4000.0,
    trend_per_day: float = 2.0,
    amplitude: float = 40.0,
    period_minutes: float = 600.0,
    noise: float = 1.5,
    seed: int = 0,
) -> BarSeries:
    """One session of ``minutes_per_day`` consecutive minutes per calendar day."""
    rng = np.random.default_rng(seed)
    n = days * minutes_per_day
    t = np.arange(n + 1, dtype=float)
    path = (base_price + trend_per_day * t / minutes_per_day
            + amplitude * np.sin(2 * np.pi * t / period_minutes)
            + np.cumsum(rng.normal(0.0, noise, n + 1)))
    opens, closes = path[:-1], path[1:]
    wick_up = np.abs(rng.normal(0.0, noise, n))
    wick_dn = np.abs(rng.normal(0.0, noise, n))
    highs = np.maximum(opens, closes) + wick_up
    lows = np.minimum(opens, closes) - wick_dn
    volumes = np.round(rng.lognormal(4.0, 0.5, n))
    bars = []
    for i in range(n):
        day, minute = divmod(i, minutes_per_day)
        ts = start + timedelta(days=day, minutes=minute)
        bars.append(MinuteBar(ts, round(float(opens[i]), 4), round(float(highs[i]), 4),
                              round(float(lows[i]), 4), round(float(closes[i]), 4), float(volumes[i])))
    # rounding can nudge open/close past a wick by a hair
    fixed = [MinuteBar(b.timestamp, b.open, max(b.high, b.open, b.close), min(b.low, b.open, b.close),
                       b.close, b.volume) for b in bars]
    return BarSeries(fixed)

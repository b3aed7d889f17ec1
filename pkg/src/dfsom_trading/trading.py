"""Threshold signals, one-bar holding simulation and the nine performance metrics."""

from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass
from datetime import datetime
from typing import Iterable, Optional, Sequence

FUTURES_FEE = 0.002
FOREX_FEE = 0.001
DEFAULT_RATE = 0.001


class Signal(str, enum.Enum):
    LONG = "long"
    SHORT = "short"
    NONE = "none"


@dataclass(frozen=True)
class SignalThresholds:
    long_threshold: float
    short_threshold: float
    rate: float

    @classmethod
    def around(cls, close: float, rate: float) -> "SignalThresholds":
        return cls(close * (1.0 + rate), close * (1.0 - rate), rate)


def decide(predicted_next: float, close_t: float, rate: float = DEFAULT_RATE) -> Signal:
    if close_t <= 0 or predicted_next <= 0:
        raise ValueError("prices must be positive")
    if rate < 0:
        raise ValueError("rate must be non-negative")
    th = SignalThresholds.around(close_t, rate)
    if predicted_next > th.long_threshold:
        return Signal.LONG
    if predicted_next < th.short_threshold:
        return Signal.SHORT
    return Signal.NONE


@dataclass(frozen=True)
class Decision:
    """A signal taken at ``decision_time`` and the bar it would be traded on."""

    decision_time: datetime
    signal: Signal
    entry_time: datetime
    exit_time: datetime
    entry_price: Optional[float]
    exit_price: Optional[float]


@dataclass(frozen=True)
class Trade:
    direction: Signal
    entry_time: datetime
    exit_time: datetime
    entry_price: float
    exit_price: float
    fee_rate: float
    net_return: float


def trade_return(direction: Signal, entry: float, exit: float, fee_rate: float) -> float:
    if direction is Signal.LONG:
        return (exit - entry) / entry - fee_rate
    if direction is Signal.SHORT:
        return (entry - exit) / entry - fee_rate
    raise ValueError(f"no return for signal {direction}")


def simulate(decisions: Iterable[Decision], fee_rate: float = FUTURES_FEE) -> list[Trade]:
    """One round trip per non-None signal, held for exactly its bar.

    A signal whose entry would fall inside a still-open position is skipped.
    """
    trades: list[Trade] = []
    prev_time = None
    for d in decisions:
        if prev_time is not None and d.decision_time < prev_time:
            raise ValueError("decisions are not time-ordered")
        prev_time = d.decision_time
        if d.signal is Signal.NONE:
            continue
        if d.entry_price is None or d.exit_price is None:
            raise ValueError(f"missing prices for signalled bar at {d.entry_time}")
        if trades and d.entry_time < trades[-1].exit_time:
            continue
        trades.append(Trade(d.signal, d.entry_time, d.exit_time, d.entry_price, d.exit_price,
                            fee_rate, trade_return(d.signal, d.entry_price, d.exit_price, fee_rate)))
    return trades


@dataclass(frozen=True)
class MetricsReport:
    """``pr`` and ``accuracy`` are fractions; the three averages are percent per trade.

    Undefined ratios (no trades, no losers, ...) are ``None``.
    """

    pr: float
    tn: int
    tn_plus: int
    tn_minus: int
    avg_return: Optional[float]
    avg_profit: Optional[float]
    avg_loss: Optional[float]
    pl_ratio: Optional[float]
    accuracy: Optional[float]

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_from_totals(total_profit: float, total_loss: float, tn_plus: int, tn_minus: int) -> MetricsReport:
    """Metrics from summed winning returns, summed non-winning returns (<= 0) and the counts."""
    tn = tn_plus + tn_minus
    pr = total_profit + total_loss
    avg_return = pr / tn * 100 if tn else None
    avg_profit = total_profit / tn_plus * 100 if tn_plus else None
    avg_loss = total_loss / tn_minus * 100 if tn_minus else None
    pl = None
    if avg_profit is not None and avg_loss:
        pl = avg_profit / abs(avg_loss)
    return MetricsReport(pr, tn, tn_plus, tn_minus, avg_return, avg_profit, avg_loss, pl,
                         tn_plus / tn if tn else None)


def report(log: Sequence[Trade]) -> MetricsReport:
    # zero-return trades count as non-profitable
    wins = [t.net_return for t in log if t.net_return > 0]
    rest = [t.net_return for t in log if t.net_return <= 0]
    return metrics_from_totals(sum(wins), sum(rest), len(wins), len(rest))


TRADE_COLUMNS = ("direction", "entry_time", "exit_time", "entry_price", "exit_price", "net_return")


def write_trade_log(log: Sequence[Trade], path, time_format: str = "%Y-%m-%dT%H:%M") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRADE_COLUMNS)
        for t in log:
            w.writerow([t.direction.value, t.entry_time.strftime(time_format),
                        t.exit_time.strftime(time_format), repr(t.entry_price),
                        repr(t.exit_price), repr(t.net_return)])

"""Minute-bar ingestion, N-minute aggregation and walk-forward schedules."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import IO, Iterator, NamedTuple, Sequence, Union

import numpy as np

DEFAULT_TIME_FORMAT = "%Y-%m-%dT%H:%M"


class DataError(ValueError):
    """Raised for unusable market data. ``row`` is 1-based when known."""

    def __init__(self, message: str, row: int | None = None, field: str | None = None):
        self.row = row
        self.field = field
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class MinuteBar:
    timestamp: datetime
    open: float
    high: float
    low: float
    close: float
    volume: float

    def validate(self) -> None:
        if min(self.open, self.high, self.low, self.close) <= 0:
            raise DataError("prices must be positive", field="price")
        if self.low > self.high:
            raise DataError(f"low {self.low} above high {self.high}", field="low")
        if not (self.low <= self.open <= self.high):
            raise DataError(f"open {self.open} outside [{self.low}, {self.high}]", field="open")
        if not (self.low <= self.close <= self.high):
            raise DataError(f"close {self.close} outside [{self.low}, {self.high}]", field="close")
        if self.volume < 0:
            raise DataError(f"negative volume {self.volume}", field="volume")


class BarSeries(Sequence[MinuteBar]):
    """Immutable, strictly time-ordered sequence of minute bars."""

    def __init__(self, bars: Sequence[MinuteBar]):
        self._bars = tuple(bars)
        for i in range(1, len(self._bars)):
            if self._bars[i].timestamp <= self._bars[i - 1].timestamp:
                raise DataError(
                    f"timestamp {self._bars[i].timestamp} does not increase", row=i + 1
                )

    def __len__(self) -> int:
        return len(self._bars)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return BarSeries(self._bars[idx])
        return self._bars[idx]

    def __iter__(self) -> Iterator[MinuteBar]:
        return iter(self._bars)

    def __eq__(self, other) -> bool:
        return isinstance(other, BarSeries) and self._bars == other._bars

    @property
    def timestamps(self) -> list[datetime]:
        return [b.timestamp for b in self._bars]

    @property
    def closes(self) -> np.ndarray:
        return np.array([b.close for b in self._bars], dtype=float)


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", newline=""), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8"), newline=""), False
    if isinstance(source, io.TextIOBase):
        return source, False
    # binary stream
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), False


_FIELDS = ("timestamp", "open", "high", "low", "close", "volume")


def parse_minute_bars(
    source: Union[str, os.PathLike, bytes, IO],
    delimiter: str = ",",
    has_header: bool = False,
    time_format: str = DEFAULT_TIME_FORMAT,
) -> BarSeries:
    """Parse delimited ``timestamp,open,high,low,close,volume`` rows.

    ``source`` may be a path, raw bytes, or a text/binary stream. Row numbers in
    errors count physical rows from 1, header included.
    """
    stream, owned = _open_text(source)
    bars: list[MinuteBar] = []
    try:
        reader = csv.reader(stream, delimiter=delimiter)
        for rownum, row in enumerate(reader, start=1):
            if has_header and rownum == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 6:
                raise DataError(f"expected 6 fields, got {len(row)}", row=rownum)
            try:
                ts = datetime.strptime(row[0].strip(), time_format)
            except ValueError as exc:
                raise DataError(f"bad timestamp {row[0]!r}: {exc}", rownum, "timestamp") from None
            values = []
            for name, raw in zip(_FIELDS[1:], row[1:]):
                try:
                    values.append(float(raw))
                except ValueError:
                    raise DataError(f"bad {name} value {raw!r}", rownum, name) from None
                if not np.isfinite(values[-1]):
                    raise DataError(f"non-finite {name}", rownum, name)
            bar = MinuteBar(ts, *values)
            try:
                bar.validate()
            except DataError as exc:
                raise DataError(str(exc), rownum, exc.field) from None
            if bars and ts <= bars[-1].timestamp:
                raise DataError(f"timestamp {ts} is not after {bars[-1].timestamp}", rownum, "timestamp")
            bars.append(bar)
    finally:
        if owned:
            stream.close()
    if not bars:
        raise DataError("no minute bars in input")
    return BarSeries(bars)


def write_minute_bars(series: Sequence[MinuteBar], path, time_format: str = DEFAULT_TIME_FORMAT) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for b in series:
            w.writerow([b.timestamp.strftime(time_format), repr(b.open), repr(b.high),
                        repr(b.low), repr(b.close), repr(b.volume)])


@dataclass(frozen=True)
class AggBar:
    start_time: datetime
    open: float
    high: float
    low: float
    close: float
    volume: float
    minutes: tuple[MinuteBar, ...]

    @property
    def end_time(self) -> datetime:
        """Timestamp of the last constituent minute."""
        return self.minutes[-1].timestamp

    @classmethod
    def from_minutes(cls, minutes: Sequence[MinuteBar]) -> "AggBar":
        minutes = tuple(minutes)
        if not minutes:
            raise DataError("cannot aggregate an empty group")
        return cls(
            start_time=minutes[0].timestamp,
            open=minutes[0].open,
            high=max(m.high for m in minutes),
            low=min(m.low for m in minutes),
            close=minutes[-1].close,
            volume=float(sum(m.volume for m in minutes)),
            minutes=minutes,
        )


def aggregate(series: Sequence[MinuteBar], period: int = 30) -> list[AggBar]:
    """Group consecutive rows into bars of ``period`` minutes.

    Grouping is by row count; calendar gaps are not inspected. A trailing
    partial group is dropped.
    """
    if period <= 0:
        raise ValueError(f"period must be positive, got {period}")
    n = len(series)
    if n < period:
        raise DataError(f"series of {n} minutes is shorter than one {period}-minute period")
    return [AggBar.from_minutes(series[i:i + period]) for i in range(0, n - period + 1, period)]


class TimeRange(NamedTuple):
    """Half-open interval ``[start, end)``."""

    start: datetime
    end: datetime

    def __contains__(self, ts: object) -> bool:
        return isinstance(ts, datetime) and self.start <= ts < self.end


@dataclass(frozen=True)
class SplitWindow:
    train_range: TimeRange
    test_range: TimeRange
    index: int


def _as_timedelta(span) -> timedelta:
    return span if isinstance(span, timedelta) else timedelta(days=span)


def make_schedule(series: Sequence[MinuteBar], train_span, test_span, count: int) -> list[SplitWindow]:
    """Walk-forward splits anchored at midnight of the first bar's day.

    Test ranges tile the evaluation period contiguously; each train range is the
    ``train_span`` immediately before its test range.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return []
    if len(series) == 0:
        raise DataError("empty series")
    train_span, test_span = _as_timedelta(train_span), _as_timedelta(test_span)
    if train_span <= timedelta(0) or test_span <= timedelta(0):
        raise ValueError("spans must be positive")
    first = series[0].timestamp
    anchor = datetime(first.year, first.month, first.day)
    windows = []
    for i in range(count):
        test_start = anchor + train_span + i * test_span
        windows.append(
            SplitWindow(
                train_range=TimeRange(test_start - train_span, test_start),
                test_range=TimeRange(test_start, test_start + test_span),
                index=i + 1,
            )
        )
    last_test = windows[-1].test_range
    if not any(b.timestamp in last_test for b in reversed(series)):
        raise DataError(
            f"insufficient data: no bars in test range {last_test.start}..{last_test.end} "
            f"of window {count}"
        )
    return windows

"""Extended candlestick images: K-lines in red/green, per-price volume in blue.

Row 0 of every channel corresponds to the window's lowest price and row
``rows - 1`` to its highest; column ``c`` holds bar ``c`` of the window.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .market_data import AggBar

WINDOW_BARS = 10
BODY = 1.0
SHADOW = 0.5

_HEADER = struct.Struct("<qqdd")


@dataclass
class CandleImage:
    red: np.ndarray
    green: np.ndarray
    blue: np.ndarray
    price_min: float
    price_max: float

    @classmethod
    def blank(cls, rows: int, cols: int, price_min: float, price_max: float) -> "CandleImage":
        return cls(np.zeros((rows, cols)), np.zeros((rows, cols)), np.zeros((rows, cols)),
                   float(price_min), float(price_max))

    @property
    def shape(self) -> tuple[int, int]:
        return self.red.shape

    @property
    def rows(self) -> int:
        return self.red.shape[0]

    def row_of(self, price: float) -> int:
        """Linear price-to-row map, rounded half-up and clipped to the image."""
        rows = self.rows
        span = self.price_max - self.price_min
        if span <= 0:
            return rows // 2
        r = math.floor((rows - 1) * (price - self.price_min) / span + 0.5)
        return min(max(r, 0), rows - 1)

    def rows_between(self, p1: float, p2: float) -> slice:
        """Inclusive row span between two prices, in either order."""
        a, b = sorted((self.row_of(p1), self.row_of(p2)))
        return slice(a, b + 1)

    def to_rgb(self) -> np.ndarray:
        return np.stack([self.red, self.green, self.blue], axis=-1)

    def to_bytes(self) -> bytes:
        rows, cols = self.shape
        body = np.concatenate([self.red.ravel(), self.green.ravel(), self.blue.ravel()])
        return _HEADER.pack(rows, cols, self.price_min, self.price_max) + body.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CandleImage":
        rows, cols, pmin, pmax = _HEADER.unpack_from(data)
        arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(3, rows, cols)
        return cls(arr[0].copy(), arr[1].copy(), arr[2].copy(), pmin, pmax)

    def save_png(self, path) -> None:
        from PIL import Image

        rgb = np.clip(np.rint(self.to_rgb() * 255), 0, 255).astype(np.uint8)
        # highest price on top for viewing
        Image.fromarray(rgb[::-1]).save(path)


def draw_kline(image: CandleImage, bar: AggBar, column: int) -> None:
    """Paint one K-line. Falling bars go to red, rising or flat bars to green.

    Shadows are laid down first so the body keeps value 1 on shared rows.
    """
    if bar.open > bar.close:
        channel = image.red
        lo_body, hi_body = bar.close, bar.open
    else:
        channel = image.green
        lo_body, hi_body = bar.open, bar.close
    channel[image.rows_between(hi_body, bar.high), column] = SHADOW
    channel[image.rows_between(bar.low, lo_body), column] = SHADOW
    channel[image.rows_between(lo_body, hi_body), column] = BODY


def paint_volume(image: CandleImage, bar: AggBar, column: int) -> None:
    """Spread each minute's volume evenly over its low..high rows, then scale the column to max 1."""
    col = np.zeros(image.rows)
    for k in bar.minutes:
        span = image.rows_between(k.low, k.high)
        col[span] += k.volume / (span.stop - span.start)
    peak = col.max()
    if peak > 0:
        col /= peak
    image.blue[:, column] = col


def render_window(bars: Sequence[AggBar], rows: int = 100, n_bars: int = WINDOW_BARS) -> CandleImage:
    if len(bars) != n_bars:
        raise ValueError(f"expected {n_bars} bars, got {len(bars)}")
    if rows < 2:
        raise ValueError(f"rows must be at least 2, got {rows}")
    for b in bars:
        if not b.minutes:
            raise ValueError(f"bar at {b.start_time} has no constituent minutes")
    price_min = min(b.low for b in bars)
    price_max = max(b.high for b in bars)
    image = CandleImage.blank(rows, n_bars, price_min, price_max)
    for column, bar in enumerate(bars):
        draw_kline(image, bar, column)
        paint_volume(image, bar, column)
    return image


def render_series(bars: Sequence[AggBar], rows: int = 100, n_bars: int = WINDOW_BARS) -> list[CandleImage]:
    """Images for every window of ``n_bars`` consecutive bars, sliding by one bar."""
    return [render_window(bars[i:i + n_bars], rows, n_bars) for i in range(len(bars) - n_bars + 1)]

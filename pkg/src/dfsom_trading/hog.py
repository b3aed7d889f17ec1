"""Unweighted orientation histograms over sliding square windows."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .chart import CandleImage

GRAY_WEIGHTS = (0.3, 0.59, 0.11)


@dataclass(frozen=True)
class HogConfig:
    window_side: int = 3
    stride: int = 1
    bin_count: int = 9

    def __post_init__(self):
        if self.bin_count < 1:
            raise ValueError("bin_count must be positive")
        if self.window_side < 1:
            raise ValueError("window_side must be positive")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")

    @property
    def bin_span(self) -> float:
        """Degrees covered by one orientation bin."""
        return 180.0 / self.bin_count


@dataclass
class PatchGrid:
    descriptors: np.ndarray  # (n_rows * n_cols, bin_count), row-major window order
    n_rows: int
    n_cols: int

    @property
    def total(self) -> int:
        return self.n_rows * self.n_cols


def to_grayscale(image: CandleImage) -> np.ndarray:
    r, g, b = image.red, image.green, image.blue
    if not (r.shape == g.shape == b.shape):
        raise ValueError(f"channel shapes differ: {r.shape}, {g.shape}, {b.shape}")
    wr, wg, wb = GRAY_WEIGHTS
    return wr * r + wg * g + wb * b


def gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences along columns (x) and rows (y), edge-replicated.

    ``gx[r, c] = I[r, c+1] - I[r, c-1]`` and ``gy[r, c] = I[r+1, c] - I[r-1, c]``.
    """
    gray = np.asarray(gray, dtype=float)
    if gray.ndim != 2 or min(gray.shape) < 3:
        raise ValueError(f"image must be at least 3x3, got {gray.shape}")
    p = np.pad(gray, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return gx, gy


def orientation_angles(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Unsigned gradient angle in degrees, folded into [0, 180). Zero gradients give 0."""
    theta = np.degrees(np.arctan2(gy, gx))
    theta = np.where(theta < 0, theta + 180.0, theta)
    return np.where(theta >= 180.0, 0.0, theta)


def orientation_bins(gx: np.ndarray, gy: np.ndarray, config: HogConfig) -> np.ndarray:
    gx, gy = np.asarray(gx, dtype=float), np.asarray(gy, dtype=float)
    if gx.shape != gy.shape:
        raise ValueError("gradient shapes differ")
    bins = np.floor(orientation_angles(gx, gy) / config.bin_span).astype(np.int64)
    return np.clip(bins, 0, config.bin_count - 1)


def window_count(length: int, side: int, stride: int) -> int:
    """Number of window placements along one axis: ceil((L - side) / S) + 1."""
    if side > length:
        raise ValueError(f"window {side} larger than axis {length}")
    return -(-(length - side) // stride) + 1


def window_starts(length: int, side: int, stride: int) -> np.ndarray:
    """Start offsets at the given stride; the last window is shifted flush with the border."""
    n = window_count(length, side, stride)
    return np.minimum(np.arange(n) * stride, length - side)


def extract_patch_grid(gray: np.ndarray, config: HogConfig) -> PatchGrid:
    gx, gy = gradients(gray)
    bins = orientation_bins(gx, gy, config)
    rows, cols = bins.shape
    k = config.window_side
    if k > min(rows, cols):
        raise ValueError(f"window {k} larger than image {rows}x{cols}")
    onehot = np.zeros((rows + 1, cols + 1, config.bin_count))
    onehot[1:, 1:][np.arange(rows)[:, None], np.arange(cols)[None, :], bins] = 1.0
    integral = onehot.cumsum(axis=0).cumsum(axis=1)
    r0 = window_starts(rows, k, config.stride)
    c0 = window_starts(cols, k, config.stride)
    r1, c1 = r0 + k, c0 + k
    hist = (integral[r1[:, None], c1[None, :]] - integral[r0[:, None], c1[None, :]]
            - integral[r1[:, None], c0[None, :]] + integral[r0[:, None], c0[None, :]])
    # integral sums of 0/1 values are exact in float64
    return PatchGrid(np.rint(hist).reshape(-1, config.bin_count), len(r0), len(c0))


def image_descriptors(image: CandleImage, config: HogConfig) -> PatchGrid:
    return extract_patch_grid(to_grayscale(image), config)


_CACHE_HEADER = struct.Struct("<qqqqq")


def descriptors_to_bytes(grid: PatchGrid, image_shape: tuple[int, int], config: HogConfig) -> bytes:
    rows, cols = image_shape
    head = _CACHE_HEADER.pack(rows, cols, config.bin_count, config.window_side, config.stride)
    return head + np.ascontiguousarray(grid.descriptors, dtype="<f8").tobytes()


def descriptors_from_bytes(data: bytes) -> tuple[PatchGrid, tuple[int, int], HogConfig]:
    rows, cols, k, side, stride = _CACHE_HEADER.unpack_from(data)
    config = HogConfig(window_side=side, stride=stride, bin_count=k)
    desc = np.frombuffer(data, dtype="<f8", offset=_CACHE_HEADER.size).reshape(-1, k).copy()
    n_rows, n_cols = window_count(rows, side, stride), window_count(cols, side, stride)
    if desc.shape[0] != n_rows * n_cols:
        raise ValueError("descriptor cache length does not match its header")
    return PatchGrid(desc, n_rows, n_cols), (rows, cols), config


def feature_count(shape: tuple[int, int], config: HogConfig) -> int:
    rows, cols = shape
    return (window_count(rows, config.window_side, config.stride)
            * window_count(cols, config.window_side, config.stride))


__all__ = [
    "HogConfig", "PatchGrid", "to_grayscale", "gradients", "orientation_angles",
    "orientation_bins", "window_count", "window_starts", "extract_patch_grid",
    "image_descriptors", "descriptors_to_bytes", "descriptors_from_bytes", "feature_count",
]

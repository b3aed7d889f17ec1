"""Two-stage deep fuzzy SOM over multi-scale HOG patch grids.

Each parallel layer owns one FSOM trained on the pooled patch descriptors of
its scale. An image is encoded by replacing every patch with the (normalised)
flat index of its BMU, concatenating the layers, zero-padding to a perfect
square, and clustering that vector with the output FSOM.
"""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chart import CandleImage
from .fsom import DEFAULT_EPSILON, DEFAULT_MAX_ITER, FsomGrid, init_grid
from .hog import HogConfig, feature_count, image_descriptors

log = logging.getLogger(__name__)

DEFAULT_LAYERS = (HogConfig(window_side=3, stride=1), HogConfig(window_side=6, stride=2))
DEFAULT_LAYER_GRID = (15, 15)
DEFAULT_OUTPUT_GRID = (8, 8)
FORMAT_VERSION = 1


class NotFittedError(RuntimeError):
    pass


@dataclass
class FeatureMap:
    bmu_codes: np.ndarray
    layer: int


@dataclass
class CombinedFeatureMap:
    values: np.ndarray
    original_length: int
    side: int

    @property
    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.side, self.side)


def padded_length(n: int) -> int:
    """Smallest perfect square >= n."""
    side = math.isqrt(n)
    if side * side < n:
        side += 1
    return side * side


@dataclass
class DfsomModel:
    layer_configs: list[HogConfig]
    layer_fsoms: list[FsomGrid | None]
    output_fsom: FsomGrid | None = None
    image_shape: tuple[int, int] = (100, 10)

    @property
    def n_layers(self) -> int:
        return len(self.layer_configs)

    def layer_lengths(self) -> list[int]:
        return [feature_count(self.image_shape, c) for c in self.layer_configs]

    @property
    def combined_length(self) -> int:
        return padded_length(sum(self.layer_lengths()))

    def to_bytes(self) -> bytes:
        if self.output_fsom is None or any(f is None for f in self.layer_fsoms):
            raise NotFittedError("cannot serialise an untrained model")
        buf = io.BytesIO()
        buf.write(struct.pack("<Bqqq", FORMAT_VERSION, *self.image_shape, self.n_layers))
        for cfg, grid in zip(self.layer_configs, self.layer_fsoms):
            blob = grid.to_bytes()
            buf.write(struct.pack("<qqqq", cfg.window_side, cfg.stride, cfg.bin_count, len(blob)))
            buf.write(blob)
        blob = self.output_fsom.to_bytes()
        buf.write(struct.pack("<q", len(blob)))
        buf.write(blob)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DfsomModel":
        buf = io.BytesIO(data)

        def read(fmt):
            s = struct.Struct(fmt)
            return s.unpack(buf.read(s.size))

        version, rows, cols, n_layers = read("<Bqqq")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        configs, grids = [], []
        for _ in range(n_layers):
            side, stride, bins, size = read("<qqqq")
            configs.append(HogConfig(window_side=side, stride=stride, bin_count=bins))
            grids.append(FsomGrid.from_bytes(buf.read(size)))
        (size,) = read("<q")
        return cls(configs, grids, FsomGrid.from_bytes(buf.read(size)), (rows, cols))


def _encode_codes(grid: FsomGrid, descriptors: np.ndarray) -> np.ndarray:
    k = grid.n_neurons
    idx = grid.bmu_indices(descriptors)
    return idx / (k - 1) if k > 1 else np.zeros(len(idx))


def parallel_layer(model: DfsomModel, image: CandleImage, layer: int) -> FeatureMap:
    grid = model.layer_fsoms[layer]
    if grid is None:
        raise NotFittedError(f"layer {layer} FSOM is not trained")
    desc = image_descriptors(image, model.layer_configs[layer]).descriptors
    return FeatureMap(_encode_codes(grid, desc), layer)


def combined_sampling(maps: Sequence[FeatureMap]) -> CombinedFeatureMap:
    if not maps:
        raise ValueError("no feature maps to combine")
    values = np.concatenate([m.bmu_codes for m in maps])
    n = len(values)
    padded = np.zeros(padded_length(n))
    padded[:n] = values
    return CombinedFeatureMap(padded, n, math.isqrt(len(padded)))


def encode_image(model: DfsomModel, image: CandleImage) -> CombinedFeatureMap:
    return combined_sampling([parallel_layer(model, image, i) for i in range(model.n_layers)])


def _layer_descriptors(images: Sequence[CandleImage], config: HogConfig) -> np.ndarray:
    """(n_images, n_patches, bins) descriptor stack."""
    return np.stack([image_descriptors(img, config).descriptors for img in images])


def _encode_batch(model: DfsomModel, per_layer: list[np.ndarray]) -> np.ndarray:
    n_images = per_layer[0].shape[0]
    codes = []
    for grid, desc in zip(model.layer_fsoms, per_layer):
        flat = desc.reshape(-1, desc.shape[-1])
        codes.append(_encode_codes(grid, flat).reshape(n_images, -1))
    values = np.concatenate(codes, axis=1)
    out = np.zeros((n_images, padded_length(values.shape[1])))
    out[:, :values.shape[1]] = values
    return out


def encode_images(model: DfsomModel, images: Sequence[CandleImage]) -> np.ndarray:
    """Combined feature maps for many images, one row per image."""
    for i, g in enumerate(model.layer_fsoms):
        if g is None:
            raise NotFittedError(f"layer {i} FSOM is not trained")
    return _encode_batch(model, [_layer_descriptors(images, c) for c in model.layer_configs])


def train(
    images: Sequence[CandleImage],
    layer_configs: Sequence[HogConfig] = DEFAULT_LAYERS,
    layer_grid: tuple[int, int] = DEFAULT_LAYER_GRID,
    output_grid: tuple[int, int] = DEFAULT_OUTPUT_GRID,
    epsilon: float = DEFAULT_EPSILON,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
) -> DfsomModel:
    """Fit every layer FSOM on its pooled patches, then the output FSOM on the encoded images.

    Layer ``i`` is seeded with ``seed + i`` and the output FSOM with
    ``seed + len(layer_configs)``.
    """
    if not images:
        raise ValueError("no training images")
    if not layer_configs:
        raise ValueError("at least one parallel layer is required")
    shape = images[0].shape
    model = DfsomModel(list(layer_configs), [None] * len(layer_configs), None, shape)
    per_layer = []
    for i, cfg in enumerate(model.layer_configs):
        desc = _layer_descriptors(images, cfg)
        per_layer.append(desc)
        flat = desc.reshape(-1, cfg.bin_count)
        # many patches share a histogram; fitting on unique rows with counts is the same update
        uniq, counts = np.unique(flat, axis=0, return_counts=True)
        log.info("layer %d (%dx%d/%d): %d patches, %d distinct", i, cfg.window_side,
                 cfg.window_side, cfg.stride, len(flat), len(uniq))
        grid = init_grid(*layer_grid, cfg.bin_count, seed=seed + i, data=uniq, epsilon=epsilon)
        model.layer_fsoms[i] = grid.fit(uniq, max_iter=max_iter, sample_weight=counts)
    combined = _encode_batch(model, per_layer)
    out = init_grid(*output_grid, combined.shape[1], seed=seed + len(layer_configs),
                    data=combined, epsilon=epsilon)
    model.output_fsom = out.fit(combined, max_iter=max_iter)
    return model


def assign_cluster(model: DfsomModel, image: CandleImage) -> int:
    if model.output_fsom is None:
        raise NotFittedError("output FSOM is not trained")
    return int(model.output_fsom.bmu_indices(encode_image(model, image).values)[0])


def assign_clusters(model: DfsomModel, images: Sequence[CandleImage]) -> np.ndarray:
    if model.output_fsom is None:
        raise NotFittedError("output FSOM is not trained")
    if not images:
        return np.zeros(0, dtype=np.int64)
    return model.output_fsom.bmu_indices(encode_images(model, images))

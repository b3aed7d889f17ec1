"""Batch fuzzy self-organizing map.

Every sample belongs to every neuron with an inverse-squared-distance
membership; each sweep moves every neuron to the membership-weighted mean of
the samples. There is no lattice neighbourhood kernel: the grid shape only
gives BMU coordinates their meaning.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-4
DEFAULT_MAX_ITER = 500

# bounds the (chunk, K, dim) difference tensor
_CHUNK_ELEMS = 1 << 22


class FsomError(ArithmeticError):
    pass


class MembershipRow(NamedTuple):
    memberships: np.ndarray
    distances: np.ndarray


def squared_distances(samples: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """(M, K) matrix of squared Euclidean distances, computed from explicit differences."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    m, dim = samples.shape
    k = weights.shape[0]
    out = np.empty((m, k))
    step = max(1, _CHUNK_ELEMS // max(1, k * dim))
    for start in range(0, m, step):
        diff = samples[start:start + step, None, :] - weights[None, :, :]
        out[start:start + step] = np.einsum("mkd,mkd->mk", diff, diff)
    return out


def membership_matrix(d2: np.ndarray) -> np.ndarray:
    """Row-normalised inverse squared distances.

    A row with an exact hit (zero distance) becomes crisp: membership 1 on the
    first zero-distance neuron, 0 elsewhere.
    """
    d2 = np.atleast_2d(d2)
    r = np.zeros_like(d2)
    dmin = d2.min(axis=1)
    hit = dmin == 0.0
    if hit.any():
        r[np.flatnonzero(hit), np.argmin(d2[hit], axis=1)] = 1.0
    soft = ~hit
    if soft.any():
        # scale by the row minimum so 1/d^2 cannot overflow
        ratio = dmin[soft, None] / d2[soft]
        r[soft] = ratio / ratio.sum(axis=1, keepdims=True)
    return r


@dataclass
class FsomGrid:
    weights: np.ndarray  # (rows * cols, dim), row-major over the lattice
    rows: int
    cols: int
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0
    iterations: int = 0
    final_delta: float = float("inf")
    delta_history: list[float] = field(default_factory=list, repr=False)

    @property
    def n_neurons(self) -> int:
        return self.rows * self.cols

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def fitted(self) -> bool:
        return self.iterations > 0

    def _check(self, samples) -> np.ndarray:
        x = np.atleast_2d(np.asarray(samples, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"sample dimension {x.shape[1]} != grid dimension {self.dim}")
        return x

    def memberships(self, sample) -> MembershipRow:
        x = self._check(sample)
        if x.shape[0] != 1:
            raise ValueError("memberships() takes a single sample; use membership_matrix for batches")
        d2 = squared_distances(x, self.weights)
        return MembershipRow(membership_matrix(d2)[0], np.sqrt(d2[0]))

    def batch_update(self, samples, sample_weight=None) -> float:
        """One sweep over all samples; returns the largest absolute weight change.

        ``sample_weight`` gives integer-like multiplicities so duplicated samples
        can be passed once.
        """
        x = self._check(samples)
        if x.shape[0] == 0:
            raise ValueError("batch_update needs at least one sample")
        r = membership_matrix(squared_distances(x, self.weights))
        if sample_weight is not None:
            r = r * np.asarray(sample_weight, dtype=float)[:, None]
        mass = r.sum(axis=0)
        pull = r.T @ x - mass[:, None] * self.weights
        step = np.zeros_like(self.weights)
        live = mass > 0
        step[live] = pull[live] / mass[live, None]
        new = self.weights + step
        delta = float(np.max(np.abs(new - self.weights)))
        self.weights = new
        return delta

    def fit(self, samples, max_iter: int = DEFAULT_MAX_ITER, sample_weight=None) -> "FsomGrid":
        """Repeat batch updates until the largest change drops below epsilon or max_iter is hit."""
        x = self._check(samples)
        if x.shape[0] == 0:
            raise ValueError("fit needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise FsomError("non-finite values in training samples")
        for _ in range(max_iter):
            delta = self.batch_update(x, sample_weight)
            self.iterations += 1
            self.final_delta = delta
            self.delta_history.append(delta)
            if not np.isfinite(delta) or not np.all(np.isfinite(self.weights)):
                raise FsomError(f"non-finite weights after iteration {self.iterations}; check input scaling")
            if delta < self.epsilon:
                break
        else:
            log.info("FSOM %dx%d hit max_iter=%d (delta %.3g)", self.rows, self.cols, max_iter, self.final_delta)
        log.info("FSOM %dx%d fitted: %d iterations, final delta %.3g",
                 self.rows, self.cols, self.iterations, self.final_delta)
        return self

    def bmu_indices(self, samples) -> np.ndarray:
        """Flat row-major BMU index per sample; ties go to the smallest index."""
        return np.argmin(squared_distances(self._check(samples), self.weights), axis=1)

    def bmu(self, sample) -> tuple[int, int]:
        flat = int(self.bmu_indices(sample)[0])
        return divmod(flat, self.cols)

    _HEADER = struct.Struct("<qqqdqq")

    def to_bytes(self) -> bytes:
        head = self._HEADER.pack(self.rows, self.cols, self.dim, self.epsilon, self.seed, self.iterations)
        return head + np.ascontiguousarray(self.weights, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FsomGrid":
        rows, cols, dim, eps, seed, iters = cls._HEADER.unpack_from(data)
        n = rows * cols * dim
        w = np.frombuffer(data, dtype="<f8", count=n, offset=cls._HEADER.size).reshape(rows * cols, dim)
        return cls(w.copy(), rows, cols, epsilon=eps, seed=seed, iterations=iters)

    @classmethod
    def byte_size(cls, rows: int, cols: int, dim: int) -> int:
        return cls._HEADER.size + 8 * rows * cols * dim


def init_grid(rows: int, cols: int, dim: int, seed: int = 0, data=None,
              epsilon: float = DEFAULT_EPSILON) -> FsomGrid:
    """Uniform random weights over the per-component data range, or [0, 1) without data."""
    if rows < 1 or cols < 1 or dim < 1:
        raise ValueError("rows, cols and dim must be positive")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    if data is None:
        lo, hi = np.zeros(dim), np.ones(dim)
    else:
        data = np.atleast_2d(np.asarray(data, dtype=float))
        if data.shape[1] != dim:
            raise ValueError(f"data dimension {data.shape[1]} != {dim}")
        lo, hi = data.min(axis=0), data.max(axis=0)
    weights = lo + (hi - lo) * rng.random((rows * cols, dim))
    return FsomGrid(weights, rows, cols, epsilon=epsilon, seed=seed)

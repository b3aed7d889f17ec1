"""Per-cluster GRU regressors trained with full-batch gradient descent.

Cell recurrence (Cho et al. form)::

    z  = sigmoid(Wz x + Uz h + bz)
    r  = sigmoid(Wr x + Ur h + br)
    hc = tanh(Wh x + Uh (r * h) + bh)
    h' = (1 - z) * h + z * hc

A scalar linear readout ``v . h_T + c`` of the final state gives the prediction;
the loss is the mean squared error over a cluster's windows.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CELL_PARAMS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")
PARAMS = CELL_PARAMS + ("v", "c")
FALLBACK_ID = -1


class GruDivergenceError(FloatingPointError):
    def __init__(self, cluster: int, epoch: int):
        self.cluster = cluster
        self.epoch = epoch
        label = "fallback model" if cluster == FALLBACK_ID else f"cluster {cluster}"
        super().__init__(f"training diverged for {label} at epoch {epoch} (non-finite loss)")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GruCell:
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wh: np.ndarray
    Uh: np.ndarray
    bh: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.Wz.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.Wz.shape[0]

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruCell":
        h, i = hidden_dim, input_dim
        return cls(*(np.zeros(s) for s in [(h, i), (h, h), h] * 3))

    @classmethod
    def random(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "GruCell":
        bound = 1.0 / np.sqrt(hidden_dim)
        h, i = hidden_dim, input_dim
        return cls(*(rng.uniform(-bound, bound, s) for s in [(h, i), (h, h), h] * 3))


def gru_step(cell: GruCell, x, h) -> np.ndarray:
    """One recurrence step. ``x`` is (input_dim,) or (batch, input_dim); ``h`` likewise."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    if x.shape[-1] != cell.input_dim or h.shape[-1] != cell.hidden_dim:
        raise ValueError("input or state dimension does not match the cell")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(h))):
        raise ValueError("non-finite input to gru_step")
    z = sigmoid(x @ cell.Wz.T + h @ cell.Uz.T + cell.bz)
    r = sigmoid(x @ cell.Wr.T + h @ cell.Ur.T + cell.br)
    hc = np.tanh(x @ cell.Wh.T + (r * h) @ cell.Uh.T + cell.bh)
    return (1.0 - z) * h + z * hc


@dataclass
class GruRegressor:
    cell: GruCell
    v: np.ndarray
    c: float = 0.0
    losses: list[float] = field(default_factory=list)
    n_samples: int = 0

    def params(self) -> dict[str, np.ndarray]:
        p = {name: getattr(self.cell, name) for name in CELL_PARAMS}
        p["v"] = self.v
        p["c"] = np.array([self.c])
        return p

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        for name in CELL_PARAMS:
            setattr(self.cell, name, p[name])
        self.v = p["v"]
        self.c = float(np.asarray(p["c"]).reshape(-1)[0])

    def _forward(self, xs: np.ndarray):
        """xs is (batch, T, input_dim). Returns predictions and per-step caches."""
        cell = self.cell
        batch, steps, _ = xs.shape
        h = np.zeros((batch, cell.hidden_dim))
        cache = []
        for t in range(steps):
            x = xs[:, t, :]
            z = sigmoid(x @ cell.Wz.T + h @ cell.Uz.T + cell.bz)
            r = sigmoid(x @ cell.Wr.T + h @ cell.Ur.T + cell.br)
            hc = np.tanh(x @ cell.Wh.T + (r * h) @ cell.Uh.T + cell.bh)
            h_new = (1.0 - z) * h + z * hc
            cache.append((x, h, z, r, hc))
            h = h_new
        return h @ self.v + self.c, h, cache

    def loss_and_grads(self, xs: np.ndarray, ys: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error and its exact gradient via backpropagation through time."""
        cell = self.cell
        pred, h_last, cache = self._forward(xs)
        err = pred - ys
        n = len(ys)
        with np.errstate(over="ignore"):  # divergence is reported by the caller
            loss = float(np.mean(err ** 2))
        dpred = 2.0 * err / n
        g = {name: np.zeros_like(getattr(cell, name)) for name in CELL_PARAMS}
        g["v"] = h_last.T @ dpred
        g["c"] = np.array([dpred.sum()])
        dh = np.outer(dpred, self.v)
        for x, h, z, r, hc in reversed(cache):
            dz = dh * (hc - h)
            dhc = dh * z
            dh_prev = dh * (1.0 - z)
            dah = dhc * (1.0 - hc ** 2)
            g["Wh"] += dah.T @ x
            g["Uh"] += dah.T @ (r * h)
            g["bh"] += dah.sum(axis=0)
            drh = dah @ cell.Uh
            dr = drh * h
            dh_prev += drh * r
            daz = dz * z * (1.0 - z)
            g["Wz"] += daz.T @ x
            g["Uz"] += daz.T @ h
            g["bz"] += daz.sum(axis=0)
            dh_prev += daz @ cell.Uz
            dar = dr * r * (1.0 - r)
            g["Wr"] += dar.T @ x
            g["Ur"] += dar.T @ h
            g["br"] += dar.sum(axis=0)
            dh_prev += dar @ cell.Ur
            dh = dh_prev
        return loss, g

    def predict(self, sequence) -> float:
        return float(self.predict_batch(np.asarray(sequence, dtype=float)[None])[0])

    def predict_batch(self, sequences) -> np.ndarray:
        xs = _as_batch(sequences, self.cell.input_dim)
        return self._forward(xs)[0]


def _as_batch(sequences, input_dim: int) -> np.ndarray:
    xs = np.asarray(sequences, dtype=float)
    if xs.ndim == 2 and input_dim == 1:
        xs = xs[:, :, None]
    if xs.ndim != 3 or xs.shape[2] != input_dim:
        raise ValueError(f"expected (batch, steps, {input_dim}) sequences, got {xs.shape}")
    return xs


def fit_regressor(xs, ys, hidden_dim: int, epochs: int, learning_rate: float,
                  rng: np.random.Generator, cluster: int = FALLBACK_ID) -> GruRegressor:
    """Plain gradient descent from a random start; the readout bias starts at the target mean."""
    ys = np.asarray(ys, dtype=float)
    input_dim = 1 if np.asarray(xs).ndim == 2 else np.asarray(xs).shape[2]
    xs = _as_batch(xs, input_dim)
    cell = GruCell.random(input_dim, hidden_dim, rng)
    bound = 1.0 / np.sqrt(hidden_dim)
    model = GruRegressor(cell, rng.uniform(-bound, bound, hidden_dim), float(ys.mean()), n_samples=len(ys))
    for epoch in range(epochs):
        loss, grads = model.loss_and_grads(xs, ys)
        if not np.isfinite(loss):
            raise GruDivergenceError(cluster, epoch)
        model.losses.append(loss)
        params = model.params()
        model.set_params({k: params[k] - learning_rate * grads[k] for k in PARAMS})
    final = model.loss_and_grads(xs, ys)[0]
    if not np.isfinite(final):
        raise GruDivergenceError(cluster, epochs)
    model.losses.append(final)
    return model


@dataclass
class ClusterModelSet:
    models: dict[int, GruRegressor]
    fallback: GruRegressor | None

    def model_for(self, cluster: int) -> GruRegressor:
        model = self.models.get(int(cluster), self.fallback)
        if model is None:
            raise KeyError(f"no model for cluster {cluster} and no fallback")
        return model

    def predict(self, cluster: int, sequence) -> float:
        return self.model_for(cluster).predict(sequence)

    def predict_many(self, clusters: Sequence[int], sequences) -> np.ndarray:
        sequences = np.asarray(sequences, dtype=float)
        out = np.empty(len(clusters))
        for cid in sorted(set(int(c) for c in clusters)):
            mask = np.asarray(clusters) == cid
            out[mask] = self.model_for(cid).predict_batch(sequences[mask])
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        entries = sorted(self.models.items())
        if self.fallback is not None:
            entries.append((FALLBACK_ID, self.fallback))
        buf.write(struct.pack("<q", len(entries)))
        for cid, m in entries:
            buf.write(struct.pack("<qqqq", cid, m.cell.input_dim, m.cell.hidden_dim, m.n_samples))
            p = m.params()
            buf.write(np.concatenate([np.ravel(p[k]) for k in PARAMS]).astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClusterModelSet":
        buf = io.BytesIO(data)
        (count,) = struct.unpack("<q", buf.read(8))
        models, fallback = {}, None
        for _ in range(count):
            cid, i, h, n = struct.unpack("<qqqq", buf.read(32))
            shapes = [(h, i), (h, h), (h,)] * 3 + [(h,), (1,)]
            size = sum(int(np.prod(s)) for s in shapes)
            flat = np.frombuffer(buf.read(8 * size), dtype="<f8")
            arrays, pos = {}, 0
            for name, s in zip(PARAMS, shapes):
                k = int(np.prod(s))
                arrays[name] = flat[pos:pos + k].reshape(s).copy()
                pos += k
            m = GruRegressor(GruCell.zeros(i, h), arrays["v"], n_samples=n)
            m.set_params(arrays)
            if cid == FALLBACK_ID:
                fallback = m
            else:
                models[cid] = m
        return cls(models, fallback)

    def write_loss_csv(self, path_or_buf) -> None:
        own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.writer(fh)
            w.writerow(["cluster", "epoch", "loss"])
            entries = sorted(self.models.items())
            if self.fallback is not None:
                entries.append((FALLBACK_ID, self.fallback))
            for cid, m in entries:
                for epoch, loss in enumerate(m.losses):
                    w.writerow([cid, epoch, repr(loss)])
        finally:
            if own:
                fh.close()


def train_models(
    windows: Iterable[tuple[int, Sequence[float], float]],
    epochs: int = 200,
    learning_rate: float = 1e-2,
    seed: int = 0,
    hidden_dim: int = 16,
    min_samples: int = 20,
) -> ClusterModelSet:
    """One regressor per cluster with at least ``min_samples`` windows, plus a pooled fallback."""
    windows = list(windows)
    if not windows:
        raise ValueError("no training windows")
    clusters = np.array([int(w[0]) for w in windows])
    xs = np.array([np.asarray(w[1], dtype=float) for w in windows])
    ys = np.array([float(w[2]) for w in windows])

    def rng_for(cid: int) -> np.random.Generator:
        # ids are shifted so the fallback (-1) maps to 0
        return np.random.default_rng([seed, cid + 1])

    fallback = fit_regressor(xs, ys, hidden_dim, epochs, learning_rate, rng_for(FALLBACK_ID))
    models = {}
    for cid in np.unique(clusters):
        mask = clusters == cid
        if mask.sum() < min_samples:
            continue
        models[int(cid)] = fit_regressor(xs[mask], ys[mask], hidden_dim, epochs, learning_rate,
                                         rng_for(int(cid)), cluster=int(cid))
    log.info("GRU: %d dedicated models, %d windows; fallback loss %.4g",
             len(models), len(windows), fallback.losses[-1])
    return ClusterModelSet(models, fallback)

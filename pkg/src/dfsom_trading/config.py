"""Pipeline configuration. An empty config file reproduces the default experiment setup."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .hog import HogConfig
from .trading import FOREX_FEE, FUTURES_FEE

MARKET_DEFAULTS = {
    "futures": {"period": 30, "fee_rate": FUTURES_FEE},
    "forex": {"period": 60, "fee_rate": FOREX_FEE},
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: Optional[str] = None
    delimiter: str = ","
    has_header: bool = False
    time_format: str = "%Y-%m-%dT%H:%M"
    instrument: str = "instrument"


@dataclass
class ImageConfig:
    rows: int = 100
    bars: int = 10


@dataclass
class FsomConfig:
    layer_grid: tuple[int, int] = (15, 15)
    output_grid: tuple[int, int] = (8, 8)
    epsilon: float = 1e-4
    max_iter: int = 500


@dataclass
class GruConfig:
    hidden_dim: int = 16
    epochs: int = 200
    learning_rate: float = 1e-2
    min_samples: int = 20


@dataclass
class TradingConfig:
    rate: float = 0.001
    fee_rate: Optional[float] = None  # None: market default


@dataclass
class ScheduleConfig:
    train_days: float = 105
    test_days: float = 14
    count: int = 6


@dataclass
class PipelineConfig:
    market: str = "futures"
    period: Optional[int] = None  # None: market default
    data: DataConfig = field(default_factory=DataConfig)
    image: ImageConfig = field(default_factory=ImageConfig)
    layers: list[HogConfig] = field(
        default_factory=lambda: [HogConfig(3, 1, 9), HogConfig(6, 2, 9)])
    fsom: FsomConfig = field(default_factory=FsomConfig)
    gru: GruConfig = field(default_factory=GruConfig)
    trading: TradingConfig = field(default_factory=TradingConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    seed: int = 0
    output_dir: str = "run_output"
    cache_dir: Optional[str] = None
    png: bool = False

    @property
    def aggregation_period(self) -> int:
        return self.period if self.period is not None else MARKET_DEFAULTS[self.market]["period"]

    @property
    def fee_rate(self) -> float:
        fee = self.trading.fee_rate
        return fee if fee is not None else MARKET_DEFAULTS[self.market]["fee_rate"]

    def validate(self) -> "PipelineConfig":
        if self.market not in MARKET_DEFAULTS:
            raise ConfigError(f"market must be one of {sorted(MARKET_DEFAULTS)}, got {self.market!r}")
        if self.aggregation_period <= 0:
            raise ConfigError("period must be positive")
        if self.image.rows < 2 or self.image.bars < 3:
            raise ConfigError("image must have at least 2 rows and 3 bars")
        if not self.layers:
            raise ConfigError("at least one HOG layer is required")
        for layer in self.layers:
            if layer.window_side > min(self.image.rows, self.image.bars):
                raise ConfigError(f"HOG window {layer.window_side} does not fit the image")
        if self.fsom.epsilon <= 0 or self.fsom.max_iter < 1:
            raise ConfigError("fsom.epsilon must be > 0 and fsom.max_iter >= 1")
        if min(*self.fsom.layer_grid, *self.fsom.output_grid) < 1:
            raise ConfigError("grid extents must be positive")
        if self.gru.hidden_dim < 1 or self.gru.epochs < 0 or self.gru.learning_rate <= 0:
            raise ConfigError("invalid GRU hyperparameters")
        if self.trading.rate < 0 or self.fee_rate < 0:
            raise ConfigError("rates must be non-negative")
        if self.schedule.train_days <= 0 or self.schedule.test_days <= 0 or self.schedule.count < 0:
            raise ConfigError("invalid schedule spans")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {}
    for name, raw in values.items():
        default = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), raw or {}, path)
        elif name == "layers":
            try:
                kwargs[name] = [HogConfig(**layer) for layer in raw]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad layers entry: {exc}") from None
        elif isinstance(default, tuple):
            if not isinstance(raw, (list, tuple)) or len(raw) != 2:
                raise ConfigError(f"{path} must be a pair")
            kwargs[name] = (int(raw[0]), int(raw[1]))
        else:
            kwargs[name] = raw
    return cls(**kwargs)


def config_from_dict(values: dict[str, Any] | None) -> PipelineConfig:
    try:
        return _build(PipelineConfig, values or {}, "").validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def set_override(values: dict, dotted: str, raw: str) -> None:
    """Apply ``a.b.c=value`` (value parsed as YAML) onto a nested dict."""
    keys = dotted.split(".")
    node = values
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a section")
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            values = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"bad config syntax: {exc}") from None
    for key, raw in (overrides or {}).items():
        set_override(values, key, raw)
    return config_from_dict(values)

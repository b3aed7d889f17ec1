"""Candlestick-image clustering with a deep fuzzy SOM, per-cluster GRU forecasts and a threshold backtest."""

from .config import PipelineConfig, load_config
from .market_data import BarSeries, DataError, MinuteBar, aggregate, parse_minute_bars
from .pipeline import PipelineError, emit_report, run_pipeline

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "load_config", "BarSeries", "DataError", "MinuteBar", "aggregate",
           "parse_minute_bars", "PipelineError", "emit_report", "run_pipeline"]

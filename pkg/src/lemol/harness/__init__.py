"""Configuration, orchestration, aggregation, plotting and the command line."""

from .aggregate import AggregateCurve, AggregationError, aggregate_arrays, aggregate_runs, sliding_mean
from .config import ConfigError, ExperimentConfig, desk_config, load_config, full_config, parse_config, render_config
from .orchestrate import Orchestrator, OverwriteError, PhaseError, orchestrate

__all__ = [
    "AggregateCurve",
    "AggregationError",
    "ConfigError",
    "ExperimentConfig",
    "Orchestrator",
    "OverwriteError",
    "PhaseError",
    "aggregate_arrays",
    "aggregate_runs",
    "desk_config",
    "load_config",
    "orchestrate",
    "full_config",
    "parse_config",
    "render_config",
    "sliding_mean",
]

"""Experiment configs, runs, grids, report tables and the command line."""

from contrastlab.expcli.config import ConfigError, DatasetSpec, ExperimentSpec, GridConfig, parse_config
from contrastlab.expcli.reports import emit_perfinding_matrix, emit_scaling_curve_data, emit_summary
from contrastlab.expcli.runner import (
    SUMMARY_HEADER,
    ExperimentError,
    RunManifest,
    run_experiment,
    run_grid,
    verify_outputs,
)

__all__ = [
    "ConfigError", "DatasetSpec", "ExperimentSpec", "GridConfig", "parse_config",
    "emit_perfinding_matrix", "emit_scaling_curve_data", "emit_summary",
    "SUMMARY_HEADER", "ExperimentError", "RunManifest", "run_experiment", "run_grid", "verify_outputs",
]

"""Experiment orchestration: configs, the pruning pipeline, reports and the CLI."""
from .config import ConfigError, ExperimentConfig, ReferenceConfig, config_from_dict, load_config
from .pipeline import Pipeline, derive_seed, run_pipeline
from .report import RunReport, aggregate, compare_runs

__all__ = ["ConfigError", "ExperimentConfig", "Pipeline", "ReferenceConfig", "RunReport", "aggregate",
           "compare_runs", "config_from_dict", "derive_seed", "load_config", "run_pipeline"]

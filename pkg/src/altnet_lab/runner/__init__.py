"""Experiment orchestration: configs, training loops, outputs and the CLI."""
from .config import ExperimentConfig, config_from_dict, config_hash, load_config, validate_config
from .experiment import RunRecord, recompute_run, run_experiment, summarize_directory
from .loop import evaluate_policy, run_seed

__all__ = [
    "ExperimentConfig",
    "RunRecord",
    "config_from_dict",
    "config_hash",
    "evaluate_policy",
    "load_config",
    "recompute_run",
    "run_experiment",
    "run_seed",
    "summarize_directory",
    "validate_config",
]

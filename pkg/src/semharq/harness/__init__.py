"""Configuration, staged training, evaluation and the command line."""
from .config import ExperimentConfig, load_config, parse_config
from .evaluate import MetricsRecord, evaluate, retrieval_metrics, sweep_threshold
from .pipeline import Pipeline, build_dataset
from .train import Trainer, calibrate_threshold

__all__ = [
    "ExperimentConfig", "MetricsRecord", "Pipeline", "Trainer", "build_dataset", "calibrate_threshold",
    "evaluate", "load_config", "parse_config", "retrieval_metrics", "sweep_threshold",
]

"""Command-line experiment harness: configuration, runs, pirate evaluation and reports."""

from .config import ExperimentConfig, load_config, parse_config

__all__ = ["ExperimentConfig", "load_config", "parse_config"]

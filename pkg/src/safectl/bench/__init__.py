"""Experiment harness: configs, seeded runs, reports and property suites."""
from ..episode import EpisodeLog
from .config import ExperimentConfig, PRESETS, load_config, preset, validate
from .experiments import run
from .report import MetricsReport, SeedRow, aggregate, emit, load_report, read_episode_csv
from .verify import VerifySummary, verify

__all__ = ["EpisodeLog", "ExperimentConfig", "MetricsReport", "PRESETS", "SeedRow", "VerifySummary",
           "aggregate", "emit", "load_config", "load_report", "preset", "read_episode_csv", "run",
           "validate", "verify"]

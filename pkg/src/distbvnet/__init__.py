"""Deterministic round-based simulator of a blockchain-secured, SDN/NFV-managed vehicular network."""

from .core import ConfigError, ScenarioConfig, load_config, validate_config
from .engine import RunReport, Simulation, run
from .metrics import MetricsRow, compute_kpis, emit_report

__all__ = [
    "ConfigError",
    "MetricsRow",
    "RunReport",
    "ScenarioConfig",
    "Simulation",
    "compute_kpis",
    "emit_report",
    "load_config",
    "run",
    "validate_config",
]
__version__ = "0.1.0"

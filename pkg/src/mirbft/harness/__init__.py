"""Scenario runner, trace checker and metrics."""

from .checker import Report, Verdict, check_trace
from .metrics import Metrics, compute_metrics, emit_metrics
from .scenario import RunResult, Scenario, ScenarioError, load_scenario, run_scenario, trace_digest

__all__ = [
    "Metrics",
    "Report",
    "RunResult",
    "Scenario",
    "ScenarioError",
    "Verdict",
    "check_trace",
    "compute_metrics",
    "emit_metrics",
    "load_scenario",
    "run_scenario",
    "trace_digest",
]

"""Scenario definition, closed-loop orchestration, metrics and the command line."""

from .plan import (FlatnessAbort, PlannedScenario, plan_scenario, planned_from_dict,
                   planned_to_dict, reference_stream)
from .report import error_table, load_log, report, save_log
from .scenario import ScenarioConfig, builtin_path, builtin_scenarios, load_scenario
from .sim import RunLog, RunMetrics, compute_metrics, run_closed_loop

__all__ = [
    "FlatnessAbort", "PlannedScenario", "plan_scenario", "planned_from_dict", "planned_to_dict",
    "reference_stream", "error_table", "load_log", "report", "save_log", "ScenarioConfig",
    "builtin_path", "builtin_scenarios", "load_scenario", "RunLog", "RunMetrics",
    "compute_metrics", "run_closed_loop",
]

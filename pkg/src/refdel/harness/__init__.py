"""Fault injection, scenario runs and the command line."""

from .faults import FAULT_KINDS, FaultError, FaultSpec, build_trainer
from .scenario import (
    Report,
    ScenarioConfig,
    ScenarioError,
    estimate_reexecution_fraction,
    initial_commitment,
    run_scenario,
)

__all__ = [
    "FAULT_KINDS", "FaultError", "FaultSpec", "Report", "ScenarioConfig", "ScenarioError",
    "build_trainer", "estimate_reexecution_fraction", "initial_commitment", "run_scenario",
]

# macfield package
"""
Mean-field analysis toolkit for slotted CSMA backoff: fixed-point equations,
mean-field ODEs, equilibrium stability, limit cycles, an exact finite-N
simulator and throughput optimization.
"""

__version__ = "1.0.0"

from .model import (ClassParams, ConditionReport, IntegrationError, MacFieldError, OccupancyState,
                    ScalingMode, Scenario, ScenarioError, SimulationError, SolverError)

__all__ = [
    "ClassParams",
    "ConditionReport",
    "IntegrationError",
    "MacFieldError",
    "OccupancyState",
    "ScalingMode",
    "Scenario",
    "ScenarioError",
    "SimulationError",
    "SolverError",
]

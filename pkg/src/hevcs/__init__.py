"""Hierarchical ADMM scheduling of EV charging on radial distribution feeders."""

from .admm import AdmmConfig, DidNotConverge, HierarchicalAdmm, run
from .baselines import evaluate_fixed_schedule, power_flow_sweep, run_without_bes, uncontrolled_schedule
from .devices import AggregatorNode, BesUnit, EvbProfile, EvSession
from .grid import Bus, Line, NetworkState, RadialNetwork, build_network, ieee13_modified, read_grid
from .metrics import charging_cost, emit, energy_balance, feeder_peak, loss_table, voltage_report
from .results import Scenario, ScheduleResult
from .scenario import ScenarioConfig, desk_scenario, ieee13_scenario, sample_fleet
from .subproblems import solve_centralized

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "AggregatorNode", "BesUnit", "Bus", "DidNotConverge", "EvSession", "EvbProfile",
    "HierarchicalAdmm", "Line", "NetworkState", "RadialNetwork", "Scenario", "ScenarioConfig",
    "ScheduleResult", "build_network", "charging_cost", "desk_scenario", "emit", "energy_balance",
    "evaluate_fixed_schedule", "feeder_peak", "ieee13_modified", "ieee13_scenario", "loss_table",
    "power_flow_sweep", "read_grid", "run", "run_without_bes", "sample_fleet", "solve_centralized",
    "uncontrolled_schedule", "voltage_report",
]

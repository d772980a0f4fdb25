"""Truck platooning co-simulation: reference traffic simulator, tactical and
operational platoon control, authority transitions and a socket bridge."""

from .core import ControlMode, PlatoonState, Snapshot, TruckParameters, VehicleKind, VehicleState
from .kpi import KpiReport, compute_kpis
from .runner import RunAborted, TrajectoryRecord, run
from .scenario import ScenarioSpec, build_simulator, load_scenario

__version__ = "0.1.0"

__all__ = ["ControlMode", "PlatoonState", "Snapshot", "TruckParameters", "VehicleKind",
           "VehicleState", "KpiReport", "compute_kpis", "RunAborted", "TrajectoryRecord", "run",
           "ScenarioSpec", "build_simulator", "load_scenario"]

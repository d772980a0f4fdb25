"""Low-level longitudinal control.

Constant-time-gap ACC: the tactical time gap becomes a desired clearance
``d0 + T*v``, a virtual sensor measures the actual clearance and the
leader's speed, and a linear law on spacing error and relative speed gives
an acceleration that is saturated to the truck's envelope. Without a leader
in sensor range the controller tracks the target speed instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .core import (
    CommandRecord,
    ControlMode,
    Snapshot,
    TruckParameters,
    gap,
    nearest_ahead,
)
from .tactical import TacticalDecision


class ControlModeError(RuntimeError):
    """Raised when the operational layer is asked to drive a manual vehicle."""


class ControllerMode(str, Enum):
    GAP_FOLLOWING = "GapFollowing"
    SPEED_TRACKING = "SpeedTracking"


@dataclass(frozen=True)
class ControllerConfig:
    d0_m: float = 5.0
    kp_per_s2: float = 0.2
    kv_per_s: float = 0.7
    k_free_per_s: float = 0.4
    sensor_range_m: float = 150.0
    # leader-acceleration feed-forward; 0 gives plain ACC
    ka: float = 0.0
    # half-width of uniform noise added to the measured gap
    sensor_noise_m: float = 0.0

    def __post_init__(self):
        for name in ("d0_m", "kp_per_s2", "kv_per_s", "k_free_per_s", "sensor_range_m"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.ka < 0 or self.sensor_noise_m < 0:
            raise ValueError("ka and sensor_noise_m must be non-negative")


@dataclass(frozen=True)
class SensorReading:
    ego_speed_mps: float
    measured_gap_m: Optional[float] = None
    leader_speed_mps: Optional[float] = None
    leader_accel_mps2: Optional[float] = None

    def __post_init__(self):
        if self.measured_gap_m is not None and self.measured_gap_m < 0:
            raise ValueError("measured gap must be non-negative")


@dataclass(frozen=True)
class ControlOutput:
    accel_mps2: float
    saturated: bool
    mode: ControllerMode


def desired_spacing(target_time_gap_s: float, ego_speed_mps: float,
                    config: ControllerConfig) -> float:
    if not target_time_gap_s > 0:
        raise ValueError("target time gap must be positive")
    return config.d0_m + target_time_gap_s * ego_speed_mps


def sense(snapshot: Snapshot, ego_id: int, config: ControllerConfig,
          rng: Optional[np.random.Generator] = None) -> SensorReading:
    ego = snapshot.by_id(ego_id)
    leader = nearest_ahead(snapshot.vehicles, ego)
    if leader is None:
        return SensorReading(ego.speed_mps)
    measured = max(gap(leader, ego), 0.0)
    if measured > config.sensor_range_m:
        return SensorReading(ego.speed_mps)
    if config.sensor_noise_m > 0 and rng is not None:
        measured = max(0.0, measured + rng.uniform(-config.sensor_noise_m, config.sensor_noise_m))
    return SensorReading(ego.speed_mps, measured, leader.speed_mps, leader.accel_mps2)


def compute_accel(reading: SensorReading, decision: TacticalDecision,
                  params: TruckParameters, config: ControllerConfig) -> ControlOutput:
    v = reading.ego_speed_mps
    if reading.measured_gap_m is not None and reading.leader_speed_mps is not None:
        spacing_error = reading.measured_gap_m - desired_spacing(decision.target_time_gap_s, v, config)
        raw = config.kp_per_s2 * spacing_error + config.kv_per_s * (reading.leader_speed_mps - v)
        if config.ka and reading.leader_accel_mps2 is not None:
            raw += config.ka * reading.leader_accel_mps2
        mode = ControllerMode.GAP_FOLLOWING
    else:
        raw = config.k_free_per_s * (decision.target_speed_mps - v)
        mode = ControllerMode.SPEED_TRACKING
    lo, hi = params.accel_bounds(v)
    accel = min(max(raw, lo), hi)
    return ControlOutput(accel, accel != raw, mode)


def control_step(snapshot: Snapshot, ego_id: int, decision: TacticalDecision,
                 params: TruckParameters, config: ControllerConfig,
                 rng: Optional[np.random.Generator] = None) -> CommandRecord:
    ego = snapshot.by_id(ego_id)
    if ego.control_mode is not ControlMode.AUTOMATED:
        raise ControlModeError(f"vehicle {ego_id} is under manual control")
    out = compute_accel(sense(snapshot, ego_id, config, rng), decision, params, config)
    return CommandRecord(ego_id, out.accel_mps2, snapshot.t_s)

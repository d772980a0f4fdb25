"""Shared vehicle, truck and platoon vocabulary.

Positions are longitudinal coordinates of the *front* bumper along the
corridor, so the clearance to a leader subtracts exactly one vehicle length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

#: Standard gravity; maneuvers are expressed as fractions of g.
G = 9.80665

#: Speed floor used when converting a clearance into a time gap.
EPS_SPEED = 0.1


class VehicleKind(str, Enum):
    TRUCK = "Truck"
    CAR = "Car"


class ControlMode(str, Enum):
    MANUAL = "Manual"
    AUTOMATED = "Automated"


class PlatoonState(str, Enum):
    STANDALONE = "StandAlone"
    JOINING = "Joining"
    PLATOONING = "Platooning"
    FRONT_SPLIT = "FrontSplit"
    BACK_SPLIT = "BackSplit"
    CUT_IN = "CutIn"


@dataclass(frozen=True, slots=True)
class VehicleState:
    """Kinematic and platoon-membership snapshot of one vehicle.

    This is the record exchanged with every simulator, local or remote.
    """

    id: int
    kind: VehicleKind
    position_m: float
    speed_mps: float
    accel_mps2: float = 0.0
    length_m: float = 18.0
    lane: int = 0
    platoon_id: Optional[int] = None
    platoon_state: PlatoonState = PlatoonState.STANDALONE
    control_mode: ControlMode = ControlMode.MANUAL
    position_in_platoon: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.position_m) and math.isfinite(self.speed_mps)
                and math.isfinite(self.accel_mps2) and math.isfinite(self.length_m)):
            raise ValueError(f"vehicle {self.id}: non-finite kinematic field")
        if self.speed_mps < 0:
            raise ValueError(f"vehicle {self.id}: negative speed {self.speed_mps}")
        if not self.length_m > 0:
            raise ValueError(f"vehicle {self.id}: length must be positive")
        if (self.platoon_id is None) != (self.position_in_platoon is None):
            raise ValueError(
                f"vehicle {self.id}: platoon_id and position_in_platoon must be set together")

    @property
    def rear_m(self) -> float:
        return self.position_m - self.length_m


@dataclass(frozen=True, slots=True)
class TruckParameters:
    """Static per-brand truck characteristics plus the cached previous speed."""

    brand: str = "reference"
    mass_kg: float = 40000.0
    engine_power_kw: float = 350.0
    max_accel_mps2: float = 1.0
    max_decel_mps2: float = -3.0
    desired_speed_mps: float = 25.0
    previous_speed_mps: float = 0.0

    def __post_init__(self):
        if not self.max_decel_mps2 < 0 < self.max_accel_mps2:
            raise ValueError(
                f"{self.brand}: need max_decel < 0 < max_accel, got "
                f"[{self.max_decel_mps2}, {self.max_accel_mps2}]")
        if not (self.mass_kg > 0 and self.engine_power_kw > 0):
            raise ValueError(f"{self.brand}: mass and engine power must be positive")
        if self.desired_speed_mps < 0:
            raise ValueError(f"{self.brand}: desired speed must be non-negative")

    def accel_bounds(self, speed_mps: Optional[float] = None) -> tuple[float, float]:
        """Acceleration envelope at the given speed.

        The upper bound is additionally limited by engine power, a = P / (m v),
        with the speed floored at 1 m/s. When no speed is passed the cached
        previous speed is used.
        """
        v = self.previous_speed_mps if speed_mps is None else speed_mps
        power_cap = self.engine_power_kw * 1000.0 / (self.mass_kg * max(v, 1.0))
        return self.max_decel_mps2, min(self.max_accel_mps2, power_cap)


@dataclass(frozen=True, slots=True)
class SimClock:
    """Fixed-step clock. Time is kept as an integer step count."""

    step: int
    dt_s: float

    def __post_init__(self):
        if not self.dt_s > 0:
            raise ValueError("dt_s must be positive")
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @property
    def t_s(self) -> float:
        return grid_time(self.step, self.dt_s)

    def advanced(self) -> "SimClock":
        return SimClock(self.step + 1, self.dt_s)


def grid_time(step: int, dt_s: float) -> float:
    # rounding keeps k*dt on the shortest decimal, e.g. 3*0.1 -> 0.3
    return round(step * dt_s, 9)


def to_step(t_s: float, dt_s: float) -> int:
    """Nearest grid index of a time value."""
    return int(round(t_s / dt_s))


@dataclass(frozen=True, slots=True)
class CommandRecord:
    vehicle_id: int
    accel_cmd_mps2: float
    issued_at_s: float

    def __post_init__(self):
        if not math.isfinite(self.accel_cmd_mps2):
            raise ValueError(f"vehicle {self.vehicle_id}: non-finite acceleration command")
        if not math.isfinite(self.issued_at_s):
            raise ValueError("issued_at_s must be finite")


@dataclass(frozen=True, slots=True)
class Snapshot:
    clock: SimClock
    vehicles: tuple[VehicleState, ...] = field(default_factory=tuple)

    @property
    def t_s(self) -> float:
        return self.clock.t_s

    def by_id(self, vehicle_id: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vehicle_id:
                return v
        raise UnknownVehicleError(vehicle_id)


class UnknownVehicleError(KeyError):
    def __init__(self, vehicle_id):
        super().__init__(vehicle_id)
        self.vehicle_id = vehicle_id

    def __str__(self):
        return f"unknown vehicle {self.vehicle_id!r}"


def gap(leader: VehicleState, follower: VehicleState) -> float:
    """Bumper-to-bumper clearance from ``follower`` to ``leader``.

    A non-positive result means the two vehicles overlap (collision).
    """
    if leader.position_m < follower.position_m:
        raise ValueError(
            f"vehicle {leader.id} at {leader.position_m} is behind "
            f"vehicle {follower.id} at {follower.position_m}")
    return leader.position_m - leader.length_m - follower.position_m


def time_gap(leader: VehicleState, follower: VehicleState) -> float:
    return gap(leader, follower) / max(follower.speed_mps, EPS_SPEED)


def sort_lane(vehicles: Iterable[VehicleState]) -> list[VehicleState]:
    """Vehicles ordered front to back; ties broken by id for determinism."""
    return sorted(vehicles, key=lambda v: (-v.position_m, v.id))


def by_lane(vehicles: Iterable[VehicleState]) -> dict[int, list[VehicleState]]:
    lanes: dict[int, list[VehicleState]] = {}
    for v in vehicles:
        lanes.setdefault(v.lane, []).append(v)
    return {lane: sort_lane(vs) for lane, vs in sorted(lanes.items())}


def nearest_ahead(vehicles: Sequence[VehicleState], ego: VehicleState) -> Optional[VehicleState]:
    """Closest same-lane vehicle strictly ahead of ``ego`` (by front bumper)."""
    best = None
    for v in vehicles:
        if v.id == ego.id or v.lane != ego.lane:
            continue
        if v.position_m > ego.position_m or (v.position_m == ego.position_m and v.id < ego.id):
            if best is None or (v.position_m, -v.id) < (best.position_m, -best.id):
                best = v
    return best


def nearest_behind(vehicles: Sequence[VehicleState], ego: VehicleState) -> Optional[VehicleState]:
    best = None
    for v in vehicles:
        if v.id == ego.id or v.lane != ego.lane:
            continue
        if v.position_m < ego.position_m or (v.position_m == ego.position_m and v.id > ego.id):
            if best is None or (v.position_m, -v.id) > (best.position_m, -best.id):
                best = v
    return best


@dataclass(frozen=True, slots=True)
class Violation:
    code: str
    detail: str


def validate_snapshot(vehicles: Sequence[VehicleState]) -> list[Violation]:
    """Every integrity problem in a snapshot; an empty list means it is valid.

    Checked: duplicate ids, negative speeds, overlapping same-lane neighbours,
    and non-contiguous ``position_in_platoon`` indices within a platoon.
    """
    out: list[Violation] = []
    seen: set = set()
    for v in vehicles:
        if v.id in seen:
            out.append(Violation("duplicate id", f"vehicle id {v.id} appears more than once"))
        seen.add(v.id)
        if v.speed_mps < 0:
            out.append(Violation("negative speed", f"vehicle {v.id} speed {v.speed_mps}"))

    for lane, ordered in by_lane(vehicles).items():
        for leader, follower in zip(ordered, ordered[1:]):
            clearance = leader.position_m - leader.length_m - follower.position_m
            if clearance < 0:
                out.append(Violation(
                    "overlap",
                    f"lane {lane}: vehicle {follower.id} overlaps vehicle {leader.id} "
                    f"by {-clearance:.3f} m"))

    platoons: dict[int, list[int]] = {}
    for v in vehicles:
        if v.platoon_id is not None:
            platoons.setdefault(v.platoon_id, []).append(v.position_in_platoon)
        elif v.platoon_state is not PlatoonState.STANDALONE:
            out.append(Violation(
                "platoon membership",
                f"vehicle {v.id} is {v.platoon_state.value} without a platoon id"))
    for pid, indices in sorted(platoons.items()):
        if sorted(indices) != list(range(len(indices))):
            out.append(Violation(
                "platoon index gap",
                f"platoon {pid} has indices {sorted(indices)}"))
    return out

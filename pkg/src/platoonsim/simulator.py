"""In-process reference traffic simulator.

Holds the vehicle population of a single multi-lane corridor and exposes the
query / apply / step / inject contract that the integration loop drives.
Human-driven vehicles follow the Intelligent Driver Model; automated vehicles
apply the last acceleration commanded to them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .core import (
    CommandRecord,
    ControlMode,
    PlatoonState,
    SimClock,
    Snapshot,
    TruckParameters,
    UnknownVehicleError,
    VehicleKind,
    VehicleState,
    validate_snapshot,
)

log = logging.getLogger(__name__)

CAR_LENGTH_M = 4.5
CAR_ACCEL_BOUNDS = (-8.0, 2.5)
ENTRY_REGION_M = 100.0


class SimulatorError(Exception):
    """Base class for rejected simulator calls."""


class ClockMismatchError(SimulatorError):
    pass


class ManualVehicleError(SimulatorError):
    pass


class InvalidStateError(SimulatorError):
    pass


class StepSizeError(SimulatorError):
    pass


@dataclass(frozen=True)
class Corridor:
    length_m: float = 15000.0
    speed_limit_mps: float = 36.0
    lane_count: int = 1

    def __post_init__(self):
        if not self.length_m > 0:
            raise ValueError("corridor length must be positive")
        if not self.speed_limit_mps > 0:
            raise ValueError("speed limit must be positive")
        if self.lane_count < 1:
            raise ValueError("lane_count must be >= 1")


@dataclass(frozen=True)
class DemandProfile:
    arrival_rate_veh_per_h: float = 0.0
    truck_fraction: float = 0.0
    entry_speed_mps: float = 25.0

    def __post_init__(self):
        if self.arrival_rate_veh_per_h < 0:
            raise ValueError("arrival rate must be non-negative")
        if not 0.0 <= self.truck_fraction <= 1.0:
            raise ValueError("truck_fraction must lie in [0, 1]")
        if self.entry_speed_mps < 0:
            raise ValueError("entry speed must be non-negative")


@dataclass(frozen=True)
class InsertionEvent:
    """A car materialising between two platoon members (a cut-in)."""

    at_time_s: float
    target_platoon_id: int
    insert_after_index: int = 0
    intruder_speed_mps: float = 32.0
    intruder_length_m: float = CAR_LENGTH_M

    def __post_init__(self):
        if self.at_time_s < 0:
            raise ValueError("at_time_s must be non-negative")
        if self.insert_after_index < 0:
            raise ValueError("insert_after_index must be non-negative")
        if self.intruder_speed_mps < 0 or not self.intruder_length_m > 0:
            raise ValueError("intruder speed must be >= 0 and length > 0")


@dataclass(frozen=True)
class StatusUpdate:
    """Pushes tactical and authority status of one vehicle into the simulator."""

    vehicle_id: int
    control_mode: ControlMode
    platoon_state: PlatoonState
    platoon_id: Optional[int] = None
    position_in_platoon: Optional[int] = None


SimEvent = Union[InsertionEvent, StatusUpdate]


class SimulatorHandle(Protocol):
    """Uniform adapter contract for in-process and remote simulators."""

    @property
    def clock(self) -> SimClock: ...

    def query_state(self, t_s: float) -> Snapshot: ...

    def apply_commands(self, commands: Sequence[CommandRecord]) -> None: ...

    def step(self, dt_s: float) -> SimClock: ...

    def inject_event(self, event: SimEvent) -> None: ...


@dataclass(frozen=True)
class IDMParams:
    time_headway_s: float = 1.2
    max_accel_mps2: float = 1.4
    comfortable_decel_mps2: float = 2.0
    jam_distance_m: float = 2.0
    delta: float = 4.0

    def desired_gap(self, speed: float, leader_speed: float) -> float:
        dv = speed - leader_speed
        dyn = speed * self.time_headway_s + speed * dv / (
            2.0 * math.sqrt(self.max_accel_mps2 * self.comfortable_decel_mps2))
        return self.jam_distance_m + max(0.0, dyn)


def idm_accel(params: IDMParams, speed: float, desired_speed: float,
              gap_m: Optional[float] = None, leader_speed: Optional[float] = None,
              max_accel: Optional[float] = None) -> float:
    """IDM acceleration; ``gap_m=None`` means free road.

    A non-positive gap returns -inf so that the caller's bound clipping
    produces full braking.
    """
    a = params.max_accel_mps2 if max_accel is None else max_accel
    v0 = max(desired_speed, 0.1)
    free = 1.0 - (speed / v0) ** params.delta
    if gap_m is None:
        return a * free
    if gap_m <= 0:
        return -math.inf
    s_star = params.desired_gap(speed, leader_speed)
    return a * (free - (s_star / gap_m) ** 2)


@dataclass(slots=True)
class _Vehicle:
    id: int
    kind: VehicleKind
    position_m: float
    speed_mps: float
    length_m: float
    lane: int
    desired_speed_mps: float
    truck: Optional[TruckParameters] = None
    accel_mps2: float = 0.0
    control_mode: ControlMode = ControlMode.MANUAL
    platoon_id: Optional[int] = None
    platoon_state: PlatoonState = PlatoonState.STANDALONE
    position_in_platoon: Optional[int] = None
    command: Optional[float] = None

    def bounds(self) -> tuple[float, float]:
        if self.truck is not None:
            return self.truck.accel_bounds(self.speed_mps)
        return CAR_ACCEL_BOUNDS

    def freeze(self) -> VehicleState:
        return VehicleState(
            id=self.id, kind=self.kind, position_m=self.position_m,
            speed_mps=self.speed_mps, accel_mps2=self.accel_mps2,
            length_m=self.length_m, lane=self.lane, platoon_id=self.platoon_id,
            platoon_state=self.platoon_state, control_mode=self.control_mode,
            position_in_platoon=self.position_in_platoon)


@dataclass(frozen=True)
class InitialVehicle:
    """Pre-positioned vehicle present at t = 0."""

    state: VehicleState
    truck: Optional[TruckParameters] = None
    desired_speed_mps: Optional[float] = None


@dataclass
class ReferenceSimulator:
    """Single-corridor microsimulator satisfying :class:`SimulatorHandle`.

    Within :meth:`step` the update order is: motion, exit removal, due
    insertions, demand spawning.
    """

    corridor: Corridor
    dt_s: float = 0.1
    seed: int = 0
    demand: DemandProfile = field(default_factory=DemandProfile)
    initial: Sequence[InitialVehicle] = ()
    idm: IDMParams = field(default_factory=IDMParams)
    human_truck: TruckParameters = field(
        default_factory=lambda: TruckParameters(brand="human", max_decel_mps2=-6.0))

    def __post_init__(self):
        if not self.dt_s > 0:
            raise ValueError("dt_s must be positive")
        self._clock = SimClock(0, self.dt_s)
        self._rng = np.random.default_rng([self.seed, 0])
        self._vehicles: dict[int, _Vehicle] = {}
        self._pending_events: list[InsertionEvent] = []
        self._queue: list[tuple[VehicleKind, int]] = []
        self.dropped_events: list[tuple[InsertionEvent, str]] = []
        self.arrivals: list[tuple[float, int, str, int]] = []
        for init in self.initial:
            s = init.state
            if s.id in self._vehicles:
                raise ValueError(f"duplicate initial vehicle id {s.id}")
            desired = init.desired_speed_mps
            if desired is None:
                desired = init.truck.desired_speed_mps if init.truck else self.corridor.speed_limit_mps
            self._vehicles[s.id] = _Vehicle(
                id=s.id, kind=s.kind, position_m=s.position_m, speed_mps=s.speed_mps,
                length_m=s.length_m, lane=s.lane, desired_speed_mps=desired,
                truck=init.truck, accel_mps2=s.accel_mps2, control_mode=s.control_mode,
                platoon_id=s.platoon_id, platoon_state=s.platoon_state,
                position_in_platoon=s.position_in_platoon)
        self._next_id = max(self._vehicles, default=-1) + 1
        violations = validate_snapshot([v.freeze() for v in self._vehicles.values()])
        if violations:
            raise InvalidStateError("; ".join(v.detail for v in violations))

    # -- contract ---------------------------------------------------------

    @property
    def clock(self) -> SimClock:
        return self._clock

    def peek_state(self) -> Snapshot:
        """Current state without validation; membership may be mid-update."""
        return Snapshot(self._clock, tuple(v.freeze() for v in self._ordered()))

    def query_state(self, t_s: float) -> Snapshot:
        if abs(t_s - self._clock.t_s) > 1e-9:
            raise ClockMismatchError(
                f"queried t={t_s!r} but simulator is at t={self._clock.t_s!r}")
        vehicles = tuple(v.freeze() for v in self._ordered())
        violations = validate_snapshot(vehicles)
        if violations:
            raise InvalidStateError("; ".join(f"{v.code}: {v.detail}" for v in violations))
        return Snapshot(self._clock, vehicles)

    def apply_commands(self, commands: Sequence[CommandRecord]) -> None:
        # validate the whole batch before touching any vehicle
        for c in commands:
            veh = self._vehicles.get(c.vehicle_id)
            if veh is None:
                raise UnknownVehicleError(c.vehicle_id)
            if veh.control_mode is not ControlMode.AUTOMATED:
                raise ManualVehicleError(
                    f"vehicle {c.vehicle_id} is {veh.kind.value}/{veh.control_mode.value}; "
                    "only automated vehicles accept commands")
        for c in commands:
            self._vehicles[c.vehicle_id].command = c.accel_cmd_mps2

    def step(self, dt_s: float) -> SimClock:
        if abs(dt_s - self.dt_s) > 1e-12:
            raise StepSizeError(f"step dt={dt_s!r} differs from configured dt={self.dt_s!r}")
        self._move()
        self._clock = self._clock.advanced()
        self._remove_exited()
        self._run_due_insertions()
        self.spawn_from_demand()
        return self._clock

    def inject_event(self, event: SimEvent) -> None:
        if isinstance(event, InsertionEvent):
            self._pending_events.append(event)
            if event.at_time_s <= self._clock.t_s + 1e-9:
                self._run_due_insertions()
        elif isinstance(event, StatusUpdate):
            veh = self._vehicles.get(event.vehicle_id)
            if veh is None:
                raise UnknownVehicleError(event.vehicle_id)
            if event.control_mode is ControlMode.AUTOMATED and veh.kind is not VehicleKind.TRUCK:
                raise ManualVehicleError(f"vehicle {veh.id} is a car and cannot be automated")
            if (event.platoon_id is None) != (event.position_in_platoon is None):
                raise InvalidStateError("platoon_id and position_in_platoon must be set together")
            if veh.control_mode is not event.control_mode:
                veh.command = None
            veh.control_mode = event.control_mode
            veh.platoon_state = event.platoon_state
            veh.platoon_id = event.platoon_id
            veh.position_in_platoon = event.position_in_platoon
        else:
            raise TypeError(f"unsupported event {event!r}")

    # -- internals --------------------------------------------------------

    def _ordered(self) -> list[_Vehicle]:
        return sorted(self._vehicles.values(), key=lambda v: (v.lane, -v.position_m, v.id))

    def _move(self) -> None:
        dt = self.dt_s
        accels: dict[int, float] = {}
        ordered = self._ordered()
        for i, veh in enumerate(ordered):
            lo, hi = veh.bounds()
            if veh.control_mode is ControlMode.AUTOMATED:
                # an automated vehicle without a fresh command holds the last one
                a = veh.command if veh.command is not None else 0.0
            else:
                leader = ordered[i - 1] if i > 0 and ordered[i - 1].lane == veh.lane else None
                a = self._human_accel(veh, leader, hi)
            accels[veh.id] = min(max(a, lo), hi)
        for veh in ordered:
            a = accels[veh.id]
            v_new = veh.speed_mps + a * dt
            if v_new < 0.0:
                # stop within the step instead of rolling backwards
                veh.position_m += -veh.speed_mps ** 2 / (2.0 * a)
                veh.speed_mps = 0.0
            else:
                veh.position_m += veh.speed_mps * dt + 0.5 * a * dt * dt
                veh.speed_mps = v_new
            veh.accel_mps2 = a

    def _human_accel(self, veh: _Vehicle, leader: Optional[_Vehicle], max_accel: float) -> float:
        a_max = min(self.idm.max_accel_mps2, max_accel)
        if leader is None:
            return idm_accel(self.idm, veh.speed_mps, veh.desired_speed_mps, max_accel=a_max)
        clearance = leader.position_m - leader.length_m - veh.position_m
        return idm_accel(self.idm, veh.speed_mps, veh.desired_speed_mps,
                         clearance, leader.speed_mps, max_accel=a_max)

    def _remove_exited(self) -> None:
        for vid in [v.id for v in self._vehicles.values()
                    if v.position_m - v.length_m > self.corridor.length_m]:
            del self._vehicles[vid]

    def _run_due_insertions(self) -> None:
        now = self._clock.t_s
        due = [e for e in self._pending_events if e.at_time_s <= now + 1e-9]
        if not due:
            return
        self._pending_events = [e for e in self._pending_events if e.at_time_s > now + 1e-9]
        for event in due:
            self._insert(event)

    def _insert(self, event: InsertionEvent) -> None:
        members = {v.position_in_platoon: v for v in self._vehicles.values()
                   if v.platoon_id == event.target_platoon_id}
        ahead = members.get(event.insert_after_index)
        behind = members.get(event.insert_after_index + 1)
        if ahead is None or behind is None:
            reason = (f"platoon {event.target_platoon_id} has no members at indices "
                      f"{event.insert_after_index} and {event.insert_after_index + 1}")
            log.warning("dropping insertion event at t=%s: %s", now_fmt(self._clock), reason)
            self.dropped_events.append((event, reason))
            return
        front = (ahead.position_m - ahead.length_m + behind.position_m) / 2.0 \
            + event.intruder_length_m / 2.0
        vid = self._next_id
        self._next_id += 1
        self._vehicles[vid] = _Vehicle(
            id=vid, kind=VehicleKind.CAR, position_m=front,
            speed_mps=event.intruder_speed_mps, length_m=event.intruder_length_m,
            lane=ahead.lane, desired_speed_mps=self.corridor.speed_limit_mps)

    def spawn_from_demand(self) -> list[VehicleState]:
        """Draw this step's Poisson arrivals and release queued ones whose entry is clear.

        Blocked arrivals stay queued in arrival order; they are never dropped.
        """
        lam = self.demand.arrival_rate_veh_per_h * self.dt_s / 3600.0
        if lam > 0:
            for _ in range(int(self._rng.poisson(lam))):
                kind = (VehicleKind.TRUCK if self._rng.random() < self.demand.truck_fraction
                        else VehicleKind.CAR)
                lane = int(self._rng.integers(self.corridor.lane_count))
                self._queue.append((kind, lane))
        spawned: list[VehicleState] = []
        waiting = []
        for kind, lane in self._queue:
            if self._entry_clear(lane):
                spawned.append(self._spawn(kind, lane))
            else:
                waiting.append((kind, lane))
        self._queue = waiting
        return spawned

    def _entry_clear(self, lane: int) -> bool:
        last = None
        for v in self._vehicles.values():
            if v.lane == lane and (last is None or v.position_m < last.position_m):
                last = v
        if last is None or last.position_m - last.length_m > ENTRY_REGION_M:
            return True
        v_e = self.demand.entry_speed_mps
        clearance = last.position_m - last.length_m
        return clearance >= self.idm.desired_gap(v_e, last.speed_mps)

    def _spawn(self, kind: VehicleKind, lane: int) -> VehicleState:
        vid = self._next_id
        self._next_id += 1
        truck = self.human_truck if kind is VehicleKind.TRUCK else None
        self._vehicles[vid] = _Vehicle(
            id=vid, kind=kind, position_m=0.0, speed_mps=self.demand.entry_speed_mps,
            length_m=18.0 if truck else CAR_LENGTH_M, lane=lane,
            desired_speed_mps=(min(truck.desired_speed_mps, self.corridor.speed_limit_mps)
                               if truck else self.corridor.speed_limit_mps),
            truck=truck)
        self.arrivals.append((self._clock.t_s, vid, kind.value, lane))
        return self._vehicles[vid].freeze()

    @property
    def queued(self) -> int:
        return len(self._queue)


def now_fmt(clock: SimClock) -> str:
    return f"{clock.t_s:g}"


"""Per-truck tactical platooning logic.

Front and rear gap coordinators summarise the snapshot around the ego truck,
``classify`` proposes a :class:`PlatoonState`, ``transition`` filters the
proposal through the allowed-edge set, and ``decide`` turns the resulting
state into time-gap and speed setpoints for the operational layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional

from .core import (
    ControlMode,
    PlatoonState,
    Snapshot,
    TruckParameters,
    VehicleKind,
    VehicleState,
    gap,
    nearest_ahead,
    nearest_behind,
)

log = logging.getLogger(__name__)

S = PlatoonState

ALLOWED_EDGES: frozenset[tuple[PlatoonState, PlatoonState]] = frozenset({
    (S.STANDALONE, S.JOINING),
    (S.JOINING, S.PLATOONING),
    (S.JOINING, S.STANDALONE),
    (S.PLATOONING, S.CUT_IN),
    (S.PLATOONING, S.FRONT_SPLIT),
    (S.PLATOONING, S.BACK_SPLIT),
    (S.CUT_IN, S.PLATOONING),
    (S.CUT_IN, S.BACK_SPLIT),
    (S.FRONT_SPLIT, S.STANDALONE),
    (S.BACK_SPLIT, S.STANDALONE),
})

SPLIT_STATES = frozenset({S.FRONT_SPLIT, S.BACK_SPLIT, S.CUT_IN})


class TacticalEvent(str, Enum):
    EMERGENCY_STOP = "EmergencyStop"
    DRIVER_LEAVE_REQUEST = "DriverLeaveRequest"
    CUT_IN_DETECTED = "CutInDetected"
    CUT_IN_CLEARED = "CutInCleared"
    LEADER_LOST = "LeaderLost"
    JOIN_OPPORTUNITY = "JoinOpportunity"
    SPLIT_COMPLETE = "SplitComplete"


@dataclass(frozen=True)
class ObservedEvent:
    kind: TacticalEvent
    t_s: float


@dataclass(frozen=True)
class TacticalConfig:
    platoon_time_gap_s: float = 1.6
    split_time_gap_s: float = 3.0
    standalone_time_gap_s: float = 1.6
    join_activation_gap_m: float = 100.0
    join_abort_gap_m: float = 150.0
    join_spacing_tol_m: float = 2.0
    join_speed_tol_mps: float = 0.5
    approach_speed_delta_mps: float = 2.0
    cut_in_timeout_s: float = 30.0
    max_platoon_length: int = 7
    # standstill spacing used by the Joining->Platooning guard
    standstill_spacing_m: float = 5.0

    def __post_init__(self):
        for name in ("platoon_time_gap_s", "split_time_gap_s", "standalone_time_gap_s"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_platoon_length < 1:
            raise ValueError("max_platoon_length must be >= 1")
        if self.join_abort_gap_m < self.join_activation_gap_m:
            raise ValueError("join_abort_gap_m must be >= join_activation_gap_m")


@dataclass(frozen=True)
class FrontGapInfo:
    immediate_leader: Optional[VehicleState] = None
    leader_is_platoon_member: bool = False
    leader_truck_params: Optional[TruckParameters] = None
    gap_m: float = math.inf
    relative_speed_mps: float = 0.0


@dataclass(frozen=True)
class RearGapInfo:
    platoon_length_so_far: int = 1
    position_in_platoon: int = 0
    max_platoon_length: int = 7
    immediate_follower: Optional[VehicleState] = None
    platoon_size: int = 1

    @property
    def max_reached(self) -> bool:
        """True when nobody may join behind the ego truck."""
        return self.position_in_platoon + 1 >= self.max_platoon_length


@dataclass(frozen=True)
class TacticalDecision:
    target_time_gap_s: float
    target_speed_mps: float
    new_state: PlatoonState
    manual_fallback: bool = False

    def __post_init__(self):
        if not self.target_time_gap_s > 0:
            raise ValueError("target_time_gap_s must be positive")
        if self.target_speed_mps < 0:
            raise ValueError("target_speed_mps must be non-negative")


def front_gap_scan(snapshot: Snapshot, ego_id: int,
                   truck_params: Optional[dict[int, TruckParameters]] = None) -> FrontGapInfo:
    ego = snapshot.by_id(ego_id)
    leader = nearest_ahead(snapshot.vehicles, ego)
    if leader is None:
        return FrontGapInfo()
    member = (leader.platoon_id is not None and ego.platoon_id is not None
              and leader.platoon_id == ego.platoon_id)
    return FrontGapInfo(
        immediate_leader=leader,
        leader_is_platoon_member=member,
        leader_truck_params=(truck_params or {}).get(leader.id),
        gap_m=max(gap(leader, ego), 0.0),
        relative_speed_mps=leader.speed_mps - ego.speed_mps,
    )


def rear_gap_scan(snapshot: Snapshot, ego_id: int, config: TacticalConfig) -> RearGapInfo:
    ego = snapshot.by_id(ego_id)
    follower = nearest_behind(snapshot.vehicles, ego)
    if ego.platoon_id is None:
        return RearGapInfo(max_platoon_length=config.max_platoon_length,
                           immediate_follower=follower)
    members = [v for v in snapshot.vehicles if v.platoon_id == ego.platoon_id]
    ahead = sum(1 for v in members if v.position_in_platoon < ego.position_in_platoon)
    return RearGapInfo(
        platoon_length_so_far=ahead + 1,
        position_in_platoon=ego.position_in_platoon,
        max_platoon_length=config.max_platoon_length,
        immediate_follower=follower,
        platoon_size=len(members),
    )


def is_platoon_capable(vehicle: VehicleState) -> bool:
    return (vehicle.kind is VehicleKind.TRUCK
            and vehicle.control_mode is ControlMode.AUTOMATED
            and vehicle.platoon_state not in SPLIT_STATES)


def classify(ego: VehicleState, front: FrontGapInfo, rear: RearGapInfo,
             events: Iterable[ObservedEvent | TacticalEvent] = (),
             config: TacticalConfig = TacticalConfig(),
             time_in_state_s: float = 0.0) -> PlatoonState:
    """State proposed for the ego truck by the transition guards.

    Events are handled first in priority order EmergencyStop >
    DriverLeaveRequest > CutInDetected > JoinOpportunity; the remaining
    guards are evaluated per current state. The proposal may still be
    suppressed by :func:`transition`.
    """
    kinds = {e.kind if isinstance(e, ObservedEvent) else e for e in events}
    state = ego.platoon_state
    if TacticalEvent.EMERGENCY_STOP in kinds or TacticalEvent.DRIVER_LEAVE_REQUEST in kinds:
        return S.FRONT_SPLIT
    if TacticalEvent.CUT_IN_DETECTED in kinds and state is S.PLATOONING:
        return S.CUT_IN

    leader = front.immediate_leader
    is_head = ego.platoon_id is not None and rear.position_in_platoon == 0

    if state is S.STANDALONE:
        if is_head and rear.platoon_size > 1:
            # a truck is joining behind us: start forming
            return S.JOINING
        if TacticalEvent.JOIN_OPPORTUNITY in kinds or _join_possible(front, config):
            return S.JOINING
        return S.STANDALONE

    if state is S.JOINING:
        if is_head:
            if rear.platoon_size <= 1:
                return S.STANDALONE
            f = rear.immediate_follower
            if (f is not None and f.platoon_id == ego.platoon_id
                    and f.platoon_state is S.PLATOONING):
                return S.PLATOONING
            return S.JOINING
        if leader is None or not front.leader_is_platoon_member or front.gap_m > config.join_abort_gap_m:
            return S.STANDALONE
        desired = config.standstill_spacing_m + config.platoon_time_gap_s * ego.speed_mps
        if (abs(front.gap_m - desired) < config.join_spacing_tol_m
                and abs(front.relative_speed_mps) < config.join_speed_tol_mps):
            return S.PLATOONING
        return S.JOINING

    if state is S.PLATOONING:
        if is_head:
            # the last follower left: dissolve through a back split
            return S.PLATOONING if rear.platoon_size > 1 else S.BACK_SPLIT
        if leader is not None and front.leader_is_platoon_member:
            return S.PLATOONING
        return S.CUT_IN

    if state is S.CUT_IN:
        if leader is not None and front.leader_is_platoon_member:
            return S.PLATOONING
        if time_in_state_s > config.cut_in_timeout_s:
            return S.BACK_SPLIT
        return S.CUT_IN

    # FrontSplit / BackSplit: done once the achieved time gap reaches the split setpoint
    if leader is None or front.gap_m / max(ego.speed_mps, 0.1) >= config.split_time_gap_s:
        return S.STANDALONE
    return state


def _join_possible(front: FrontGapInfo, config: TacticalConfig) -> bool:
    leader = front.immediate_leader
    if leader is None or not is_platoon_capable(leader):
        return False
    if front.gap_m >= config.join_activation_gap_m:
        return False
    prospective_index = (leader.position_in_platoon or 0) + 1
    return prospective_index < config.max_platoon_length


def transition(current: PlatoonState, proposed: PlatoonState) -> PlatoonState:
    if current is proposed:
        return current
    if (current, proposed) in ALLOWED_EDGES:
        return proposed
    log.debug("suppressed illegal transition %s -> %s", current.value, proposed.value)
    return current


def decide(state: PlatoonState, front: FrontGapInfo, config: TacticalConfig,
           desired_speed_mps: float, manual_fallback: bool = False) -> TacticalDecision:
    leader = front.immediate_leader
    if state is S.PLATOONING:
        speed = leader.speed_mps if leader is not None else desired_speed_mps
        return TacticalDecision(config.platoon_time_gap_s, speed, state, manual_fallback)
    if state is S.JOINING:
        speed = desired_speed_mps
        if leader is not None:
            speed = min(leader.speed_mps + config.approach_speed_delta_mps, desired_speed_mps)
        return TacticalDecision(config.platoon_time_gap_s, max(speed, 0.0), state, manual_fallback)
    if state in SPLIT_STATES:
        speed = leader.speed_mps if leader is not None else desired_speed_mps
        return TacticalDecision(config.split_time_gap_s, speed, state, manual_fallback)
    return TacticalDecision(config.standalone_time_gap_s, desired_speed_mps, state, manual_fallback)

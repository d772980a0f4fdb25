"""Closed-loop integration of simulator, authority, tactical and operational layers.

Per step, in order: query the traffic state, tick authority for every
controlled truck, run tactical and operational logic for automated trucks,
apply scripted maneuver forcing, push status and commands, step the
simulator, and record the queried state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .authority import ATEvent, ATEventKind, ATState, DecisionPath, TickResult, tick
from .core import (
    CommandRecord,
    ControlMode,
    PlatoonState,
    Snapshot,
    VehicleState,
    gap,
    nearest_ahead,
    to_step,
    EPS_SPEED,
)
from .operational import control_step
from .scenario import ScenarioSpec, SpeedPulse, Split, StopAndGo, CutIn
from .simulator import SimulatorHandle, StatusUpdate
from .tactical import (
    TacticalEvent,
    classify,
    decide,
    front_gap_scan,
    rear_gap_scan,
    transition,
)

log = logging.getLogger(__name__)

# AT events that also interrupt platooning at the tactical level
_TACTICAL_FROM_AT = {
    ATEventKind.SYSTEM_FAULT: TacticalEvent.EMERGENCY_STOP,
    ATEventKind.LEADER_EMERGENCY_BRAKE: TacticalEvent.EMERGENCY_STOP,
    ATEventKind.DRIVER_TAKEOVER_REQUEST: TacticalEvent.DRIVER_LEAVE_REQUEST,
}

_MANUAL_EXIT = {
    PlatoonState.PLATOONING: PlatoonState.FRONT_SPLIT,
    PlatoonState.JOINING: PlatoonState.STANDALONE,
    PlatoonState.CUT_IN: PlatoonState.BACK_SPLIT,
    PlatoonState.STANDALONE: PlatoonState.STANDALONE,
}


@dataclass(frozen=True)
class TrajectoryRecord:
    t_s: float
    vehicle_id: int
    position_m: float
    speed_mps: float
    accel_mps2: float
    gap_m: Optional[float]
    time_gap_s: Optional[float]
    platoon_state: PlatoonState
    control_mode: ControlMode


@dataclass
class RunAborted(Exception):
    """Co-simulation fault; ``records`` holds every step completed before it."""

    records: list
    cause: BaseException

    def __str__(self):
        return f"run aborted after {len(self.records)} records: {self.cause}"


@dataclass
class _Truck:
    state: PlatoonState
    platoon_id: Optional[int]
    index: Optional[int]
    at: ATState
    rng: np.random.Generator
    entered_step: int = 0
    mode: ControlMode = ControlMode.AUTOMATED
    # set when the truck left a platoon through a front split; it will not
    # seek a new platoon until the driver re-activates automation
    join_opt_out: bool = False


@dataclass
class RunLog:
    """Side channel for audits: commands and authority decisions per step."""

    commands: list[tuple[int, CommandRecord]] = field(default_factory=list)
    authority: list[tuple[float, int, TickResult]] = field(default_factory=list)
    transitions: list[tuple[float, int, PlatoonState, PlatoonState]] = field(default_factory=list)


class _StopAndGoForcing:
    def __init__(self, m: StopAndGo, dt: float):
        self.m = m
        self.dt = dt
        self.phase = "cruise"
        self.dwell_until = math.inf

    def command(self, t: float, v: float) -> Optional[float]:
        m = self.m
        if self.phase == "cruise" and t >= m.start_s - 1e-9:
            self.phase = "braking"
        if self.phase == "braking":
            if v > 0.0:
                return -m.decel_mag_mps2
            self.phase = "dwell"
            self.dwell_until = t + m.dwell_s
        if self.phase == "dwell":
            if t < self.dwell_until - 1e-9:
                return 0.0
            self.phase = "recovery"
        if self.phase == "recovery":
            if v < m.cruise_speed_mps:
                return min(m.decel_mag_mps2, (m.cruise_speed_mps - v) / self.dt)
            self.phase = "done"
        return None


class _SpeedPulseForcing:
    gain = 1.0

    def __init__(self, m: SpeedPulse, cruise: float):
        self.m = m
        self.cruise = cruise

    def command(self, t: float, v: float) -> Optional[float]:
        m = self.m
        tau = t - m.start_s
        if tau < -1e-9 or tau > m.duration_s + 1e-9:
            return None
        phase = math.pi * tau / m.duration_s
        v_ref = self.cruise + m.amplitude_mps * math.sin(phase) ** 2
        a_ref = m.amplitude_mps * math.pi / m.duration_s * math.sin(2.0 * phase)
        return a_ref + self.gain * (v_ref - v)


def _record(v: VehicleState, vehicles, t: float, state: PlatoonState,
            mode: ControlMode) -> TrajectoryRecord:
    leader = nearest_ahead(vehicles, v)
    g = tg = None
    if leader is not None:
        g = gap(leader, v)
        tg = g / max(v.speed_mps, EPS_SPEED)
    return TrajectoryRecord(t, v.id, v.position_m, v.speed_mps, v.accel_mps2, g, tg, state, mode)


class Runner:
    """Executes one scenario against a simulator handle."""

    def __init__(self, spec: ScenarioSpec, handle: SimulatorHandle,
                 run_log: Optional[RunLog] = None):
        self.spec = spec
        self.handle = handle
        self.log = run_log
        self.params = {i: t.params for i, t in enumerate(spec.platoon)}
        formed = spec.starts_formed
        self.trucks: dict[int, _Truck] = {
            i: _Truck(
                state=PlatoonState.PLATOONING if formed else PlatoonState.STANDALONE,
                platoon_id=0 if formed else None,
                index=i if formed else None,
                at=ATState(),
                rng=np.random.default_rng([spec.seed, 1, i]))
            for i in range(len(spec.platoon))
        }
        self._next_platoon = 1
        self._at_events: dict[tuple[int, int], list] = {}
        for e in spec.at_events:
            self._at_events.setdefault((to_step(e.time_s, spec.dt_s), e.truck), []).append(e)
        m = spec.maneuver
        self._forcing = None
        if isinstance(m, StopAndGo):
            self._forcing = _StopAndGoForcing(m, spec.dt_s)
        elif isinstance(m, SpeedPulse):
            self._forcing = _SpeedPulseForcing(m, spec.platoon[0].speed_mps)
        self._split_step = to_step(m.at_time_s, spec.dt_s) if isinstance(m, Split) else None

    # -- loop ---------------------------------------------------------------

    def run(self) -> list[TrajectoryRecord]:
        records: list[TrajectoryRecord] = []
        spec = self.spec
        if isinstance(spec.maneuver, CutIn):
            self._guard(records, self.handle.inject_event, spec.maneuver.event)
        for k in range(spec.horizon_steps):
            snap = self._guard(records, self.handle.query_state, self.handle.clock.t_s)
            if snap.clock.step != k:
                raise RunAborted(records, RuntimeError(
                    f"simulator at step {snap.clock.step}, loop at step {k}"))
            commands, updates = self._control(k, snap)
            for u in updates:
                self._guard(records, self.handle.inject_event, u)
            self._guard(records, self.handle.apply_commands, commands)
            self._guard(records, self.handle.step, spec.dt_s)
            records.extend(self._records(snap))
        return records

    def _guard(self, records, fn, *args):
        try:
            return fn(*args)
        except Exception as exc:
            log.error("co-simulation fault at t=%s: %s", self.handle.clock.t_s, exc)
            raise RunAborted(records, exc) from exc

    def _control(self, k: int, snap: Snapshot):
        spec = self.spec
        t = snap.t_s
        present = {v.id: v for v in snap.vehicles}
        for vid in [vid for vid in self.trucks if vid not in present]:
            del self.trucks[vid]
        self._reindex(present)

        # (2) authority
        tactical_events: dict[int, list[TacticalEvent]] = {}
        for vid, tr in self.trucks.items():
            scripted = self._at_events.get((k, vid), [])
            events = [ATEvent(e.kind, e.time_s) for e in scripted]
            res = tick(tr.at, events, tr.rng, t, spec.dt_s, spec.authority)
            tr.at = res.state
            if res.path is DecisionPath.DRIVER and res.mode is ControlMode.AUTOMATED:
                tr.join_opt_out = False
            tr.mode = res.mode
            if self.log is not None and (res.path or res.rejected):
                self.log.authority.append((t, vid, res))
            tev = [_TACTICAL_FROM_AT[e.kind] for e in scripted if e.kind in _TACTICAL_FROM_AT]
            if self._split_step == k and vid == spec.maneuver.index:
                tev.append(TacticalEvent.DRIVER_LEAVE_REQUEST)
            tactical_events[vid] = tev

        view = self._overlay(snap)

        # (3) tactical + operational, evaluated on the frozen view
        commands: list[CommandRecord] = []
        proposals: dict[int, PlatoonState] = {}
        for vid in sorted(self.trucks):
            tr = self.trucks[vid]
            ego = view.by_id(vid)
            front = front_gap_scan(view, vid, self.params)
            rear = rear_gap_scan(view, vid, spec.tactical)
            events = tactical_events[vid]
            proposed = classify(ego, front, rear, events, spec.tactical,
                                (k - tr.entered_step) * spec.dt_s)
            if tr.mode is not ControlMode.AUTOMATED:
                # a manually driven truck can only wind down its platoon role
                if proposed is not PlatoonState.STANDALONE:
                    proposed = _MANUAL_EXIT.get(tr.state, tr.state)
                proposals[vid] = transition(tr.state, proposed)
                continue
            if (proposed is PlatoonState.JOINING and tr.join_opt_out
                    and tr.platoon_id is None):
                proposed = tr.state
            new_state = transition(tr.state, proposed)
            proposals[vid] = new_state
            decision = decide(new_state, front, spec.tactical,
                              self.params[vid].desired_speed_mps,
                              manual_fallback=TacticalEvent.EMERGENCY_STOP in events)
            cmd = control_step(view, vid, decision, self.params[vid], spec.controller)
            if vid == 0 and self._forcing is not None:
                forced = self._forcing.command(t, ego.speed_mps)
                if forced is not None:
                    cmd = CommandRecord(vid, forced, t)
            commands.append(cmd)

        self._apply_transitions(k, t, proposals, view)
        if self.log is not None:
            self.log.commands.extend((k, c) for c in commands)
        return commands, self._status_updates(snap)

    # -- platoon bookkeeping ------------------------------------------------

    def _overlay(self, snap: Snapshot) -> Snapshot:
        vehicles = []
        for v in snap.vehicles:
            tr = self.trucks.get(v.id)
            if tr is not None:
                v = replace(v, control_mode=tr.mode, platoon_state=tr.state,
                            platoon_id=tr.platoon_id, position_in_platoon=tr.index)
            vehicles.append(v)
        return Snapshot(snap.clock, tuple(vehicles))

    def _apply_transitions(self, k: int, t: float, proposals: dict[int, PlatoonState],
                           view: Snapshot) -> None:
        positions = {v.id: v.position_m for v in view.vehicles}
        for vid, new in proposals.items():
            tr = self.trucks[vid]
            old = tr.state
            if new is old:
                continue
            if self.log is not None:
                self.log.transitions.append((t, vid, old, new))
            tr.state = new
            tr.entered_step = k
            if old is PlatoonState.FRONT_SPLIT and new is PlatoonState.STANDALONE:
                tr.join_opt_out = True
            if new is PlatoonState.JOINING and old is PlatoonState.STANDALONE and tr.platoon_id is None:
                leader = nearest_ahead(view.vehicles, view.by_id(vid))
                lt = self.trucks.get(leader.id) if leader is not None else None
                if lt is not None:
                    if lt.platoon_id is None:
                        lt.platoon_id = self._new_platoon()
                    tr.platoon_id = lt.platoon_id
            elif new is PlatoonState.STANDALONE and tr.platoon_id is not None:
                pid = tr.platoon_id
                behind = [o for oid, o in self.trucks.items()
                          if o.platoon_id == pid and oid != vid and positions[oid] < positions[vid]]
                if behind:
                    fresh = self._new_platoon()
                    for o in behind:
                        o.platoon_id = fresh
                tr.platoon_id = None
        # a lone StandAlone holder of a platoon id is no longer forming anything
        self._reindex(positions)
        for tr in self.trucks.values():
            if (tr.state is PlatoonState.STANDALONE and tr.platoon_id is not None
                    and self._size(tr.platoon_id) == 1):
                tr.platoon_id = None
        self._reindex(positions)

    def _size(self, pid: int) -> int:
        return sum(1 for o in self.trucks.values() if o.platoon_id == pid)

    def _new_platoon(self) -> int:
        pid = self._next_platoon
        self._next_platoon += 1
        return pid

    def _reindex(self, positions) -> None:
        pos = {vid: (p.position_m if isinstance(p, VehicleState) else p) for vid, p in positions.items()}
        groups: dict[int, list[int]] = {}
        for vid, tr in self.trucks.items():
            if tr.platoon_id is None:
                tr.index = None
            else:
                groups.setdefault(tr.platoon_id, []).append(vid)
        for members in groups.values():
            for i, vid in enumerate(sorted(members, key=lambda m: (-pos[m], m))):
                self.trucks[vid].index = i

    def _status_updates(self, snap: Snapshot) -> list[StatusUpdate]:
        out = []
        for v in snap.vehicles:
            tr = self.trucks.get(v.id)
            if tr is None:
                continue
            if (v.control_mode, v.platoon_state, v.platoon_id, v.position_in_platoon) != \
                    (tr.mode, tr.state, tr.platoon_id, tr.index):
                out.append(StatusUpdate(v.id, tr.mode, tr.state, tr.platoon_id, tr.index))
        return out

    def _records(self, snap: Snapshot) -> list[TrajectoryRecord]:
        out = []
        for v in sorted(snap.vehicles, key=lambda v: v.id):
            tr = self.trucks.get(v.id)
            state = tr.state if tr is not None else v.platoon_state
            mode = tr.mode if tr is not None else v.control_mode
            out.append(_record(v, snap.vehicles, snap.t_s, state, mode))
        return out


def run(spec: ScenarioSpec, handle: SimulatorHandle,
        run_log: Optional[RunLog] = None) -> list[TrajectoryRecord]:
    """Run ``spec`` to its horizon on ``handle`` (which must be at t = 0)."""
    return Runner(spec, handle, run_log).run()

"""Manual/automated control authority per truck.

Three layers are evaluated each step: a mandatory layer (system-initiated
and driver-initiated paths, system path first), a discretionary layer where
the driver toggles automation at random, and a constraint layer that delays
automated-to-manual handovers by a reaction time and locks automation out
for a minimum inactive time after every takeover.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Optional

import numpy as np

from .core import ControlMode

_EPS = 1e-9


class ATEventKind(str, Enum):
    SYSTEM_FAULT = "SystemFault"
    LEADER_EMERGENCY_BRAKE = "LeaderEmergencyBrake"
    ODD_EXIT = "OddExit"
    DRIVER_TAKEOVER_REQUEST = "DriverTakeoverRequest"
    DRIVER_ACTIVATION_REQUEST = "DriverActivationRequest"


SYSTEM_EVENTS = frozenset({
    ATEventKind.SYSTEM_FAULT, ATEventKind.LEADER_EMERGENCY_BRAKE, ATEventKind.ODD_EXIT})


class DecisionPath(str, Enum):
    SYSTEM = "system"
    DRIVER = "driver"
    DISCRETIONARY = "discretionary"


@dataclass(frozen=True)
class ATEvent:
    kind: ATEventKind
    observed_at_s: float


@dataclass(frozen=True)
class ATConfig:
    reaction_time_s: float = 1.5
    min_inactive_time_s: float = 10.0
    p_activate_per_s: float = 0.0
    p_deactivate_per_s: float = 0.0

    def __post_init__(self):
        for name in ("reaction_time_s", "min_inactive_time_s",
                     "p_activate_per_s", "p_deactivate_per_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Pending:
    target_mode: ControlMode
    due_time_s: float


@dataclass(frozen=True)
class ATState:
    mode: ControlMode = ControlMode.AUTOMATED
    pending: Optional[Pending] = None
    inactive_until_s: float = -math.inf


@dataclass(frozen=True)
class MandatoryDecision:
    target_mode: ControlMode
    path: DecisionPath


class LockoutViolation(Exception):
    """Automation requested before the post-takeover lockout expired."""


def mandatory_decide(events: Iterable[ATEvent], state: ATState) -> Optional[MandatoryDecision]:
    kinds = {e.kind for e in events}
    system = bool(kinds & SYSTEM_EVENTS)
    driver = ATEventKind.DRIVER_TAKEOVER_REQUEST in kinds
    if not (system or driver):
        return None
    if state.mode is ControlMode.MANUAL:
        return None
    return MandatoryDecision(ControlMode.MANUAL,
                             DecisionPath.SYSTEM if system else DecisionPath.DRIVER)


def discretionary_decide(state: ATState, rng: np.random.Generator, t_s: float, dt_s: float,
                         config: ATConfig) -> Optional[ControlMode]:
    """Random driver toggle; always draws one uniform so the stream stays aligned."""
    if state.mode is ControlMode.MANUAL:
        p, target = config.p_activate_per_s * dt_s, ControlMode.AUTOMATED
    else:
        p, target = config.p_deactivate_per_s * dt_s, ControlMode.MANUAL
    u = rng.random()
    if u >= p:
        return None
    if target is ControlMode.AUTOMATED and t_s < state.inactive_until_s - _EPS:
        return None
    return target


def apply_constraints(target_mode: ControlMode, state: ATState, t_s: float, dt_s: float,
                      config: ATConfig) -> ATState:
    """Schedule or realise a mode change.

    Automated -> Manual is deferred by the reaction time rounded up to the
    step grid; Manual -> Automated takes effect at once unless the lockout is
    still running, in which case :class:`LockoutViolation` is raised.
    """
    if target_mode is state.mode:
        raise ValueError(f"already in {target_mode.value} mode")
    if target_mode is ControlMode.MANUAL:
        steps = math.ceil(config.reaction_time_s / dt_s - _EPS)
        due = round(t_s + steps * dt_s, 9)
        if steps == 0:
            return _realize_manual(state, t_s, config)
        return replace(state, pending=Pending(ControlMode.MANUAL, due))
    if t_s < state.inactive_until_s - _EPS:
        raise LockoutViolation(
            f"activation at t={t_s:g} rejected; locked out until t={state.inactive_until_s:g}")
    return ATState(ControlMode.AUTOMATED, None, state.inactive_until_s)


def _realize_manual(state: ATState, t_s: float, config: ATConfig) -> ATState:
    return ATState(ControlMode.MANUAL, None, round(t_s + config.min_inactive_time_s, 9))


@dataclass(frozen=True)
class TickResult:
    state: ATState
    mode: ControlMode
    path: Optional[DecisionPath] = None
    rejected: Optional[str] = None


def tick(state: ATState, events: Iterable[ATEvent], rng: np.random.Generator,
         t_s: float, dt_s: float, config: ATConfig) -> TickResult:
    """Advance one truck's authority state by one step at time ``t_s``."""
    events = list(events)
    if state.pending is not None:
        if t_s >= state.pending.due_time_s - _EPS:
            new = _realize_manual(state, t_s, config)
            return TickResult(new, new.mode, DecisionPath.SYSTEM)
        # a pending handover outranks everything else until it is realised
        rejected = None
        if any(e.kind is ATEventKind.DRIVER_ACTIVATION_REQUEST for e in events):
            rejected = "activation rejected: manual handover pending"
        return TickResult(state, state.mode, None, rejected)

    decision = mandatory_decide(events, state)
    path = decision.path if decision else None
    target = decision.target_mode if decision else None
    if target is None:
        wants_activation = any(e.kind is ATEventKind.DRIVER_ACTIVATION_REQUEST for e in events)
        if wants_activation and state.mode is ControlMode.MANUAL:
            target, path = ControlMode.AUTOMATED, DecisionPath.DRIVER
        else:
            target = discretionary_decide(state, rng, t_s, dt_s, config)
            path = DecisionPath.DISCRETIONARY if target is not None else None
    if target is None or target is state.mode:
        return TickResult(state, state.mode)
    try:
        new = apply_constraints(target, state, t_s, dt_s, config)
    except LockoutViolation as exc:
        return TickResult(state, state.mode, None, str(exc))
    return TickResult(new, new.mode, path)

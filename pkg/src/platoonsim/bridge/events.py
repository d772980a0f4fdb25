"""EVENT payloads for simulator events."""

from __future__ import annotations

from ..core import ControlMode, PlatoonState
from ..simulator import InsertionEvent, SimEvent, StatusUpdate
from .protocol import Event


def event_to_params(event: SimEvent) -> tuple[str, dict]:
    if isinstance(event, InsertionEvent):
        return "insertion", {
            "at_time_s": event.at_time_s,
            "target_platoon_id": event.target_platoon_id,
            "insert_after_index": event.insert_after_index,
            "intruder_speed_mps": event.intruder_speed_mps,
            "intruder_length_m": event.intruder_length_m,
        }
    if isinstance(event, StatusUpdate):
        return "status", {
            "vehicle_id": event.vehicle_id,
            "control_mode": event.control_mode.value,
            "platoon_state": event.platoon_state.value,
            "platoon_id": event.platoon_id,
            "position_in_platoon": event.position_in_platoon,
        }
    raise TypeError(f"unsupported event {event!r}")


def event_from_message(msg: Event) -> SimEvent:
    p = msg.params
    try:
        if msg.kind == "insertion":
            return InsertionEvent(
                at_time_s=float(p["at_time_s"]),
                target_platoon_id=int(p["target_platoon_id"]),
                insert_after_index=int(p["insert_after_index"]),
                intruder_speed_mps=float(p["intruder_speed_mps"]),
                intruder_length_m=float(p["intruder_length_m"]))
        if msg.kind == "status":
            return StatusUpdate(
                vehicle_id=int(p["vehicle_id"]),
                control_mode=ControlMode(p["control_mode"]),
                platoon_state=PlatoonState(p["platoon_state"]),
                platoon_id=None if p["platoon_id"] is None else int(p["platoon_id"]),
                position_in_platoon=(None if p["position_in_platoon"] is None
                                     else int(p["position_in_platoon"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"bad {msg.kind} event parameters: {exc}") from exc
    raise ValueError(f"unknown event kind {msg.kind!r}")

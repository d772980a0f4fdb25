"""Framed message protocol for lockstep co-simulation.

A frame is a 4-byte big-endian payload length followed by a UTF-8 JSON
document. Field order inside each document is fixed, and floats use the
shortest repr that round-trips, so encoding is canonical and bit-exact.
"""

from __future__ import annotations

import json
import math
import socket
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Union

from ..core import CommandRecord, ControlMode, PlatoonState, VehicleKind, VehicleState

PROTOCOL_VERSION = "1"
HEADER = struct.Struct(">I")
MAX_PAYLOAD = 16 * 1024 * 1024

ERROR_CODES = ("version", "out-of-phase", "malformed", "unknown-tag",
               "invalid-state", "oversize", "internal")

VEHICLE_FIELDS = ("id", "kind", "position_m", "speed_mps", "accel_mps2", "length_m",
                  "lane", "platoon_id", "platoon_state", "control_mode", "position_in_platoon")
COMMAND_FIELDS = ("vehicle_id", "accel_cmd_mps2", "issued_at_s")


class ProtocolError(Exception):
    def __init__(self, code: str, detail: str = ""):
        if code not in ERROR_CODES:
            raise ValueError(f"unknown error code {code!r}")
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class InvalidMessage(ValueError):
    pass


@dataclass(frozen=True)
class Hello:
    protocol_version: str
    dt_s: float
    seq: int = 0


@dataclass(frozen=True)
class HelloAck:
    protocol_version: str
    seq: int = 0


@dataclass(frozen=True)
class QueryState:
    t_s: float
    seq: int = 0


@dataclass(frozen=True)
class State:
    t_s: float
    vehicles: tuple[VehicleState, ...] = ()
    seq: int = 0


@dataclass(frozen=True)
class Apply:
    t_s: float
    commands: tuple[CommandRecord, ...] = ()
    seq: int = 0


@dataclass(frozen=True)
class Step:
    dt_s: float
    seq: int = 0


@dataclass(frozen=True)
class Stepped:
    t_s: float
    seq: int = 0


@dataclass(frozen=True)
class Event:
    kind: str
    params: dict = field(default_factory=dict)
    seq: int = 0


@dataclass(frozen=True)
class Error:
    code: str
    detail: str = ""
    seq: int = 0


@dataclass(frozen=True)
class Bye:
    seq: int = 0


Message = Union[Hello, HelloAck, QueryState, State, Apply, Step, Stepped, Event, Error, Bye]

TAGS: dict[type, str] = {
    Hello: "HELLO", HelloAck: "HELLO_ACK", QueryState: "QUERY_STATE", State: "STATE",
    Apply: "APPLY", Step: "STEP", Stepped: "STEPPED", Event: "EVENT", Error: "ERROR", Bye: "BYE",
}
TYPES = {tag: cls for cls, tag in TAGS.items()}


# -- documents --------------------------------------------------------------

def _finite(x: Any, name: str) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InvalidMessage(f"{name} must be a number")
    x = float(x)
    if not math.isfinite(x):
        raise InvalidMessage(f"{name} must be finite")
    return x


def _int(x: Any, name: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise InvalidMessage(f"{name} must be an integer")
    return x


def _opt_int(x: Any, name: str) -> Optional[int]:
    return None if x is None else _int(x, name)


def vehicle_to_doc(v: VehicleState) -> dict:
    return {
        "id": v.id, "kind": v.kind.value, "position_m": v.position_m,
        "speed_mps": v.speed_mps, "accel_mps2": v.accel_mps2, "length_m": v.length_m,
        "lane": v.lane, "platoon_id": v.platoon_id, "platoon_state": v.platoon_state.value,
        "control_mode": v.control_mode.value, "position_in_platoon": v.position_in_platoon,
    }


def vehicle_from_doc(d: Any) -> VehicleState:
    if not isinstance(d, dict) or tuple(d) != VEHICLE_FIELDS:
        raise InvalidMessage(f"vehicle document must have fields {VEHICLE_FIELDS}")
    try:
        return VehicleState(
            id=_int(d["id"], "id"), kind=VehicleKind(d["kind"]),
            position_m=_finite(d["position_m"], "position_m"),
            speed_mps=_finite(d["speed_mps"], "speed_mps"),
            accel_mps2=_finite(d["accel_mps2"], "accel_mps2"),
            length_m=_finite(d["length_m"], "length_m"), lane=_int(d["lane"], "lane"),
            platoon_id=_opt_int(d["platoon_id"], "platoon_id"),
            platoon_state=PlatoonState(d["platoon_state"]),
            control_mode=ControlMode(d["control_mode"]),
            position_in_platoon=_opt_int(d["position_in_platoon"], "position_in_platoon"))
    except (ValueError, TypeError) as exc:
        raise InvalidMessage(str(exc)) from exc


def command_to_doc(c: CommandRecord) -> dict:
    return {"vehicle_id": c.vehicle_id, "accel_cmd_mps2": c.accel_cmd_mps2,
            "issued_at_s": c.issued_at_s}


def command_from_doc(d: Any) -> CommandRecord:
    if not isinstance(d, dict) or tuple(d) != COMMAND_FIELDS:
        raise InvalidMessage(f"command document must have fields {COMMAND_FIELDS}")
    try:
        return CommandRecord(_int(d["vehicle_id"], "vehicle_id"),
                             _finite(d["accel_cmd_mps2"], "accel_cmd_mps2"),
                             _finite(d["issued_at_s"], "issued_at_s"))
    except (ValueError, TypeError) as exc:
        raise InvalidMessage(str(exc)) from exc


def to_document(msg: Message) -> dict:
    tag = TAGS.get(type(msg))
    if tag is None:
        raise InvalidMessage(f"not a protocol message: {msg!r}")
    doc: dict[str, Any] = {"type": tag, "seq": _int(msg.seq, "seq")}
    if isinstance(msg, Hello):
        doc.update(protocol_version=str(msg.protocol_version), dt_s=_finite(msg.dt_s, "dt_s"))
    elif isinstance(msg, HelloAck):
        doc.update(protocol_version=str(msg.protocol_version))
    elif isinstance(msg, (QueryState, Stepped)):
        doc.update(t_s=_finite(msg.t_s, "t_s"))
    elif isinstance(msg, State):
        doc.update(t_s=_finite(msg.t_s, "t_s"), vehicles=[vehicle_to_doc(v) for v in msg.vehicles])
    elif isinstance(msg, Apply):
        doc.update(t_s=_finite(msg.t_s, "t_s"), commands=[command_to_doc(c) for c in msg.commands])
    elif isinstance(msg, Step):
        doc.update(dt_s=_finite(msg.dt_s, "dt_s"))
    elif isinstance(msg, Event):
        if not isinstance(msg.params, dict):
            raise InvalidMessage("EVENT params must be a mapping")
        doc.update(kind=str(msg.kind), params=msg.params)
    elif isinstance(msg, Error):
        if msg.code not in ERROR_CODES:
            raise InvalidMessage(f"unknown error code {msg.code!r}")
        doc.update(code=msg.code, detail=str(msg.detail))
    return doc


_BODY_FIELDS = {
    "HELLO": ("protocol_version", "dt_s"), "HELLO_ACK": ("protocol_version",),
    "QUERY_STATE": ("t_s",), "STATE": ("t_s", "vehicles"), "APPLY": ("t_s", "commands"),
    "STEP": ("dt_s",), "STEPPED": ("t_s",), "EVENT": ("kind", "params"),
    "ERROR": ("code", "detail"), "BYE": (),
}


def from_document(doc: Any) -> Message:
    if not isinstance(doc, dict) or "type" not in doc:
        raise ProtocolError("malformed", "message document lacks a type tag")
    tag = doc["type"]
    if tag not in TYPES:
        raise ProtocolError("unknown-tag", f"unknown message type {tag!r}")
    expected = ("type", "seq") + _BODY_FIELDS[tag]
    if tuple(doc) != expected:
        raise ProtocolError("malformed", f"{tag} fields must be {expected}, got {tuple(doc)}")
    try:
        seq = _int(doc["seq"], "seq")
        if tag == "HELLO":
            if not isinstance(doc["protocol_version"], str):
                raise InvalidMessage("protocol_version must be a string")
            return Hello(doc["protocol_version"], _finite(doc["dt_s"], "dt_s"), seq)
        if tag == "HELLO_ACK":
            if not isinstance(doc["protocol_version"], str):
                raise InvalidMessage("protocol_version must be a string")
            return HelloAck(doc["protocol_version"], seq)
        if tag == "QUERY_STATE":
            return QueryState(_finite(doc["t_s"], "t_s"), seq)
        if tag == "STATE":
            if not isinstance(doc["vehicles"], list):
                raise InvalidMessage("vehicles must be a list")
            return State(_finite(doc["t_s"], "t_s"),
                         tuple(vehicle_from_doc(v) for v in doc["vehicles"]), seq)
        if tag == "APPLY":
            if not isinstance(doc["commands"], list):
                raise InvalidMessage("commands must be a list")
            return Apply(_finite(doc["t_s"], "t_s"),
                         tuple(command_from_doc(c) for c in doc["commands"]), seq)
        if tag == "STEP":
            return Step(_finite(doc["dt_s"], "dt_s"), seq)
        if tag == "STEPPED":
            return Stepped(_finite(doc["t_s"], "t_s"), seq)
        if tag == "EVENT":
            if not isinstance(doc["kind"], str) or not isinstance(doc["params"], dict):
                raise InvalidMessage("EVENT needs a string kind and a params mapping")
            return Event(doc["kind"], doc["params"], seq)
        if tag == "ERROR":
            if doc["code"] not in ERROR_CODES or not isinstance(doc["detail"], str):
                raise InvalidMessage(f"bad ERROR document {doc!r}")
            return Error(doc["code"], doc["detail"], seq)
        return Bye(seq)
    except InvalidMessage as exc:
        raise ProtocolError("malformed", str(exc)) from exc


# -- frames -----------------------------------------------------------------

def encode(msg: Message) -> bytes:
    """Message -> length-prefixed frame bytes."""
    try:
        text = json.dumps(to_document(msg), separators=(",", ":"), allow_nan=False,
                          ensure_ascii=False)
    except ValueError as exc:
        raise InvalidMessage(str(exc)) from exc
    payload = text.encode("utf-8")
    if len(payload) > MAX_PAYLOAD:
        raise InvalidMessage(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Message:
    try:
        doc = json.loads(payload.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError, ValueError) as exc:
        raise ProtocolError("malformed", f"payload is not a JSON document: {exc}") from exc
    return from_document(doc)


def _reject_constant(name: str):
    raise ValueError(f"non-finite number {name} not allowed")


def decode(frame: bytes) -> Message:
    """Inverse of :func:`encode` for exactly one complete frame."""
    if len(frame) < HEADER.size:
        raise ProtocolError("malformed", "frame shorter than its length prefix")
    (length,) = HEADER.unpack_from(frame)
    if length > MAX_PAYLOAD:
        raise ProtocolError("oversize", f"declared payload {length} exceeds {MAX_PAYLOAD}")
    if len(frame) - HEADER.size != length:
        raise ProtocolError(
            "malformed", f"length prefix says {length} bytes, frame carries {len(frame) - HEADER.size}")
    return decode_payload(frame[HEADER.size:])


def iter_frames(data: bytes) -> Iterator[Message]:
    """Decode a byte string holding zero or more concatenated frames."""
    offset = 0
    while offset < len(data):
        if len(data) - offset < HEADER.size:
            raise ProtocolError("malformed", "trailing bytes shorter than a length prefix")
        (length,) = HEADER.unpack_from(data, offset)
        if length > MAX_PAYLOAD:
            raise ProtocolError("oversize", f"declared payload {length} exceeds {MAX_PAYLOAD}")
        end = offset + HEADER.size + length
        if end > len(data):
            raise ProtocolError("malformed", "truncated frame")
        yield decode_payload(data[offset + HEADER.size:end])
        offset = end


class ConnectionClosed(Exception):
    """Peer closed the socket cleanly between frames."""


def _recv_exact(sock: socket.socket, n: int, *, at_boundary: bool) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if at_boundary and not buf:
                raise ConnectionClosed()
            raise ProtocolError("malformed", f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def read_message(sock: socket.socket) -> Message:
    header = _recv_exact(sock, HEADER.size, at_boundary=True)
    (length,) = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError("oversize", f"declared payload {length} exceeds {MAX_PAYLOAD}")
    return decode_payload(_recv_exact(sock, length, at_boundary=False))


def write_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode(msg))


class SeqCounter:
    """Outgoing sequence numbers plus a monotonicity check on incoming ones."""

    def __init__(self):
        self._out = 0
        self._last_in = -1

    def next(self) -> int:
        self._out += 1
        return self._out

    def check(self, msg: Message) -> None:
        if msg.seq <= self._last_in:
            raise ProtocolError(
                "malformed", f"sequence number {msg.seq} does not exceed {self._last_in}")
        self._last_in = msg.seq

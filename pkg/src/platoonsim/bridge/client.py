"""Remote :class:`SimulatorHandle` speaking the framed protocol."""

from __future__ import annotations

import socket
from typing import Optional, Sequence

from ..core import CommandRecord, SimClock, Snapshot, UnknownVehicleError, to_step, validate_snapshot
from ..simulator import (
    ClockMismatchError,
    InvalidStateError,
    ManualVehicleError,
    SimEvent,
    SimulatorError,
    StepSizeError,
)
from .events import event_to_params
from .protocol import (
    PROTOCOL_VERSION,
    Apply,
    Bye,
    ConnectionClosed,
    Error,
    Event,
    Hello,
    HelloAck,
    Message,
    ProtocolError,
    QueryState,
    SeqCounter,
    State,
    Step,
    Stepped,
    read_message,
    write_message,
)

DEFAULT_TIMEOUT_S = 5.0

_REJECTIONS = {
    "ClockMismatchError": ClockMismatchError,
    "ManualVehicleError": ManualVehicleError,
    "InvalidStateError": InvalidStateError,
    "StepSizeError": StepSizeError,
}


class CoSimulationFault(Exception):
    """The remote simulator became unreachable or broke the protocol."""


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must look like HOST:PORT, got {endpoint!r}")
    return host, int(port)


class RemoteSimulator:
    """Client side of a session; mirrors :class:`ReferenceSimulator` call for call."""

    def __init__(self, sock: socket.socket, dt_s: float):
        self._sock = sock
        self.dt_s = dt_s
        self._seq = SeqCounter()
        self._clock = SimClock(0, dt_s)
        self.closed = False

    @property
    def clock(self) -> SimClock:
        return self._clock

    def _request(self, msg: Message) -> Message:
        if self.closed:
            raise CoSimulationFault("session already closed")
        try:
            write_message(self._sock, msg)
            reply = read_message(self._sock)
        except socket.timeout as exc:
            self._abort()
            raise CoSimulationFault(f"timed out waiting for reply to {type(msg).__name__}") from exc
        except (ConnectionClosed, OSError) as exc:
            self._abort()
            raise CoSimulationFault(f"connection lost during {type(msg).__name__}: {exc}") from exc
        except ProtocolError as exc:
            self._send_error(exc.code, exc.detail)
            raise CoSimulationFault(str(exc)) from exc
        try:
            self._seq.check(reply)
        except ProtocolError as exc:
            self._send_error(exc.code, exc.detail)
            raise CoSimulationFault(str(exc)) from exc
        if isinstance(reply, Error):
            self._raise_error(reply)
        return reply

    def _raise_error(self, err: Error):
        if err.code == "invalid-state":
            name, _, detail = err.detail.partition(": ")
            if name == "UnknownVehicleError":
                raise UnknownVehicleError(detail)
            cls = _REJECTIONS.get(name)
            if cls is not None:
                raise cls(detail)
        self._abort()
        raise CoSimulationFault(f"server error {err.code}: {err.detail}")

    def _expect(self, reply: Message, cls: type) -> Message:
        if not isinstance(reply, cls):
            self._send_error("out-of-phase", f"expected {cls.__name__}, got {type(reply).__name__}")
            raise CoSimulationFault(f"expected {cls.__name__}, got {type(reply).__name__}")
        return reply

    def _send_error(self, code: str, detail: str) -> None:
        try:
            write_message(self._sock, Error(code, detail, self._seq.next()))
        except OSError:
            pass
        self._abort()

    def _abort(self) -> None:
        self.closed = True
        try:
            self._sock.close()
        except OSError:
            pass

    def handshake(self) -> None:
        reply = self._expect(self._request(Hello(PROTOCOL_VERSION, self.dt_s, self._seq.next())),
                             HelloAck)
        if reply.protocol_version != PROTOCOL_VERSION:
            self._send_error("version", f"server answered version {reply.protocol_version!r}")
            raise CoSimulationFault("protocol version mismatch")

    def reset(self, seed: Optional[int]) -> None:
        self._state(self._request(Event("reset", {"seed": seed}, self._seq.next())))
        self._clock = SimClock(0, self.dt_s)

    def _state(self, reply: Message, validate: bool = True) -> State:
        state = self._expect(reply, State)
        if not validate:
            return state
        violations = validate_snapshot(state.vehicles)
        if violations:
            detail = "; ".join(f"{v.code}: {v.detail}" for v in violations)
            self._send_error("invalid-state", detail)
            raise CoSimulationFault(f"server sent an invalid state: {detail}")
        return state

    def query_state(self, t_s: float) -> Snapshot:
        state = self._state(self._request(QueryState(t_s, self._seq.next())))
        return Snapshot(SimClock(to_step(state.t_s, self.dt_s), self.dt_s), state.vehicles)

    def apply_commands(self, commands: Sequence[CommandRecord]) -> None:
        self._state(self._request(Apply(self._clock.t_s, tuple(commands), self._seq.next())),
                    validate=False)

    def step(self, dt_s: float) -> SimClock:
        reply = self._expect(self._request(Step(dt_s, self._seq.next())), Stepped)
        clock = self._clock.advanced()
        if abs(reply.t_s - clock.t_s) > 1e-9:
            self._send_error("invalid-state", f"STEPPED t={reply.t_s!r}, expected {clock.t_s!r}")
            raise CoSimulationFault("remote clock diverged")
        self._clock = clock
        return clock

    def inject_event(self, event: SimEvent) -> None:
        kind, params = event_to_params(event)
        self._state(self._request(Event(kind, params, self._seq.next())), validate=False)

    def close(self) -> None:
        if self.closed:
            return
        try:
            write_message(self._sock, Bye(self._seq.next()))
        except OSError:
            pass
        self._abort()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def connect(endpoint: str, dt_s: float, timeout_s: float = DEFAULT_TIMEOUT_S,
            seed: Optional[int] = None) -> RemoteSimulator:
    """Open a session; with ``seed`` the server rebuilds its simulator with that seed."""
    host, port = parse_endpoint(endpoint)
    try:
        sock = socket.create_connection((host, port), timeout=timeout_s)
    except OSError as exc:
        raise CoSimulationFault(f"cannot connect to {endpoint}: {exc}") from exc
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(timeout_s)
    handle = RemoteSimulator(sock, dt_s)
    handle.handshake()
    if seed is not None:
        handle.reset(seed)
    return handle

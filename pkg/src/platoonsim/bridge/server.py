"""Serve a simulator over the framed protocol.

One client per session, strict request/response. Each session gets a fresh
simulator from the factory, so sequential sessions never share state.
"""

from __future__ import annotations

import enum
import logging
import socket
from typing import Callable, Optional

from ..core import UnknownVehicleError
from ..simulator import SimulatorError, SimulatorHandle
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
from .events import event_from_message

log = logging.getLogger(__name__)

SimulatorFactory = Callable[[Optional[int]], SimulatorHandle]


class Phase(enum.Enum):
    AWAIT_HELLO = "AwaitHello"
    READY = "Ready"
    STEPPING = "Stepping"
    CLOSED = "Closed"


REQUESTS = (QueryState, Apply, Step, Event)


class Session:
    """Protocol state machine for one client, independent of any socket.

    :meth:`handle` takes one decoded request and returns the reply; after a
    protocol error or BYE the session is closed.
    """

    def __init__(self, factory: SimulatorFactory, dt_s: float):
        self.factory = factory
        self.dt_s = dt_s
        self.phase = Phase.AWAIT_HELLO
        self.negotiated_dt_s: Optional[float] = None
        self.last_t_s = 0.0
        self.simulator: Optional[SimulatorHandle] = None
        self._seq = SeqCounter()

    @property
    def closed(self) -> bool:
        return self.phase is Phase.CLOSED

    def fail(self, code: str, detail: str) -> Error:
        self.phase = Phase.CLOSED
        return Error(code, detail, self._seq.next())

    def handle(self, msg: Message) -> Optional[Message]:
        if self.closed:
            raise RuntimeError("session is closed")
        try:
            self._seq.check(msg)
        except ProtocolError as exc:
            return self.fail(exc.code, exc.detail)

        if isinstance(msg, Bye):
            self.phase = Phase.CLOSED
            return None
        if self.phase is Phase.AWAIT_HELLO:
            if not isinstance(msg, Hello):
                return self.fail("out-of-phase", f"{type(msg).__name__} before HELLO")
            if msg.protocol_version != PROTOCOL_VERSION:
                return self.fail("version", f"server speaks {PROTOCOL_VERSION}, "
                                            f"client sent {msg.protocol_version!r}")
            if abs(msg.dt_s - self.dt_s) > 1e-12:
                return self.fail("version", f"dt mismatch: server {self.dt_s!r}, client {msg.dt_s!r}")
            self.negotiated_dt_s = msg.dt_s
            self.simulator = self.factory(None)
            self.phase = Phase.READY
            return HelloAck(PROTOCOL_VERSION, self._seq.next())
        if not isinstance(msg, REQUESTS):
            return self.fail("out-of-phase", f"{type(msg).__name__} is not a request")

        sim = self.simulator
        try:
            if isinstance(msg, QueryState):
                snap = sim.query_state(msg.t_s)
                return State(snap.t_s, snap.vehicles, self._seq.next())
            if isinstance(msg, Apply):
                if abs(msg.t_s - sim.clock.t_s) > 1e-9:
                    return self._rejected("ClockMismatchError",
                                          f"APPLY for t={msg.t_s!r} at t={sim.clock.t_s!r}")
                sim.apply_commands(msg.commands)
                return self._ack()
            if isinstance(msg, Step):
                if abs(msg.dt_s - self.negotiated_dt_s) > 1e-12:
                    return self._rejected("StepSizeError",
                                          f"STEP dt={msg.dt_s!r} differs from negotiated "
                                          f"{self.negotiated_dt_s!r}")
                self.phase = Phase.STEPPING
                clock = sim.step(msg.dt_s)
                self.last_t_s = clock.t_s
                self.phase = Phase.READY
                return Stepped(clock.t_s, self._seq.next())
            # EVENT
            if msg.kind == "reset":
                seed = msg.params.get("seed")
                if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
                    return self.fail("malformed", "reset seed must be an integer")
                self.simulator = self.factory(seed)
                self.last_t_s = 0.0
                return self._ack()
            try:
                event = event_from_message(msg)
            except ValueError as exc:
                return self.fail("malformed", str(exc))
            sim.inject_event(event)
            return self._ack()
        except (SimulatorError, UnknownVehicleError) as exc:
            return self._rejected(type(exc).__name__, str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("simulator failure")
            return self.fail("internal", f"{type(exc).__name__}: {exc}")

    def _ack(self) -> State:
        # status updates arrive one per EVENT, so an acknowledgement may show
        # platoon membership half-way through a change; only QUERY_STATE validates
        sim = self.simulator
        peek = getattr(sim, "peek_state", None)
        snap = peek() if peek is not None else sim.query_state(sim.clock.t_s)
        return State(snap.t_s, snap.vehicles, self._seq.next())

    def _rejected(self, name: str, detail: str) -> Error:
        # simulator-level rejections leave the session usable
        if self.phase is Phase.STEPPING:
            self.phase = Phase.READY
        return Error("invalid-state", f"{name}: {detail}", self._seq.next())


def serve_connection(conn: socket.socket, factory: SimulatorFactory, dt_s: float) -> Session:
    session = Session(factory, dt_s)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    while not session.closed:
        try:
            msg = read_message(conn)
        except ConnectionClosed:
            log.info("client disconnected without BYE")
            session.phase = Phase.CLOSED
            break
        except ProtocolError as exc:
            reply = session.fail(exc.code, exc.detail)
            _try_send(conn, reply)
            break
        reply = session.handle(msg)
        if reply is not None:
            _try_send(conn, reply)
    return session


def _try_send(conn: socket.socket, msg: Message) -> None:
    try:
        write_message(conn, msg)
    except OSError as exc:
        log.info("could not send %s: %s", type(msg).__name__, exc)


def bind(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(1)
    return sock


def serve(factory: SimulatorFactory, dt_s: float, host: str = "127.0.0.1", port: int = 9000,
          max_sessions: Optional[int] = None, listener: Optional[socket.socket] = None,
          ready: Optional[Callable[[tuple], None]] = None) -> int:
    """Accept sessions one at a time until ``max_sessions`` have been served.

    Returns the number of sessions served. ``ready`` is called with the bound
    address once the socket listens.
    """
    sock = listener or bind(host, port)
    served = 0
    try:
        if ready is not None:
            ready(sock.getsockname())
        while max_sessions is None or served < max_sessions:
            conn, addr = sock.accept()
            log.info("session from %s:%s", *addr[:2])
            with conn:
                serve_connection(conn, factory, dt_s)
            served += 1
    finally:
        sock.close()
    return served

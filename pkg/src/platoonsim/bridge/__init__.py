"""Socket co-simulation bridge: wire protocol, server and client handle."""

from .client import CoSimulationFault, RemoteSimulator, connect
from .protocol import PROTOCOL_VERSION, ProtocolError, decode, encode, iter_frames
from .server import Session, serve

__all__ = ["CoSimulationFault", "RemoteSimulator", "connect", "PROTOCOL_VERSION",
           "ProtocolError", "decode", "encode", "iter_frames", "Session", "serve"]

"""Stream multiplexer for the tunnel-inner network.

Inside each tunnel the real devices run IPv6 with ordinary TCP listeners;
here a minimal mux over the tunnel's reliable record stream stands in.
Every inner packet is

    +-----+---------------+-------+-------------+
    | op  | connection id | port  | payload ... |
    | 1 B | 4 B BE        | 2 B BE|             |
    +-----+---------------+-------+-------------+

    op 1 SYN    open connection id toward port; the listening side echoes
                the SYN back as its accept (a SYN for an id we opened)
    op 2 DATA   bytes for an open connection
    op 3 FIN    orderly close
    op 4 RST    refused / aborted

The opener picks the connection id: odd ids from the watch, even from the
phone, so simultaneous opens never collide.  Well-known inner ports:

    61315  messaging control channel     (class C tunnel)
    61314  messaging data channels       (class C tunnel)
    62742  proxy requests                (class D tunnel)
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

__all__ = [
    "CONTROL_PORT",
    "DATA_PORT",
    "SHOES_PORT",
    "InnerConn",
    "InnerError",
    "InnerMux",
    "InnerPacket",
    "MuxClosed",
    "OP_DATA",
    "OP_FIN",
    "OP_RST",
    "OP_SYN",
    "ConnectionRefused",
    "decode_packet",
    "encode_packet",
]

OP_SYN = 1
OP_DATA = 2
OP_FIN = 3
OP_RST = 4

OP_NAMES = {OP_SYN: "SYN", OP_DATA: "DATA", OP_FIN: "FIN", OP_RST: "RST"}

CONTROL_PORT = 61315
DATA_PORT = 61314
SHOES_PORT = 62742

_HEADER = struct.Struct(">BIH")


class InnerError(Exception):
    pass


class MuxClosed(InnerError):
    pass


class ConnectionRefused(InnerError):
    pass


@dataclass
class InnerPacket:
    op: int
    conn_id: int
    port: int
    payload: bytes = b""


def encode_packet(packet: InnerPacket) -> bytes:
    return _HEADER.pack(packet.op, packet.conn_id, packet.port) + packet.payload


def decode_packet(data: bytes) -> InnerPacket:
    if len(data) < _HEADER.size:
        raise InnerError("inner packet shorter than its 7-byte header")
    op, conn_id, port = _HEADER.unpack_from(data)
    if op not in OP_NAMES:
        raise InnerError("unknown inner op %d" % op)
    return InnerPacket(op, conn_id, port, data[_HEADER.size:])


class InnerConn:
    """One bidirectional stream over the mux."""

    def __init__(self, mux: "InnerMux", conn_id: int, port: int):
        self.mux = mux
        self.conn_id = conn_id
        self.port = port
        self._chunks: list[bytes] = []
        self._have_data = threading.Condition()
        self._remote_closed = False
        self._local_closed = False
        self._reset = False

    def send(self, data: bytes) -> None:
        if self._local_closed or self._reset:
            raise MuxClosed("connection %d closed" % self.conn_id)
        self.mux._emit(InnerPacket(OP_DATA, self.conn_id, self.port, data))

    def recv(self, timeout: float | None = None) -> bytes:
        """Next chunk; b'' once the peer finished, MuxClosed after reset."""
        with self._have_data:
            if not self._chunks and not self._remote_closed and not self._reset:
                self._have_data.wait(timeout)
            if self._chunks:
                return self._chunks.pop(0)
            if self._reset:
                raise MuxClosed("connection %d reset" % self.conn_id)
            if self._remote_closed:
                return b""
            raise InnerError("recv timed out on connection %d" % self.conn_id)

    def recv_all(self, timeout: float | None = None) -> bytes:
        """Drain until FIN."""
        out = bytearray()
        while True:
            chunk = self.recv(timeout)
            if chunk == b"":
                return bytes(out)
            out += chunk

    def unrecv(self, data: bytes) -> None:
        """Push bytes back so the next recv returns them first."""
        if data:
            with self._have_data:
                self._chunks.insert(0, data)
                self._have_data.notify_all()

    def close(self) -> None:
        if not self._local_closed and not self._reset:
            self._local_closed = True
            self.mux._emit(InnerPacket(OP_FIN, self.conn_id, self.port))

    def reset(self) -> None:
        if not self._reset:
            self._reset = True
            self.mux._emit(InnerPacket(OP_RST, self.conn_id, self.port))

    # mux-side delivery -------------------------------------------------------

    def _deliver(self, payload: bytes) -> None:
        with self._have_data:
            self._chunks.append(payload)
            self._have_data.notify_all()

    def _peer_fin(self) -> None:
        with self._have_data:
            self._remote_closed = True
            self._have_data.notify_all()

    def _peer_rst(self) -> None:
        with self._have_data:
            self._reset = True
            self._have_data.notify_all()


class InnerMux:
    """Demultiplexes inner packets into connections and listener queues.

    The owner wires `send_packet` to the tunnel's seal+transmit path and
    feeds every received inner packet into `handle_packet`.  Listeners are
    callables registered per port: listener(conn) runs on the delivery
    thread, so implementations hand real work elsewhere.
    """

    def __init__(self, side: str, send_packet):
        if side not in ("phone", "watch"):
            raise ValueError("side must be 'phone' or 'watch'")
        self.side = side
        self.send_packet = send_packet
        self._next_id = 2 if side == "phone" else 1
        self._conns: dict[int, InnerConn] = {}
        self._listeners: dict[int, object] = {}
        self._pending_accept: dict[int, threading.Event] = {}
        self._refused: set[int] = set()
        self._lock = threading.Lock()

    def listen(self, port: int, handler) -> None:
        self._listeners[port] = handler

    def connect(self, port: int, timeout: float | None = 5.0) -> InnerConn:
        with self._lock:
            conn_id = self._next_id
            self._next_id += 2
            conn = InnerConn(self, conn_id, port)
            self._conns[conn_id] = conn
            accepted = threading.Event()
            self._pending_accept[conn_id] = accepted
        self._emit(InnerPacket(OP_SYN, conn_id, port))
        if not accepted.wait(timeout):
            with self._lock:
                self._pending_accept.pop(conn_id, None)
                self._conns.pop(conn_id, None)
            raise InnerError("connect to inner port %d timed out" % port)
        with self._lock:
            self._pending_accept.pop(conn_id, None)
            if conn_id in self._refused:
                self._refused.discard(conn_id)
                self._conns.pop(conn_id, None)
                raise ConnectionRefused("inner port %d refused" % port)
        return conn

    def _emit(self, packet: InnerPacket) -> None:
        self.send_packet(encode_packet(packet))

    def handle_packet(self, data: bytes) -> None:
        packet = decode_packet(data)
        with self._lock:
            conn = self._conns.get(packet.conn_id)
            waiter = self._pending_accept.get(packet.conn_id)
        if packet.op == OP_SYN:
            if waiter is not None:
                waiter.set()      # our own SYN echoed back: accepted
            else:
                self._handle_syn(packet)
            return
        if conn is None:
            return  # late packet for a dead connection: drop
        if packet.op == OP_DATA:
            conn._deliver(packet.payload)
        elif packet.op == OP_FIN:
            conn._peer_fin()
        elif packet.op == OP_RST:
            if waiter is not None:
                with self._lock:
                    self._refused.add(packet.conn_id)
                waiter.set()
            conn._peer_rst()

    def _handle_syn(self, packet: InnerPacket) -> None:
        handler = self._listeners.get(packet.port)
        if handler is None:
            self._emit(InnerPacket(OP_RST, packet.conn_id, packet.port))
            return
        conn = InnerConn(self, packet.conn_id, packet.port)
        with self._lock:
            self._conns[packet.conn_id] = conn
        self._emit(InnerPacket(OP_SYN, packet.conn_id, packet.port))
        handler(conn)

    def forget(self, conn: InnerConn) -> None:
        with self._lock:
            self._conns.pop(conn.conn_id, None)

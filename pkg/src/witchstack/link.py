"""Virtual link: the Bluetooth stand-in carrying magnet and link frames.

One reliable loopback TCP connection plays the radio link.  Every frame
travels length-delimited with two free-running counter bytes in front:

    +----------+-----+----------+------------------+
    | length   | seq | received | frame bytes ...  |
    | 4 B BE   | 1 B | 1 B      |                  |
    +----------+-----+----------+------------------+

length counts seq ‖ received ‖ frame.  seq increments per sent frame mod
256; received mirrors how many frames this side has accepted, mod 256.

A fresh connection starts with a short channel-negotiation prelude spoken
in magnet messages (create channel 0x03 -> accept 0x04 / error 0x08);
afterwards the link carries link-layer frames only.

Optionally every frame is appended to a transcript, one record per frame:

    timestamp  8 B big-endian, microseconds
    direction  1 B: 0 = traveling to the watch, 1 = to the phone
    length     4 B big-endian
    raw        length bytes: seq ‖ received ‖ frame

The transcript is the dissector's native input format.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass

from .magnet import (
    OP_ACCEPT_CHANNEL,
    OP_CREATE_CHANNEL,
    OP_ERROR_RESPONSE,
    MagnetMessage,
    ServiceRejected,
    Timeout,
    magnet_decode,
    magnet_encode,
)

__all__ = [
    "DIRECTION_TO_PHONE",
    "DIRECTION_TO_WATCH",
    "LinkClosed",
    "TranscriptRecord",
    "TranscriptWriter",
    "VirtualLink",
    "advertise_services",
    "link_pair",
    "negotiate_service_channel",
    "read_transcript",
]

DIRECTION_TO_WATCH = 0
DIRECTION_TO_PHONE = 1

_LENGTH = struct.Struct(">I")
_RECORD_HEADER = struct.Struct(">QBI")

MAX_FRAME = 1 << 20  # sanity bound; nothing legitimate comes close


class LinkClosed(Exception):
    pass


@dataclass
class TranscriptRecord:
    timestamp_us: int
    direction: int
    raw: bytes            # seq ‖ received ‖ frame

    @property
    def frame(self) -> bytes:
        return self.raw[2:]


class TranscriptWriter:
    """Appends frame records to a binary stream; safe across threads."""

    def __init__(self, sink, clock=None):
        if isinstance(sink, str):
            sink = open(sink, "wb")
            self._owns = True
        else:
            self._owns = False
        self._sink = sink
        self._clock = clock or (lambda: time.time_ns() // 1000)
        self._lock = threading.Lock()

    def record(self, direction: int, raw: bytes) -> None:
        header = _RECORD_HEADER.pack(self._clock(), direction, len(raw))
        with self._lock:
            if self._sink.closed:
                return          # teardown race: a reader thread may still drain
            self._sink.write(header + raw)
            self._sink.flush()

    def close(self) -> None:
        with self._lock:
            if self._owns:
                self._sink.close()


def read_transcript(source) -> list[TranscriptRecord]:
    """Accepts a path, a readable stream, or the raw transcript bytes."""
    if isinstance(source, str):
        with open(source, "rb") as handle:
            data = handle.read()
    elif isinstance(source, bytes):
        data = source
    else:
        data = source.read()
    records, offset = [], 0
    while offset + _RECORD_HEADER.size <= len(data):
        timestamp, direction, length = _RECORD_HEADER.unpack_from(data, offset)
        offset += _RECORD_HEADER.size
        raw = data[offset:offset + length]
        if len(raw) < length:
            break  # truncated tail record
        offset += length
        records.append(TranscriptRecord(timestamp, direction, raw))
    return records


class VirtualLink:
    """One side of a connected link; owned by one reader and one writer."""

    def __init__(self, sock: socket.socket, role: str,
                 transcript: TranscriptWriter | None = None):
        if role not in ("phone", "watch"):
            raise ValueError("role must be 'phone' or 'watch'")
        self.sock = sock
        self.role = role
        self.transcript = transcript
        self.send_seq = 0
        self.packets_received = 0
        self._send_direction = (DIRECTION_TO_WATCH if role == "phone"
                                else DIRECTION_TO_PHONE)
        self._send_lock = threading.Lock()
        self._recv_buffer = b""
        self._closed = False

    # -- wire ---------------------------------------------------------------

    def send_frame(self, frame: bytes) -> None:
        with self._send_lock:
            raw = bytes([self.send_seq & 0xFF, self.packets_received & 0xFF]) + frame
            self.send_seq = (self.send_seq + 1) & 0xFF
            try:
                self.sock.sendall(_LENGTH.pack(len(raw)) + raw)
            except OSError as exc:
                raise LinkClosed(str(exc)) from exc
        if self.transcript is not None:
            self.transcript.record(self._send_direction, raw)

    def recv_frame(self, timeout: float | None = None) -> bytes:
        header = self._read_exact(_LENGTH.size, timeout)
        (length,) = _LENGTH.unpack(header)
        if not 2 <= length <= MAX_FRAME:
            raise LinkClosed("implausible frame length %d" % length)
        raw = self._read_exact(length, timeout)
        self.packets_received = (self.packets_received + 1) & 0xFF
        if self.transcript is not None:
            self.transcript.record(self._send_direction ^ 1, raw)
        return raw[2:]

    def _read_exact(self, want: int, timeout: float | None) -> bytes:
        self.sock.settimeout(timeout)
        while len(self._recv_buffer) < want:
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout as exc:
                raise Timeout("no frame within %.1fs" % (timeout or 0)) from exc
            except OSError as exc:
                raise LinkClosed(str(exc)) from exc
            if not chunk:
                raise LinkClosed("peer closed the link")
            self._recv_buffer += chunk
        out, self._recv_buffer = self._recv_buffer[:want], self._recv_buffer[want:]
        return out

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


def link_pair(transcript: TranscriptWriter | None = None
              ) -> tuple[VirtualLink, VirtualLink]:
    """Connected (phone, watch) links over a socketpair; phone side records."""
    phone_sock, watch_sock = socket.socketpair()
    return (VirtualLink(phone_sock, "phone", transcript),
            VirtualLink(watch_sock, "watch"))


# --- magnet prelude ------------------------------------------------------------

def negotiate_service_channel(link: VirtualLink, service_name: str,
                              timeout: float = 5.0) -> str:
    """Request a named channel; returns the name once the peer accepts."""
    link.send_frame(magnet_encode(MagnetMessage(
        OP_CREATE_CHANNEL, service_name.encode("utf-8"))))
    reply = magnet_decode(link.recv_frame(timeout))
    if reply.opcode == OP_ACCEPT_CHANNEL and reply.body == service_name.encode("utf-8"):
        return service_name
    if reply.opcode == OP_ERROR_RESPONSE:
        raise ServiceRejected("peer refused service %r" % service_name)
    raise ServiceRejected("unexpected reply opcode 0x%02x" % reply.opcode)


def advertise_services(link: VirtualLink, services: frozenset[str] | set[str],
                       timeout: float = 5.0) -> str:
    """Answer one channel request; returns the accepted service name."""
    request = magnet_decode(link.recv_frame(timeout))
    if request.opcode != OP_CREATE_CHANNEL:
        raise ServiceRejected("expected create channel, got 0x%02x" % request.opcode)
    name = request.body.decode("utf-8", "replace")
    if name in services:
        link.send_frame(magnet_encode(MagnetMessage(OP_ACCEPT_CHANNEL, request.body)))
        return name
    link.send_frame(magnet_encode(MagnetMessage(OP_ERROR_RESPONSE, request.body)))
    raise ServiceRejected("refused unknown service %r" % name)

"""Channel negotiation message codec.

Magnet messages are a bare opcode byte followed by an opaque body:

    +--------+----------+
    | opcode | body ... |
    +--------+----------+

Only the opcodes below are accepted; anything else is a decode error. The
virtual link speaks this protocol during its connection prelude to agree on
a service channel, after that the stream switches to link frames.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "MagnetMessage",
    "MagnetError",
    "UnknownOpcode",
    "ServiceRejected",
    "Timeout",
    "magnet_encode",
    "magnet_decode",
    "OPCODE_NAMES",
]

OP_REMOTE_SERVICES = 0x01
OP_REMOTE_SERVICES_RESPONSE = 0x02
OP_CREATE_CHANNEL = 0x03
OP_ACCEPT_CHANNEL = 0x04
OP_SERVICE_ADDED = 0x05
OP_SERVICE_REMOVED = 0x06
OP_SERVICE_REMOVED_ACK = 0x07
OP_ERROR_RESPONSE = 0x08
OP_VERSION_INFO = 0x09
OP_TIME_SYNC_CORRECTION = 0x70
OP_TIME_DATA_1 = 0x71
OP_TIME_DATA_2 = 0x72
OP_DID_INFO = 0x90
OP_CL_DATA = 0x91

OPCODE_NAMES = {
    OP_REMOTE_SERVICES: "remote services",
    OP_REMOTE_SERVICES_RESPONSE: "remote services response",
    OP_CREATE_CHANNEL: "create channel for service",
    OP_ACCEPT_CHANNEL: "accept channel for service",
    OP_SERVICE_ADDED: "service added",
    OP_SERVICE_REMOVED: "service removed",
    OP_SERVICE_REMOVED_ACK: "service removed acknowledge",
    OP_ERROR_RESPONSE: "error response",
    OP_VERSION_INFO: "version info",
    OP_TIME_SYNC_CORRECTION: "send time sync correction",
    OP_TIME_DATA_1: "time data",
    OP_TIME_DATA_2: "time data",
    OP_DID_INFO: "DID info",
    OP_CL_DATA: "CL data",
}


class MagnetError(Exception):
    """Base class for negotiation errors."""


class UnknownOpcode(MagnetError):
    """Opcode byte is not in the message table."""


class ServiceRejected(MagnetError):
    """Responder answered a channel request with an error response."""


class Timeout(MagnetError):
    """Responder did not answer within the deadline."""


@dataclass
class MagnetMessage:
    opcode: int
    body: bytes = b""

    @property
    def opcode_name(self) -> str:
        return OPCODE_NAMES.get(self.opcode, "unknown")


def magnet_encode(msg: MagnetMessage) -> bytes:
    if msg.opcode not in OPCODE_NAMES:
        raise UnknownOpcode("opcode 0x%02x" % msg.opcode)
    return bytes([msg.opcode]) + msg.body


def magnet_decode(buf: bytes) -> MagnetMessage:
    if not buf:
        raise UnknownOpcode("empty message")
    opcode = buf[0]
    if opcode not in OPCODE_NAMES:
        raise UnknownOpcode("opcode 0x%02x" % opcode)
    return MagnetMessage(opcode, bytes(buf[1:]))

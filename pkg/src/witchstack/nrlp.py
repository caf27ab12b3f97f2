"""Link-layer frame codec for the watch/phone virtual link.

Every frame is a fixed five-byte envelope around a variable payload:

    +------+--------+-------------+----------+
    | type | length | payload ... | checksum |
    | 1 B  | 2 B BE | `length` B  | 2 B BE   |
    +------+--------+-------------+----------+

Two checksum regimes exist, selected by the type byte. Types below 0x64 use
the RFC 1071 Internet checksum computed over type, length, and payload.
Types from 0x64 upward use an XOR of the header fields only:

    checksum_high = length_high XOR (type >> 4)
    checksum_low  = length_low  XOR ((type << 4) mod 256)

The echo service (type 0x05) answers a ping payload starting with 0x01 with
an identical pong whose first byte is 0x02.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

__all__ = [
    "NrlpFrame",
    "FrameDecoder",
    "NrlpError",
    "PayloadTooLarge",
    "ChecksumMismatch",
    "TruncatedFrame",
    "UnknownType",
    "NotAPing",
    "nrlp_encode",
    "nrlp_decode",
    "nrlp_checksum",
    "internet_checksum",
    "coverage",
    "echo_reply",
    "TYPE_NAMES",
]

TYPE_PAD0 = 0x00
TYPE_PADN = 0x01
TYPE_UNCOMPRESSED_IP = 0x02
TYPE_ENCAPSULATED_6LOWPAN = 0x03
TYPE_IKEV2 = 0x04
TYPE_ECHO = 0x05
TYPE_ESP = 0x64
TYPE_ESP_ECT0 = 0x65
TYPE_TCP = 0x66
TYPE_TCP_ECT0 = 0x67
TYPE_ESP_CLASSC = 0x68
TYPE_ESP_CLASSC_ECT0 = 0x69

TYPE_NAMES = {
    TYPE_PAD0: "Pad0",
    TYPE_PADN: "PadN",
    TYPE_UNCOMPRESSED_IP: "UncompressedIP",
    TYPE_ENCAPSULATED_6LOWPAN: "Encapsulated6LoWPAN",
    TYPE_IKEV2: "IKEv2",
    TYPE_ECHO: "EchoService",
    TYPE_ESP: "ESP",
    TYPE_ESP_ECT0: "ESP_ECT0",
    TYPE_TCP: "TCP",
    TYPE_TCP_ECT0: "TCP_ECT0",
    TYPE_ESP_CLASSC: "ESP_ClassC",
    TYPE_ESP_CLASSC_ECT0: "ESP_ClassC_ECT0",
}

# boundary between the two checksum regimes
_XOR_CHECKSUM_FLOOR = 0x64

PING = 0x01
PONG = 0x02


class NrlpError(Exception):
    """Base class for frame codec errors."""


class PayloadTooLarge(NrlpError):
    """Payload does not fit the 16-bit length field."""


class ChecksumMismatch(NrlpError):
    """Frame trailer does not match the computed checksum."""

    def __init__(self, msg: str, consumed: int):
        super().__init__(msg)
        self.consumed = consumed


class TruncatedFrame(NrlpError):
    """Buffer ends before the frame does; feed more bytes."""


class UnknownType(NrlpError):
    """Type byte outside the known set (strict decoding only)."""


class NotAPing(NrlpError):
    """Echo payload does not start with the ping byte."""


@dataclass
class NrlpFrame:
    frame_type: int
    payload: bytes = b""
    # trailer value as seen on the wire; derived, so excluded from equality
    checksum: int | None = field(default=None, compare=False)

    @property
    def type_name(self) -> str:
        return TYPE_NAMES.get(self.frame_type, "Unknown(0x%02x)" % self.frame_type)


def internet_checksum(data: bytes) -> int:
    """RFC 1071 checksum: one's-complement of the one's-complement sum."""
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for (word,) in struct.iter_unpack(">H", data):
        total += word
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def coverage(frame_type: int, payload: bytes) -> bytes:
    """Bytes covered by the RFC 1071 regime: type, length, payload."""
    return struct.pack(">BH", frame_type, len(payload)) + payload


def nrlp_checksum(frame_type: int, length: int, covered: bytes = b"") -> int:
    """Checksum for a frame of the given type and length.

    Types below 0x64 use RFC 1071 over `covered`, which callers build with
    coverage(). Higher types use the XOR construction over the header
    fields only and ignore `covered`.
    """
    if frame_type < _XOR_CHECKSUM_FLOOR:
        return internet_checksum(covered)
    high = (length >> 8) ^ (frame_type >> 4)
    low = (length & 0xFF) ^ ((frame_type << 4) & 0xFF)
    return (high << 8) | low


def nrlp_encode(frame: NrlpFrame) -> bytes:
    if len(frame.payload) > 0xFFFF:
        raise PayloadTooLarge("payload is %d bytes, limit 65535" % len(frame.payload))
    checksum = nrlp_checksum(
        frame.frame_type, len(frame.payload), coverage(frame.frame_type, frame.payload)
    )
    return (
        struct.pack(">BH", frame.frame_type, len(frame.payload))
        + frame.payload
        + struct.pack(">H", checksum)
    )


def nrlp_decode(buf: bytes, strict: bool = False) -> tuple[NrlpFrame, int]:
    """Decode one frame from the head of buf, returning (frame, consumed).

    Raises TruncatedFrame when the buffer holds less than a whole frame,
    ChecksumMismatch when the trailer is wrong (with .consumed set so a
    caller may skip the corrupt frame), and UnknownType for unknown type
    bytes when strict.
    """
    if len(buf) < 5:
        raise TruncatedFrame("need at least 5 bytes, have %d" % len(buf))
    frame_type, length = struct.unpack_from(">BH", buf)
    total = 3 + length + 2
    if len(buf) < total:
        raise TruncatedFrame("need %d bytes, have %d" % (total, len(buf)))
    payload = bytes(buf[3 : 3 + length])
    (wire_sum,) = struct.unpack_from(">H", buf, 3 + length)
    expect = nrlp_checksum(frame_type, length, coverage(frame_type, payload))
    if wire_sum != expect:
        raise ChecksumMismatch(
            "checksum 0x%04x, expected 0x%04x" % (wire_sum, expect), consumed=total
        )
    if strict and frame_type not in TYPE_NAMES:
        raise UnknownType("type byte 0x%02x" % frame_type)
    return NrlpFrame(frame_type, payload, checksum=wire_sum), total


class FrameDecoder:
    """Stateful decoder that reassembles frames from a byte stream.

    Frames may arrive fragmented or several per buffer. Corrupt frames are
    dropped and counted rather than raised.
    """

    def __init__(self, strict: bool = False):
        self._buf = bytearray()
        self.strict = strict
        self.dropped = 0
        self.rejected_types = 0

    def feed(self, data: bytes) -> list[NrlpFrame]:
        self._buf.extend(data)
        frames: list[NrlpFrame] = []
        while True:
            try:
                frame, used = nrlp_decode(bytes(self._buf), strict=self.strict)
            except TruncatedFrame:
                break
            except ChecksumMismatch as exc:
                self.dropped += 1
                del self._buf[: exc.consumed]
                continue
            except UnknownType:
                # strict mode: length and checksum were fine, skip the frame
                self.rejected_types += 1
                _, length = struct.unpack_from(">BH", self._buf)
                del self._buf[: 3 + length + 2]
                continue
            frames.append(frame)
            del self._buf[:used]
        return frames

    @property
    def pending(self) -> int:
        return len(self._buf)


def echo_reply(frame: NrlpFrame) -> NrlpFrame:
    """Pong for a ping on the echo service, payload otherwise identical."""
    if frame.frame_type != TYPE_ECHO:
        raise NotAPing("frame type 0x%02x is not the echo service" % frame.frame_type)
    if not frame.payload or frame.payload[0] != PING:
        raise NotAPing("payload does not start with 0x01")
    return NrlpFrame(TYPE_ECHO, bytes([PONG]) + frame.payload[1:])

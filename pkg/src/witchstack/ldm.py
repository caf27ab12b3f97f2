"""Link director messages and the private notify payload registry.

A link director message (LDM) travels inside notify payload type 50702 and
carries link signaling TLVs, most importantly Wi-Fi address updates:

    +---------+------+--------+--------------+------------+----------+
    | version | 0x00 | length | 0x00 00 00 00| identifier | TLVs ... |
    | 1 B     | 1 B  | 2 B BE | 4 B          | 8 B        |          |
    +---------+------+--------+--------------+------------+----------+

The only valid version is 2 and the length field counts the TLV bytes only.
Each TLV is encoded as type(1) / length(2, big-endian) / value.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field

__all__ = [
    "NotifyPayload",
    "LinkDirectorMessage",
    "LdmTlv",
    "LdmError",
    "BadVersion",
    "LengthMismatch",
    "MalformedTlv",
    "ldm_encode",
    "ldm_decode",
    "wifi_update_tlv",
    "tlv_address",
    "KNOWN_NOTIFY_TYPES",
    "NOTIFY_NAMES",
    "TLV_NAMES",
]

# private notify payload types
NOTIFY_ENCRYPTED_PRELUDE = 48601
NOTIFY_TERMINUS_VERSION = 48602
NOTIFY_DEVICE_NAME = 48603
NOTIFY_BUILD_VERSION = 48604
NOTIFY_PROXY = 50701
NOTIFY_LINK_DIRECTOR = 50702
NOTIFY_IADR_INITIATOR_CLASS_D = 50801
NOTIFY_IADR_RESPONDER_CLASS_D = 50802
NOTIFY_IADR_INITIATOR_CLASS_C = 50811
NOTIFY_IADR_RESPONDER_CLASS_C = 50812
NOTIFY_ALWAYS_ON_WIFI = 51401
NOTIFY_IS_ALT_ACCOUNT_DEVICE = 51501

NOTIFY_NAMES = {
    NOTIFY_ENCRYPTED_PRELUDE: "EncryptedPrelude",
    NOTIFY_TERMINUS_VERSION: "TerminusVersion",
    NOTIFY_DEVICE_NAME: "DeviceName",
    NOTIFY_BUILD_VERSION: "BuildVersion",
    NOTIFY_PROXY: "ProxyNotify",
    NOTIFY_LINK_DIRECTOR: "LinkDirectorMessage",
    NOTIFY_IADR_INITIATOR_CLASS_D: "IAdrInitiatorClassD",
    NOTIFY_IADR_RESPONDER_CLASS_D: "IAdrResponderClassD",
    NOTIFY_IADR_INITIATOR_CLASS_C: "IAdrInitiatorClassC",
    NOTIFY_IADR_RESPONDER_CLASS_C: "IAdrResponderClassC",
    NOTIFY_ALWAYS_ON_WIFI: "AlwaysOnWiFi",
    NOTIFY_IS_ALT_ACCOUNT_DEVICE: "IsAltAccountDevice",
}

KNOWN_NOTIFY_TYPES = frozenset(NOTIFY_NAMES)

LDM_VERSION = 2

TLV_HELLO = 1
TLV_UPDATE_WIFI_ADDRESS_IPV6 = 2
TLV_UPDATE_WIFI_ADDRESS_IPV4 = 3
TLV_UPDATE_WIFI_SIGNATURE = 4
TLV_PREFER_WIFI = 5
TLV_DEVICE_LINK_STATE = 6
TLV_PREFER_WIFI_ACK = 7
TLV_FORCE_WOW = 8

TLV_NAMES = {
    TLV_HELLO: "Hello",
    TLV_UPDATE_WIFI_ADDRESS_IPV6: "UpdateWiFiAddressIPv6",
    TLV_UPDATE_WIFI_ADDRESS_IPV4: "UpdateWiFiAddressIPv4",
    TLV_UPDATE_WIFI_SIGNATURE: "UpdateWiFiSignature",
    TLV_PREFER_WIFI: "PreferWiFi",
    TLV_DEVICE_LINK_STATE: "DeviceLinkState",
    TLV_PREFER_WIFI_ACK: "PreferWiFiAck",
    TLV_FORCE_WOW: "ForceWoW",
}

# expected value length per TLV type; None means variable
_TLV_VALUE_LEN = {
    TLV_HELLO: 0,
    TLV_UPDATE_WIFI_ADDRESS_IPV6: 18,
    TLV_UPDATE_WIFI_ADDRESS_IPV4: 6,
    TLV_UPDATE_WIFI_SIGNATURE: None,
    TLV_PREFER_WIFI: 0,
    TLV_DEVICE_LINK_STATE: 1,
    TLV_PREFER_WIFI_ACK: 1,
    TLV_FORCE_WOW: 0,
}

LINK_STATE_BLUETOOTH = 1
LINK_STATE_WIFI = 2


class LdmError(Exception):
    """Base class for link director message errors."""


class BadVersion(LdmError):
    """Version byte is not 2."""


class LengthMismatch(LdmError):
    """Declared TLV length does not match the encoded TLVs."""


class MalformedTlv(LdmError):
    """TLV type unknown or its value violates the expected shape."""


@dataclass
class NotifyPayload:
    """A notify payload as carried inside handshake messages."""

    notify_type: int
    data: bytes = b""

    @property
    def name(self) -> str:
        return NOTIFY_NAMES.get(self.notify_type, "Unknown(%d)" % self.notify_type)


@dataclass
class LdmTlv:
    tlv_type: int
    value: bytes = b""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.tlv_type not in TLV_NAMES:
            raise MalformedTlv("TLV type %d" % self.tlv_type)
        want = _TLV_VALUE_LEN[self.tlv_type]
        if want is not None and len(self.value) != want:
            raise MalformedTlv(
                "TLV %s expects %d value bytes, got %d"
                % (TLV_NAMES[self.tlv_type], want, len(self.value))
            )
        if self.tlv_type == TLV_DEVICE_LINK_STATE and self.value[0] not in (
            LINK_STATE_BLUETOOTH,
            LINK_STATE_WIFI,
        ):
            raise MalformedTlv("DeviceLinkState must be 1 or 2")

    @property
    def name(self) -> str:
        return TLV_NAMES.get(self.tlv_type, "unknown")


@dataclass
class LinkDirectorMessage:
    identifier: bytes = b"\x00" * 8
    tlvs: list[LdmTlv] = field(default_factory=list)
    version: int = LDM_VERSION

    def __post_init__(self):
        if len(self.identifier) != 8:
            raise MalformedTlv("identifier must be 8 bytes")


def _encode_tlvs(tlvs: list[LdmTlv]) -> bytes:
    out = bytearray()
    for tlv in tlvs:
        tlv.validate()
        out += struct.pack(">BH", tlv.tlv_type, len(tlv.value))
        out += tlv.value
    return bytes(out)


def ldm_encode(ldm: LinkDirectorMessage) -> NotifyPayload:
    if ldm.version != LDM_VERSION:
        raise BadVersion("version %d" % ldm.version)
    tlv_bytes = _encode_tlvs(ldm.tlvs)
    data = (
        struct.pack(">BBH", ldm.version, 0, len(tlv_bytes))
        + b"\x00" * 4
        + ldm.identifier
        + tlv_bytes
    )
    return NotifyPayload(NOTIFY_LINK_DIRECTOR, data)


def ldm_decode(payload: NotifyPayload | bytes) -> LinkDirectorMessage:
    data = payload.data if isinstance(payload, NotifyPayload) else payload
    if len(data) < 16:
        raise LengthMismatch("LDM shorter than its 16-byte header")
    version, zero, tlv_length = struct.unpack_from(">BBH", data)
    if version != LDM_VERSION:
        raise BadVersion("version %d" % version)
    if zero != 0 or data[4:8] != b"\x00" * 4:
        raise MalformedTlv("reserved bytes must be zero")
    identifier = bytes(data[8:16])
    tlv_bytes = data[16:]
    if len(tlv_bytes) != tlv_length:
        raise LengthMismatch(
            "declared %d TLV bytes, got %d" % (tlv_length, len(tlv_bytes))
        )
    tlvs = []
    off = 0
    while off < len(tlv_bytes):
        if off + 3 > len(tlv_bytes):
            raise MalformedTlv("truncated TLV header")
        tlv_type, value_len = struct.unpack_from(">BH", tlv_bytes, off)
        off += 3
        if off + value_len > len(tlv_bytes):
            raise MalformedTlv("TLV value overruns the message")
        tlvs.append(LdmTlv(tlv_type, bytes(tlv_bytes[off : off + value_len])))
        off += value_len
    return LinkDirectorMessage(identifier, tlvs)


def wifi_update_tlv(host: str, port: int) -> LdmTlv:
    """Address update TLV for the given IP literal, IPv4 or IPv6."""
    addr = ipaddress.ip_address(host)
    if addr.version == 4:
        return LdmTlv(
            TLV_UPDATE_WIFI_ADDRESS_IPV4, struct.pack(">H", port) + addr.packed
        )
    return LdmTlv(TLV_UPDATE_WIFI_ADDRESS_IPV6, struct.pack(">H", port) + addr.packed)


def tlv_address(tlv: LdmTlv) -> tuple[str, int]:
    """(host, port) from an address update TLV."""
    if tlv.tlv_type not in (
        TLV_UPDATE_WIFI_ADDRESS_IPV4,
        TLV_UPDATE_WIFI_ADDRESS_IPV6,
    ):
        raise MalformedTlv("not an address update TLV")
    (port,) = struct.unpack_from(">H", tlv.value)
    return str(ipaddress.ip_address(tlv.value[2:])), port


def pack_address(host: str, port: int) -> bytes:
    """port(2) ‖ IP, the layout ProxyNotify (50701) data uses."""
    return struct.pack(">H", port) + ipaddress.ip_address(host).packed


def unpack_address(data: bytes) -> tuple[str, int]:
    if len(data) not in (6, 18):
        raise MalformedTlv("address data must be 6 or 18 bytes")
    (port,) = struct.unpack_from(">H", data)
    return str(ipaddress.ip_address(data[2:])), port


def pack_ipv6(host: str) -> bytes:
    """Bare 16-byte address, the layout inner-address notifies use."""
    return ipaddress.IPv6Address(host).packed


def unpack_ipv6(data: bytes) -> str:
    if len(data) != 16:
        raise MalformedTlv("inner address must be 16 bytes")
    return str(ipaddress.IPv6Address(data))

"""Offline multi-layer decoder for link transcripts and message logs.

Builds an annotated tree over the raw bytes.  Every node covers an exact
byte range of its input; the children of a node, when present, partition
its bytes in order.  Re-serializing the leaves therefore reproduces the
input byte for byte, no matter how malformed it was:

    record                              one transcript record
      link-header   13 bytes            timestamp ‖ direction ‖ length
      counters       2 bytes            seq ‖ received
      link frame                        the carried frame
        frame-header  3 bytes           type ‖ length
        payload       n bytes           per-type subtree
        checksum      2 bytes

Decrypted views are a separate byte space: they hang off a node's
`inner` slot (offsets restart at zero there) and never participate in
re-serialization.  Undecodable stretches become hex leaves with a note;
nothing in this module raises on malformed input.  The only error is
FileUnreadable, for paths that cannot be opened or key files that do
not parse.

Two input shapes are understood: the binary link transcript
(timestamp(8) ‖ direction(1) ‖ length(4) ‖ raw per record) and the
JSON-lines message log (one object per decoded bus message).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from . import ldm, nrlp, suites
from .alloy import (
    CONTROL_TYPE_NAMES,
    CTRL_HELLO,
    CTRL_SETUP_CHANNEL,
    DATA_TYPE_NAMES,
    FLAG_EXP,
    FLAG_TOP,
    HEALTH_TOPIC,
    TYPE_DATA,
    decode_hello,
    decode_setup_channel,
    ControlMessage,
)
from .aoverc import AovercEnvelope, AovercError, aoverc_decrypt, keyring_from_identity
from .healthstore import sample_type_name
from .identity import BadIdentityFile, DeviceIdentity, load_identity
from .inner import CONTROL_PORT, DATA_PORT, OP_DATA, OP_NAMES, SHOES_PORT
from .ike import (
    EXCHANGE_NAMES,
    FLAG_ENCRYPTED,
    FLAG_INITIATOR,
    FLAG_RESPONSE,
    PAYLOAD_KE,
    PAYLOAD_NAMES,
    PAYLOAD_NONCE,
    PAYLOAD_NOTIFY,
    PAYLOAD_SA,
    PAYLOAD_SK,
    IkePayload,
    decode_sa,
)
from .link import DIRECTION_TO_PHONE, DIRECTION_TO_WATCH
from .magnet import OPCODE_NAMES
from .nanosync import (
    CHANGE_DELETE,
    CHANGE_END_ANCHOR,
    CHANGE_INSERT,
    CHANGE_OBJECT_TYPE,
    CHANGE_START_ANCHOR,
    TLV_ANCHOR,
    TLV_CHANGE,
    TLV_STATUS,
    VARIANT_CHANGE_SET,
    VARIANT_SYNC_STATUS,
    _decode_sample,
)
from .shoes import (
    REPLY_SIZE,
    REQUEST_TYPE_NAMES,
    shoes_decode_reply,
    shoes_decode_request,
)
from .tunnel import KeyMaterial, RecordCodec, TunnelError, _aead

__all__ = [
    "DissectKeys",
    "FileUnreadable",
    "Node",
    "dissect",
    "dissect_alloy_log",
    "dissect_frame",
    "dissect_transcript",
    "render_text",
    "reserialize",
    "to_json",
]

_RECORD_HEADER = struct.Struct(">QBI")

DIRECTION_NAMES = {DIRECTION_TO_WATCH: "to-watch", DIRECTION_TO_PHONE: "to-phone"}


class FileUnreadable(Exception):
    """The input path cannot be opened, or a key file does not parse."""


@dataclass
class Node:
    label: str
    data: bytes
    offset: int = 0
    fields: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    children: list = field(default_factory=list)
    inner: "Node | None" = None     # decrypted view, separate byte space

    def add(self, node: "Node") -> "Node":
        self.children.append(node)
        return node

    def leaf(self, label: str, start: int, end: int, **fields) -> "Node":
        return self.add(Node(label, self.data[start:end],
                             self.offset + start, dict(fields)))


def reserialize(node: Node) -> bytes:
    """Concatenate the tree's leaves; equals the dissected input."""
    if node.children:
        return b"".join(reserialize(child) for child in node.children)
    return node.data


# --- key material -----------------------------------------------------------------


class DissectKeys:
    """Optional decryption state: tunnel session keys and envelope keys."""

    def __init__(self):
        self.sessions: dict[str, tuple[KeyMaterial, suites.ChosenSuite]] = {}
        self._codecs: dict[str, RecordCodec] = {}
        self.keyring = None

    @classmethod
    def load(cls, keylog=None, identity=None) -> "DissectKeys":
        keys = cls()
        if keylog is not None:
            if isinstance(keylog, str):
                try:
                    with open(keylog, "r", encoding="utf-8") as handle:
                        lines = handle.read().splitlines()
                except OSError as exc:
                    raise FileUnreadable(str(exc)) from exc
            else:
                lines = list(keylog)
            for number, line in enumerate(lines, 1):
                if not line.strip():
                    continue
                try:
                    label, material, suite = KeyMaterial.from_keylog_line(line)
                except ValueError as exc:
                    raise FileUnreadable(
                        "key log line %d: %s" % (number, exc)) from exc
                letter = label[-1].upper()
                keys.sessions[letter if letter in "CD" else label] = (
                    material, suite)
        if identity is not None:
            if isinstance(identity, DeviceIdentity):
                keys.keyring = keyring_from_identity(identity)
            else:
                try:
                    keys.keyring = keyring_from_identity(load_identity(identity))
                except (OSError, BadIdentityFile) as exc:
                    raise FileUnreadable(str(exc)) from exc
        return keys

    def codec(self, traffic_class: str) -> RecordCodec | None:
        if traffic_class not in self._codecs:
            session = self.sessions.get(traffic_class)
            if session is None:
                return None
            self._codecs[traffic_class] = RecordCodec(*session)
        return self._codecs[traffic_class]

    def sk_aeads(self, traffic_class: str, direction: int | None):
        """AEADs that may have sealed a handshake SK payload, likeliest first.

        The initiator seals under hsk_i; in transcripts the watch is the
        initiator, so to-phone records try hsk_i first.
        """
        session = self.sessions.get(traffic_class)
        if session is None:
            return []
        material, suite = session
        pair = [_aead(suite.encryption, material.hsk_i),
                _aead(suite.encryption, material.hsk_r)]
        if direction == DIRECTION_TO_WATCH:
            pair.reverse()
        return pair


class _Walk:
    """Mutable decode state threaded through one dissection run."""

    def __init__(self, keys: DissectKeys | None):
        self.keys = keys or DissectKeys()
        self.stream_topics: dict[int, str] = {}
        self.first_timestamp: int | None = None


def _hex_fields(data: bytes, limit: int = 24) -> dict:
    if not data:
        return {}
    if len(data) <= limit:
        return {"hex": data.hex()}
    return {"hex": data[:limit].hex() + "...", "size": len(data)}


def _raw_leaf(label: str, data: bytes, offset: int, *notes: str) -> Node:
    return Node(label, data, offset, _hex_fields(data), list(notes))


def _guarded(builder, label: str, data: bytes, offset: int, *args) -> Node:
    """Totality backstop: a decoder bug degrades to a hex leaf, not a crash."""
    try:
        return builder(data, offset, *args)
    except Exception as exc:     # noqa: BLE001 - whole point is never crashing
        return _raw_leaf(label, data, offset, "decoder error: %s" % exc)


# --- link layer --------------------------------------------------------------------


def dissect_transcript(source, keys: DissectKeys | None = None) -> Node:
    """Tree over a binary link transcript (path, bytes, or stream)."""
    data = _read_source(source)
    walk = _Walk(keys)
    root = Node("transcript", data, 0, {"bytes": len(data)})
    offset = 0
    count = 0
    while offset < len(data):
        rest = data[offset:]
        if len(rest) < _RECORD_HEADER.size:
            root.add(_raw_leaf("trailing bytes", rest, offset,
                               "truncated record header"))
            break
        timestamp, direction, length = _RECORD_HEADER.unpack_from(rest)
        if walk.first_timestamp is None:
            walk.first_timestamp = timestamp
        total = _RECORD_HEADER.size + length
        record = Node("record", rest[:total], offset, {
            "t": "+%.3fs" % ((timestamp - walk.first_timestamp) / 1e6),
            "direction": DIRECTION_NAMES.get(direction, str(direction)),
        })
        record.leaf("link-header", 0, _RECORD_HEADER.size,
                    timestamp_us=timestamp, length=length)
        raw = rest[_RECORD_HEADER.size:total]
        if len(raw) < length:
            record.add(_raw_leaf("record body", raw, offset + _RECORD_HEADER.size,
                                 "truncated: %d of %d bytes" % (len(raw), length)))
            root.add(record)
            count += 1
            break
        if len(raw) >= 2:
            counters = record.leaf("counters", _RECORD_HEADER.size,
                                   _RECORD_HEADER.size + 2,
                                   seq=raw[0], received=raw[1])
            if raw[:2] == b"\xff\xff":
                counters.notes.append("counters never sent by an endpoint")
            frame_base = offset + _RECORD_HEADER.size + 2
            for node in _frame_chain(raw[2:], frame_base, walk, direction):
                record.add(node)
        elif raw:
            record.add(_raw_leaf("counters", raw, offset + _RECORD_HEADER.size,
                                 "truncated"))
        root.add(record)
        offset += total
        count += 1
    root.fields["records"] = count
    return root


def dissect_frame(frame: bytes, keys: DissectKeys | None = None,
                  direction: int | None = None) -> Node:
    """Tree over one raw link frame."""
    walk = _Walk(keys)
    root = Node("frame", frame, 0, {"bytes": len(frame)})
    for node in _frame_chain(frame, 0, walk, direction):
        root.add(node)
    return root


def _frame_chain(buf: bytes, base: int, walk: _Walk,
                 direction: int | None) -> list[Node]:
    """Frames back to back; service negotiation rides raw, without framing."""
    nodes: list[Node] = []
    offset = 0
    while offset < len(buf):
        rest = buf[offset:]
        try:
            frame, consumed = nrlp.nrlp_decode(rest)
        except nrlp.ChecksumMismatch as exc:
            take = exc.consumed
            node = Node("link frame", rest[:take], base + offset,
                        notes=["checksum mismatch: %s" % exc])
            node.leaf("frame-header", 0, 3, type="0x%02x" % rest[0],
                      type_name=nrlp.TYPE_NAMES.get(rest[0], "unknown"))
            node.add(_raw_leaf("payload", rest[3:take - 2], base + offset + 3))
            node.leaf("checksum", take - 2, take,
                      value="0x%04x" % int.from_bytes(rest[take - 2:take], "big"))
            nodes.append(node)
            offset += take
            continue
        except nrlp.NrlpError as exc:
            if offset == 0 and rest and rest[0] in OPCODE_NAMES:
                nodes.append(_magnet_node(rest, base))
                return nodes
            nodes.append(_raw_leaf("unrecognized bytes", rest, base + offset,
                                   str(exc)))
            return nodes
        nodes.append(_nrlp_node(frame, rest[:consumed], base + offset,
                                walk, direction))
        offset += consumed
    return nodes


def _magnet_node(data: bytes, offset: int) -> Node:
    node = Node("service negotiation", data, offset,
                {"opcode": "0x%02x" % data[0],
                 "operation": OPCODE_NAMES[data[0]]})
    node.leaf("opcode", 0, 1)
    if len(data) > 1:
        body = node.leaf("body", 1, len(data), **_hex_fields(data[1:]))
        text = data[1:].decode("ascii", "replace")
        if text.isprintable():
            body.fields["text"] = text
    return node


def _nrlp_node(frame: nrlp.NrlpFrame, data: bytes, offset: int,
               walk: _Walk, direction: int | None) -> Node:
    type_name = nrlp.TYPE_NAMES.get(frame.frame_type,
                                    "type-0x%02x" % frame.frame_type)
    node = Node("link frame", data, offset,
                {"type": "0x%02x" % frame.frame_type, "type_name": type_name})
    node.leaf("frame-header", 0, 3, length=len(frame.payload))
    if frame.frame_type not in nrlp.TYPE_NAMES:
        node.notes.append("unknown frame type, preserved as-is")
    if frame.payload:
        payload_offset = offset + 3
        node.add(_guarded(_payload_node, "payload", frame.payload,
                          payload_offset, frame.frame_type, walk, direction))
    node.leaf("checksum", len(data) - 2, len(data),
              value="0x%04x" % frame.checksum,
              regime="xor" if frame.frame_type >= 0x64 else "ones-complement")
    return node


def _payload_node(data: bytes, offset: int, frame_type: int,
                  walk: _Walk, direction: int | None) -> Node:
    if frame_type == nrlp.TYPE_IKEV2:
        return _ike_node(data, offset, walk, direction)
    if frame_type in (nrlp.TYPE_ESP_CLASSC, nrlp.TYPE_ESP_CLASSC_ECT0):
        return _esp_node(data, offset, "C", walk, direction)
    if frame_type in (nrlp.TYPE_ESP, nrlp.TYPE_ESP_ECT0):
        return _esp_node(data, offset, "D", walk, direction)
    if frame_type == nrlp.TYPE_ECHO:
        kind = {nrlp.PING: "ping", nrlp.PONG: "pong"}.get(data[0], "unknown")
        return _raw_leaf("echo %s" % kind, data, offset)
    if frame_type in (nrlp.TYPE_PAD0, nrlp.TYPE_PADN):
        return _raw_leaf("padding", data, offset)
    return _raw_leaf("payload", data, offset)


# --- handshake layer ---------------------------------------------------------------


def _ike_node(data: bytes, offset: int, walk: _Walk,
              direction: int | None) -> Node:
    node = Node("handshake message", data, offset)
    if len(data) < 7:
        node.notes.append("shorter than the 7-byte header")
        node.add(_raw_leaf("bytes", data, offset))
        return node
    exchange, flags, class_byte, message_id = struct.unpack_from(">BBBI", data)
    flag_text = "".join(
        letter for bit, letter in ((FLAG_INITIATOR, "I"), (FLAG_RESPONSE, "R"),
                                   (FLAG_ENCRYPTED, "E")) if flags & bit)
    node.fields.update({
        "exchange": EXCHANGE_NAMES.get(exchange, "exchange-%d" % exchange),
        "flags": flag_text or "none",
        "class": chr(class_byte) if class_byte in (0x43, 0x44) else hex(class_byte),
        "message_id": message_id,
    })
    node.leaf("message-header", 0, 7)
    for child in _ike_payload_chain(data, 7, offset, data[:7],
                                    node.fields["class"], walk, direction):
        node.add(child)
    if not flag_text and EXCHANGE_NAMES.get(exchange) == "INFORMATIONAL":
        node.notes.append("unauthenticated: no encrypted payload")
    return node


def _ike_payload_chain(data: bytes, start: int, base: int, header: bytes,
                       traffic_class: str, walk: _Walk,
                       direction: int | None) -> list[Node]:
    nodes: list[Node] = []
    offset = start
    while offset < len(data):
        if offset + 3 > len(data):
            nodes.append(_raw_leaf("trailing bytes", data[offset:],
                                   base + offset, "truncated payload header"))
            break
        ptype, length = struct.unpack_from(">BH", data, offset)
        end = offset + 3 + length
        if end > len(data):
            nodes.append(_raw_leaf("trailing bytes", data[offset:],
                                   base + offset, "payload overruns message"))
            break
        name = PAYLOAD_NAMES.get(ptype, "type-%d" % ptype)
        payload = Node("payload %s" % name, data[offset:end], base + offset)
        payload.leaf("payload-header", 0, 3, type=ptype, length=length)
        value = data[offset + 3:end]
        if value:
            payload.add(_guarded(
                _ike_payload_body, name, value, base + offset + 3,
                ptype, header, traffic_class, walk, direction))
        nodes.append(payload)
        offset = end
    return nodes


def _ike_payload_body(value: bytes, offset: int, ptype: int, header: bytes,
                      traffic_class: str, walk: _Walk,
                      direction: int | None) -> Node:
    if ptype == PAYLOAD_NOTIFY and len(value) >= 2:
        return _notify_node(value, offset)
    if ptype == PAYLOAD_SK:
        return _sk_node(value, offset, header, traffic_class, walk, direction)
    if ptype == PAYLOAD_SA:
        node = _raw_leaf("proposal", value, offset)
        try:
            profile = decode_sa(IkePayload(PAYLOAD_SA, value))
            node.fields = {"encryption": list(profile.encryption),
                           "prf": list(profile.prf), "dh": list(profile.dh),
                           "signature_hash": list(profile.signature_hash)}
        except Exception as exc:    # noqa: BLE001
            node.notes.append("unreadable proposal: %s" % exc)
        return node
    if ptype == PAYLOAD_KE and len(value) >= 2:
        node = Node("key exchange", value, offset,
                    {"group": int.from_bytes(value[:2], "big")})
        node.leaf("group", 0, 2)
        node.add(_raw_leaf("public", value[2:], offset + 2))
        return node
    if ptype == PAYLOAD_NONCE:
        return _raw_leaf("nonce", value, offset)
    return _raw_leaf("value", value, offset)


def _notify_node(value: bytes, offset: int) -> Node:
    notify_type = int.from_bytes(value[:2], "big")
    name = ldm.NOTIFY_NAMES.get(notify_type, "notify-%d" % notify_type)
    node = Node("notify %s" % name, value, offset, {"notify_type": notify_type})
    node.leaf("notify-type", 0, 2)
    body = value[2:]
    if not body:
        return node
    if notify_type == ldm.NOTIFY_LINK_DIRECTOR:
        node.add(_guarded(_ldm_node, "director message", body, offset + 2))
        return node
    leaf = node.leaf("data", 2, len(value), **_hex_fields(body))
    if notify_type in (ldm.NOTIFY_DEVICE_NAME, ldm.NOTIFY_BUILD_VERSION):
        leaf.fields["text"] = body.decode("utf-8", "replace")
    elif notify_type == ldm.NOTIFY_TERMINUS_VERSION:
        leaf.fields["text"] = body.decode("ascii", "replace")
    elif len(body) == 16:
        try:
            leaf.fields["address"] = ldm.unpack_ipv6(body)
        except Exception:   # noqa: BLE001 - annotation only
            pass
    return node


def _ldm_node(data: bytes, offset: int) -> Node:
    node = Node("director message", data, offset)
    if len(data) < 16:
        node.notes.append("shorter than the 16-byte header")
        node.add(_raw_leaf("bytes", data, offset))
        return node
    node.fields["identifier"] = data[8:16].hex()
    node.leaf("director-header", 0, 16, version=data[0])
    cursor = 16
    while cursor < len(data):
        if cursor + 3 > len(data):
            node.add(_raw_leaf("trailing bytes", data[cursor:], offset + cursor,
                               "truncated TLV header"))
            break
        tlv_type, length = struct.unpack_from(">BH", data, cursor)
        end = cursor + 3 + length
        if end > len(data):
            node.add(_raw_leaf("trailing bytes", data[cursor:], offset + cursor,
                               "TLV overruns message"))
            break
        name = ldm.TLV_NAMES.get(tlv_type, "tlv-%d" % tlv_type)
        tlv = node.leaf(name, cursor, end, **_hex_fields(data[cursor + 3:end]))
        if tlv_type in (ldm.TLV_UPDATE_WIFI_ADDRESS_IPV4,
                        ldm.TLV_UPDATE_WIFI_ADDRESS_IPV6):
            try:
                host, port = ldm.tlv_address(
                    ldm.LdmTlv(tlv_type, data[cursor + 3:end]))
                tlv.fields.update({"host": host, "port": port})
            except Exception as exc:    # noqa: BLE001
                tlv.notes.append("unreadable address: %s" % exc)
        cursor = end
    return node


def _sk_node(value: bytes, offset: int, header: bytes, traffic_class: str,
             walk: _Walk, direction: int | None) -> Node:
    node = Node("encrypted payloads", value, offset)
    if len(value) < 8 + 16:
        node.notes.append("too short for sequence and tag")
        node.add(_raw_leaf("bytes", value, offset))
        return node
    node.fields["sequence"] = int.from_bytes(value[:8], "big")
    node.leaf("sequence", 0, 8)
    ciphertext = node.leaf("ciphertext", 8, len(value),
                           **_hex_fields(value[8:]))
    aeads = walk.keys.sk_aeads(traffic_class, direction)
    if not aeads:
        node.notes.append("no session keys supplied")
        return node
    for aead in aeads:
        try:
            plain = aead.decrypt(b"\x00" * 4 + value[:8], value[8:], header)
        except Exception:   # noqa: BLE001 - wrong direction key, try the other
            continue
        inner = Node("decrypted payloads", plain, 0)
        for child in _ike_payload_chain(plain, 0, 0, header, traffic_class,
                                        walk, direction):
            inner.add(child)
        ciphertext.inner = inner
        return node
    node.notes.append("decryption failed with the supplied keys")
    return node


# --- tunnel layer ------------------------------------------------------------------


def _esp_node(data: bytes, offset: int, traffic_class: str, walk: _Walk,
              direction: int | None) -> Node:
    node = Node("encrypted record", data, offset, {"class": traffic_class})
    if len(data) < 8 + 16:
        node.notes.append("too short for sequence and tag")
        node.add(_raw_leaf("bytes", data, offset))
        return node
    node.fields["sequence"] = int.from_bytes(data[:8], "big")
    node.leaf("sequence", 0, 8)
    ciphertext = node.leaf("ciphertext", 8, len(data), **_hex_fields(data[8:]))
    codec = walk.keys.codec(traffic_class)
    if codec is None:
        node.notes.append("no session keys supplied")
        return node
    if direction is None:
        sides = (True, False)
    else:
        sides = (direction == DIRECTION_TO_PHONE,)
    for from_initiator in sides:
        try:
            _, plain = codec.open(data, from_initiator=from_initiator)
        except TunnelError:
            continue
        ciphertext.inner = _guarded(_inner_packet_node, "plaintext", plain, 0,
                                    walk, direction)
        return node
    node.notes.append("decryption failed with the supplied keys")
    return node


def _inner_packet_node(data: bytes, offset: int, walk: _Walk,
                       direction: int | None) -> Node:
    node = Node("stream packet", data, offset)
    if len(data) < 7:
        node.notes.append("shorter than the 7-byte header")
        node.add(_raw_leaf("bytes", data, offset))
        return node
    op, connection, port = struct.unpack_from(">BIH", data)
    node.fields.update({"op": OP_NAMES.get(op, "op-%d" % op),
                        "connection": connection, "port": port})
    node.leaf("packet-header", 0, 7)
    payload = data[7:]
    if not payload:
        return node
    if op == OP_DATA and port in (CONTROL_PORT, DATA_PORT):
        node.add(_guarded(_bus_chain_node, "bus bytes", payload, offset + 7,
                          port, walk, direction))
    elif op == OP_DATA and port == SHOES_PORT:
        node.add(_guarded(_shoes_node, "proxy bytes", payload, offset + 7))
    else:
        node.add(_raw_leaf("payload", payload, offset + 7))
    return node


# --- message bus layer -------------------------------------------------------------


def _bus_chain_node(data: bytes, offset: int, port: int, walk: _Walk,
                    direction: int | None) -> Node:
    label = "control messages" if port == CONTROL_PORT else "bus messages"
    node = Node(label, data, offset)
    cursor = 0
    while cursor < len(data):
        if cursor + 5 > len(data):
            node.add(_raw_leaf("trailing bytes", data[cursor:], offset + cursor,
                               "truncated message header"))
            break
        msg_type, length = struct.unpack_from(">BI", data, cursor)
        end = cursor + 5 + length
        if end > len(data):
            node.add(_raw_leaf("trailing bytes", data[cursor:], offset + cursor,
                               "message overruns packet"))
            break
        if port == CONTROL_PORT:
            child = _control_node(msg_type, data[cursor:end], offset + cursor)
        else:
            child = _guarded(_bus_message_node, "bus message",
                             data[cursor:end], offset + cursor, walk)
        node.add(child)
        cursor = end
    if len(node.children) == 1:
        return node.children[0]
    return node


def _control_node(msg_type: int, data: bytes, offset: int) -> Node:
    name = CONTROL_TYPE_NAMES.get(msg_type, "type-%d" % msg_type)
    node = Node("control %s" % name, data, offset, {"type": msg_type})
    node.leaf("message-header", 0, 5, length=len(data) - 5)
    body = data[5:]
    if not body:
        return node
    leaf = node.leaf("body", 5, len(data), **_hex_fields(body))
    try:
        if msg_type == CTRL_SETUP_CHANNEL:
            desc = decode_setup_channel(ControlMessage(msg_type, body))
            leaf.fields = {"service": desc.service, "name": desc.name,
                           "uuid": desc.channel_uuid.hex(),
                           "port": desc.tcp_port,
                           "class": desc.protection_class,
                           "urgency": desc.urgency}
        elif msg_type == CTRL_HELLO:
            version, device, features = decode_hello(
                ControlMessage(msg_type, body))
            leaf.fields = {"version": version, "device": device,
                           "features": features}
    except Exception as exc:    # noqa: BLE001
        leaf.notes.append("unreadable body: %s" % exc)
    return node


def _bus_message_node(data: bytes, offset: int, walk: _Walk) -> Node:
    msg_type = data[0]
    name = DATA_TYPE_NAMES.get(msg_type, "type-%d" % msg_type)
    node = Node("bus %s" % name, data, offset, {"type": msg_type})
    node.leaf("message-header", 0, 5)
    body = data[5:]
    if len(body) < 7:
        node.add(_raw_leaf("body", body, offset + 5, "shorter than fixed fields"))
        return node
    sequence, stream, flags = struct.unpack_from(">IHB", body)
    node.fields.update({"sequence": sequence, "stream": stream,
                        "flags": "0x%02x" % flags})
    base = offset + 5
    node.leaf("routing", 5, 12)
    cursor = 7

    def take_string(label: str) -> str | None:
        nonlocal cursor
        if cursor + 4 > len(body):
            return None
        (n,) = struct.unpack_from(">I", body, cursor)
        if cursor + 4 + n > len(body):
            return None
        text = body[cursor + 4:cursor + 4 + n].decode("ascii", "replace")
        node.leaf(label, 5 + cursor, 5 + cursor + 4 + n,
                  **({"text": text} if text else {}))
        cursor += 4 + n
        return text

    for label in ("response-id", "uuid"):
        if take_string(label) is None:
            node.add(_raw_leaf("trailing bytes", body[cursor:], base + cursor,
                               "truncated %s" % label))
            return node
    topic = None
    if flags & FLAG_TOP:
        topic = take_string("topic")
        if topic is None:
            node.add(_raw_leaf("trailing bytes", body[cursor:], base + cursor,
                               "truncated topic"))
            return node
        walk.stream_topics[stream] = topic
    else:
        topic = walk.stream_topics.get(stream)
    if topic:
        node.fields["topic"] = topic
    payload_end = len(body)
    if flags & FLAG_EXP and payload_end - cursor >= 4:
        payload_end -= 4
    payload = body[cursor:payload_end]
    if payload:
        if msg_type == TYPE_DATA and topic == HEALTH_TOPIC:
            node.add(_guarded(_envelope_node, "payload", payload,
                              base + cursor, walk))
        else:
            node.add(_raw_leaf("payload", payload, base + cursor))
    if flags & FLAG_EXP:
        node.leaf("expiry", 5 + payload_end, len(data),
                  expiry=int.from_bytes(body[payload_end:payload_end + 4],
                                        "big"))
    return node


# --- envelope layer ----------------------------------------------------------------


def _envelope_node(data: bytes, offset: int, walk: _Walk) -> Node:
    node = Node("sealed envelope", data, offset)
    cursor = 0
    sed_leaf = None
    while cursor < len(data):
        if cursor + 7 > len(data):
            node.add(_raw_leaf("trailing bytes", data[cursor:], offset + cursor,
                               "truncated entry header"))
            return node
        tag = data[cursor:cursor + 3]
        (length,) = struct.unpack_from(">I", data, cursor + 3)
        end = cursor + 7 + length
        if end > len(data):
            node.add(_raw_leaf("trailing bytes", data[cursor:], offset + cursor,
                               "entry overruns record"))
            return node
        value = data[cursor + 7:end]
        tag_text = tag.decode("ascii", "replace")
        entry = Node("entry %s" % tag_text, data[cursor:end], offset + cursor)
        entry.leaf("entry-header", 0, 7, tag=tag_text, length=length)
        if tag == b"ekd" and value:
            entry.add(_guarded(_ekd_node, "key data", value,
                               offset + cursor + 7))
        elif value:
            leaf = entry.leaf("value", 7, 7 + length, **_hex_fields(value))
            if tag == b"sed":
                leaf.fields["blocks"] = len(value) // 16
                sed_leaf = leaf
        node.add(entry)
        cursor = end
    if sed_leaf is not None and walk.keys.keyring is not None:
        envelope = AovercEnvelope(
            next((reserialize(e)[7:] for e in node.children
                  if e.label == "entry ekd"), b""), sed_leaf.data)
        for mode, note in (("faithful", "opened (cbc mode)"),
                           ("aead_mitigated", "opened (aead mode)")):
            try:
                plain = aoverc_decrypt(walk.keys.keyring, envelope, mode)
            except AovercError:
                continue
            sed_leaf.notes.append(note)
            sed_leaf.inner = _guarded(_sync_node, "plaintext", plain, 0)
            break
        else:
            sed_leaf.notes.append("decryption failed with the supplied keys")
    return node


def _ekd_node(data: bytes, offset: int) -> Node:
    node = Node("key data", data, offset, {"version": data[0]})
    if len(data) < 3:
        node.notes.append("shorter than its header")
        node.add(_raw_leaf("bytes", data, offset))
        return node
    (c2_len,) = struct.unpack_from(">H", data, 1)
    if 3 + c2_len + 2 > len(data):
        node.notes.append("length fields overrun the entry")
        node.add(_raw_leaf("bytes", data, offset))
        return node
    node.leaf("ekd-header", 0, 3)
    node.leaf("encapsulated keys", 3, 3 + c2_len,
              **_hex_fields(data[3:3 + c2_len]))
    sig_off = 3 + c2_len
    node.leaf("signature-length", sig_off, sig_off + 2)
    node.add(_raw_leaf("signature", data[sig_off + 2:], offset + sig_off + 2))
    return node


# --- sync layer --------------------------------------------------------------------


def _sync_node(data: bytes, offset: int) -> Node:
    node = Node("sync message", data, offset)
    if not data:
        node.notes.append("empty")
        return node
    variant = data[0]
    node.fields["variant"] = {VARIANT_CHANGE_SET: "change-set",
                              VARIANT_SYNC_STATUS: "sync-status"}.get(
                                  variant, "variant-%d" % variant)
    node.leaf("variant", 0, 1)
    for child in _sync_tlvs(data, 1, offset, variant):
        node.add(child)
    return node


def _sync_tlvs(data: bytes, start: int, base: int, variant: int) -> list[Node]:
    nodes: list[Node] = []
    cursor = start
    while cursor < len(data):
        if cursor + 5 > len(data):
            nodes.append(_raw_leaf("trailing bytes", data[cursor:],
                                   base + cursor, "truncated TLV header"))
            break
        tag = data[cursor]
        (length,) = struct.unpack_from(">I", data, cursor + 1)
        end = cursor + 5 + length
        if end > len(data):
            nodes.append(_raw_leaf("trailing bytes", data[cursor:],
                                   base + cursor, "TLV overruns buffer"))
            break
        value = data[cursor + 5:end]
        if variant == VARIANT_CHANGE_SET and tag == TLV_CHANGE:
            change = Node("change", data[cursor:end], base + cursor)
            change.leaf("tlv-header", 0, 5)
            for child in _change_tlvs(value, base + cursor + 5):
                change.add(child)
            nodes.append(change)
        elif variant == VARIANT_CHANGE_SET and tag == TLV_STATUS:
            nodes.append(Node("status", data[cursor:end], base + cursor,
                              {"status": {1: "continue", 2: "done"}.get(
                                  value[0] if value else -1, "unknown")}))
        elif variant == VARIANT_SYNC_STATUS and tag == TLV_ANCHOR:
            fields = {}
            if len(value) >= 8:
                fields = {"anchor": int.from_bytes(value[:8], "big"),
                          "domain": value[8:].decode("utf-8", "replace")}
            nodes.append(Node("anchor", data[cursor:end], base + cursor,
                              fields))
        else:
            nodes.append(_raw_leaf("tlv-%d" % tag, data[cursor:end],
                                   base + cursor))
        cursor = end
    return nodes


def _change_tlvs(data: bytes, base: int) -> list[Node]:
    nodes: list[Node] = []
    cursor = 0
    while cursor < len(data):
        if cursor + 5 > len(data):
            nodes.append(_raw_leaf("trailing bytes", data[cursor:],
                                   base + cursor, "truncated TLV header"))
            break
        tag = data[cursor]
        (length,) = struct.unpack_from(">I", data, cursor + 1)
        end = cursor + 5 + length
        if end > len(data):
            nodes.append(_raw_leaf("trailing bytes", data[cursor:],
                                   base + cursor, "TLV overruns change"))
            break
        value = data[cursor + 5:end]
        covered = data[cursor:end]
        if tag == CHANGE_INSERT:
            node = Node("insert", covered, base + cursor)
            try:
                sample = _decode_sample(value)
                node.fields = {"uuid": sample.uuid.hex(),
                               "sample_type": sample_type_name(
                                   sample.sample_type),
                               "value": sample.value, "unit": sample.unit}
            except Exception as exc:    # noqa: BLE001
                node.notes.append("unreadable sample: %s" % exc)
                node.fields = _hex_fields(value)
            nodes.append(node)
        elif tag == CHANGE_DELETE:
            nodes.append(Node("delete", covered, base + cursor,
                              {"uuid": value.hex()}))
        elif tag == CHANGE_OBJECT_TYPE:
            nodes.append(Node("object-type", covered, base + cursor,
                              {"text": value.decode("utf-8", "replace")}))
        elif tag in (CHANGE_START_ANCHOR, CHANGE_END_ANCHOR):
            label = ("start-anchor" if tag == CHANGE_START_ANCHOR
                     else "end-anchor")
            fields = {}
            if len(value) == 8:
                fields = {"anchor": int.from_bytes(value, "big")}
            nodes.append(Node(label, covered, base + cursor, fields))
        else:
            nodes.append(_raw_leaf("tlv-%d" % tag, covered, base + cursor))
        cursor = end
    return nodes


# --- proxy layer -------------------------------------------------------------------


def _shoes_node(data: bytes, offset: int) -> Node:
    if len(data) == REPLY_SIZE and data[:2] == b"\x00\x06":
        node = Node("proxy reply", data, offset)
        try:
            reply = shoes_decode_reply(data)
            node.fields = {"domain": reply.domain, "code": reply.code,
                           "flags": "0x%02x" % reply.flags,
                           "denied": bool(reply.flags & 0x08)}
        except Exception as exc:    # noqa: BLE001
            node.notes.append("unreadable reply: %s" % exc)
        return node
    try:
        request = shoes_decode_request(data)
    except Exception:   # noqa: BLE001 - spliced traffic after the handshake
        return _raw_leaf("proxied data", data, offset)
    node = Node("proxy request", data, offset, {
        "request_type": REQUEST_TYPE_NAMES.get(request.request_type,
                                               str(request.request_type)),
        "destination": request.destination, "port": request.port})
    if request.process_name:
        node.fields["process"] = request.process_name
    if request.condition_flags:
        node.fields["conditions"] = "0x%02x" % request.condition_flags
    return node


# --- message log input -------------------------------------------------------------


def dissect_alloy_log(source, keys: DissectKeys | None = None) -> Node:
    """Tree over a JSON-lines message log."""
    data = _read_source(source)
    walk = _Walk(keys)
    root = Node("message-log", data, 0, {"bytes": len(data)})
    offset = 0
    count = 0
    for line in data.splitlines(keepends=True):
        stripped = line.strip()
        if not stripped:
            root.add(Node("blank line", line, offset))
            offset += len(line)
            continue
        node = Node("logged message", line, offset)
        try:
            entry = json.loads(stripped)
            if not isinstance(entry, dict):
                raise ValueError("line is not an object")
        except ValueError as exc:
            node.label = "unparseable line"
            node.notes.append(str(exc))
            root.add(node)
            offset += len(line)
            continue
        node.fields = {key: entry.get(key) for key in
                       ("direction", "type", "stream", "topic", "uuid",
                        "flags") if entry.get(key) is not None}
        payload_hex = entry.get("payload_hex")
        if isinstance(payload_hex, str):
            try:
                payload = bytes.fromhex(payload_hex)
            except ValueError:
                payload = None
                node.notes.append("payload_hex is not hex")
            if payload:
                if (entry.get("topic") == HEALTH_TOPIC
                        and entry.get("type") == TYPE_DATA):
                    node.inner = _guarded(_envelope_node, "payload", payload,
                                          0, walk)
                else:
                    node.inner = _raw_leaf("payload", payload, 0)
        root.add(node)
        offset += len(line)
        count += 1
    root.fields["messages"] = count
    return root


# --- entry points ------------------------------------------------------------------


def _read_source(source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, str):
        try:
            with open(source, "rb") as handle:
                return handle.read()
        except OSError as exc:
            raise FileUnreadable(str(exc)) from exc
    return source.read()


def dissect(path, keylog=None, identity=None) -> Node:
    """Dissect a transcript or message-log file, decrypting where keys allow."""
    data = _read_source(path)
    keys = DissectKeys.load(keylog, identity)
    head = data.lstrip()[:1]
    if head == b"{":
        return dissect_alloy_log(data, keys)
    return dissect_transcript(data, keys)


# --- rendering ---------------------------------------------------------------------


def _field_text(fields: dict) -> str:
    return " ".join("%s=%s" % (key, value) for key, value in fields.items())


def render_text(node: Node, indent: int = 0, lines: list | None = None) -> str:
    """Indented one-line-per-node view of the tree."""
    top = lines is None
    if lines is None:
        lines = []
    parts = ["%s%-6d %s" % ("  " * indent, len(node.data), node.label)]
    if node.fields:
        parts.append(_field_text(node.fields))
    if node.notes:
        parts.append("(%s)" % "; ".join(node.notes))
    lines.append(" ".join(parts))
    for child in node.children:
        render_text(child, indent + 1, lines)
    if node.inner is not None:
        lines.append("%s>> decrypted view" % ("  " * (indent + 1)))
        render_text(node.inner, indent + 2, lines)
    return "\n".join(lines) if top else ""


def to_json(node: Node) -> dict:
    """Lossless JSON form: leaves carry their bytes as hex."""
    out = {"label": node.label, "offset": node.offset, "size": len(node.data)}
    if node.fields:
        out["fields"] = {key: value for key, value in node.fields.items()}
    if node.notes:
        out["notes"] = list(node.notes)
    if node.children:
        out["children"] = [to_json(child) for child in node.children]
    else:
        out["data_hex"] = node.data.hex()
    if node.inner is not None:
        out["decrypted"] = to_json(node.inner)
    return out

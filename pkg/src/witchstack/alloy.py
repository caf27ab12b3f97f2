"""Topic-routed messaging bus: control channel, data channels, acks.

One control connection (inner port 61315) negotiates named data channels
that all share the data port (61314).  A data channel opens with a short
preamble

    len(1) ‖ channel name ‖ channel uuid (16 raw bytes)

answered by a single byte, 0x01 accept / 0x00 reject.  Data messages then
flow with this layout (length covers everything after itself):

    +------+--------+----------+--------+-------+
    | type | length | sequence | stream | flags |
    | 1 B  | 4 B BE | 4 B BE   | 2 B BE | 1 B   |
    +------+--------+----------+--------+-------+
    | len(resp-id) 4 B ‖ resp-id (ASCII)        |
    | len(uuid)    4 B ‖ uuid    (ASCII)        |
    | [len(topic)  4 B ‖ topic   if TOP]        |
    | payload ...                               |
    | [expiry 4 B BE if EXP]                    |
    +-------------------------------------------+

    flags: bit4 TOP hasTopic, bit3 EXP hasExpiryDate, bit2 APP wantsAppAck,
           bit1 CPR compressed, bit0 EPR expectsPeerResponse; bits 5-7 zero

The first message on a stream carries its topic; later messages omit it
and receivers recover the topic from the stream id.  Stream 0 is reserved
for acks.  Expiry is absolute seconds since 2001-01-01T00:00Z; a message
already expired on arrival is discarded and answered with an ExpiredAck.

The CPR flag is truthful here: set exactly when the payload was deflated
in transit, and receivers inflate before delivery.

Control messages use their own framing, type(1) ‖ length(4 BE) ‖ body.
Types follow the fixed table (1 Hello .. 12 SuspendOTRNegotiationMsg);
anything past CloseChannel is answered with the local extension type 0x7F
UnsupportedFeature and otherwise ignored.

Every decoded data message is appended to a JSON-lines log (direction,
type, stream, topic, uuid, flags, payload hex), the bus's offline format.
"""

from __future__ import annotations

import json
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

from .inner import CONTROL_PORT, DATA_PORT, InnerConn, InnerError, InnerMux, MuxClosed
from .rng import RandomSource

__all__ = [
    "AlloyError",
    "AlloyMessage",
    "AlloySession",
    "BUILTIN_CHANNELS",
    "ChannelDescriptor",
    "ControlMessage",
    "DuplicateOpen",
    "FLAG_APP",
    "FLAG_CPR",
    "FLAG_EPR",
    "FLAG_EXP",
    "FLAG_TOP",
    "FlagFieldReservedBitsSet",
    "HEALTH_TOPIC",
    "IncompatibleVersion",
    "LengthMismatch",
    "MessageLog",
    "SessionDown",
    "StreamTable",
    "TopicMissing",
    "UnknownChannel",
    "alloy_decode",
    "alloy_encode",
    "builtin_channels",
    "control_decode",
    "control_encode",
    "make_flags",
]

APPLE_EPOCH = 978307200  # 2001-01-01T00:00:00Z in unix seconds

# data-plane message types (numeric codes are ours, names are fixed)
TYPE_DATA = 0x00
TYPE_ACK = 0x01
TYPE_EXPIRED_ACK = 0x02
TYPE_DICTIONARY = 0x03
TYPE_PROTOBUF = 0x04
TYPE_RESOURCE_TRANSFER = 0x05

DATA_TYPE_NAMES = {
    TYPE_DATA: "DataMessage",
    TYPE_ACK: "Ack",
    TYPE_EXPIRED_ACK: "ExpiredAck",
    TYPE_DICTIONARY: "DictionaryMessage",
    TYPE_PROTOBUF: "ProtobufMessage",
    TYPE_RESOURCE_TRANSFER: "ResourceTransferMessage",
}

FLAG_TOP = 0x10
FLAG_EXP = 0x08
FLAG_APP = 0x04
FLAG_CPR = 0x02
FLAG_EPR = 0x01
_RESERVED_FLAGS = 0xE0

# control channel message types
CTRL_HELLO = 1
CTRL_SETUP_CHANNEL = 2
CTRL_CLOSE_CHANNEL = 3
CTRL_COMPRESSION_REQUEST = 4
CTRL_COMPRESSION_RESPONSE = 5
CTRL_SETUP_ENCRYPTED_CHANNEL = 6
CTRL_FAIRPLAY_HOST_SESSION_INFO = 7
CTRL_FAIRPLAY_DEVICE_INFO = 8
CTRL_FAIRPLAY_DEVICE_SESSION_INFO = 9
CTRL_OTR_NEGOTIATION_MESSAGE = 10
CTRL_ENCRYPT_CONTROL_CHANNEL = 11
CTRL_SUSPEND_OTR_NEGOTIATION_MSG = 12
CTRL_UNSUPPORTED_FEATURE = 0x7F  # local extension, not in the fixed table

CONTROL_TYPE_NAMES = {
    CTRL_HELLO: "Hello",
    CTRL_SETUP_CHANNEL: "SetupChannel",
    CTRL_CLOSE_CHANNEL: "CloseChannel",
    CTRL_COMPRESSION_REQUEST: "CompressionRequest",
    CTRL_COMPRESSION_RESPONSE: "CompressionResponse",
    CTRL_SETUP_ENCRYPTED_CHANNEL: "SetupEncryptedChannel",
    CTRL_FAIRPLAY_HOST_SESSION_INFO: "FairplayHostSessionInfo",
    CTRL_FAIRPLAY_DEVICE_INFO: "FairplayDeviceInfo",
    CTRL_FAIRPLAY_DEVICE_SESSION_INFO: "FairplayDeviceSessionInfo",
    CTRL_OTR_NEGOTIATION_MESSAGE: "OTRNegotiationMessage",
    CTRL_ENCRYPT_CONTROL_CHANNEL: "EncryptControlChannel",
    CTRL_SUSPEND_OTR_NEGOTIATION_MSG: "SuspendOTRNegotiationMsg",
    CTRL_UNSUPPORTED_FEATURE: "UnsupportedFeature",
}

HELLO_VERSION = "1.0"
HEALTH_TOPIC = "com.apple.private.alloy.health.sync.classc"


class AlloyError(Exception):
    pass


class FlagFieldReservedBitsSet(AlloyError):
    pass


class LengthMismatch(AlloyError):
    pass


class TopicMissing(AlloyError):
    pass


class IncompatibleVersion(AlloyError):
    pass


class UnknownChannel(AlloyError):
    pass


class DuplicateOpen(AlloyError):
    pass


class SessionDown(AlloyError):
    pass


# --- data message codec ---------------------------------------------------------

@dataclass
class AlloyMessage:
    msg_type: int
    sequence: int
    stream: int
    flags: int = 0
    response_identifier: str = ""
    message_uuid: str = ""
    topic: str | None = None
    payload: bytes = b""
    expiry: int | None = None     # absolute seconds since APPLE_EPOCH

    @property
    def type_name(self) -> str:
        return DATA_TYPE_NAMES.get(self.msg_type, "type-%d" % self.msg_type)


def _check_flag_consistency(msg: AlloyMessage) -> None:
    if msg.flags & _RESERVED_FLAGS:
        raise FlagFieldReservedBitsSet("flags 0x%02x use reserved bits" % msg.flags)
    if bool(msg.flags & FLAG_TOP) != (msg.topic is not None):
        raise TopicMissing("TOP flag and topic presence disagree")
    if msg.flags & FLAG_TOP and not msg.topic:
        raise TopicMissing("TOP set but topic empty")
    if bool(msg.flags & FLAG_EXP) != (msg.expiry is not None):
        raise LengthMismatch("EXP flag and expiry presence disagree")


def alloy_encode(msg: AlloyMessage) -> bytes:
    _check_flag_consistency(msg)
    body = bytearray()
    body += struct.pack(">IHB", msg.sequence, msg.stream, msg.flags)
    resp = msg.response_identifier.encode("ascii")
    body += struct.pack(">I", len(resp)) + resp
    uuid_text = msg.message_uuid.encode("ascii")
    body += struct.pack(">I", len(uuid_text)) + uuid_text
    if msg.flags & FLAG_TOP:
        topic = msg.topic.encode("ascii")
        body += struct.pack(">I", len(topic)) + topic
    body += msg.payload
    if msg.flags & FLAG_EXP:
        body += struct.pack(">I", msg.expiry)
    return struct.pack(">BI", msg.msg_type, len(body)) + bytes(body)


def alloy_decode(data: bytes) -> tuple[AlloyMessage, int]:
    """Decode one message from the head of data; returns (message, consumed)."""
    if len(data) < 5:
        raise LengthMismatch("need 5 header bytes, have %d" % len(data))
    msg_type, length = struct.unpack_from(">BI", data)
    end = 5 + length
    if len(data) < end:
        raise LengthMismatch("declared %d body bytes, have %d" % (length, len(data) - 5))
    body = data[5:end]
    if len(body) < 7:
        raise LengthMismatch("body shorter than fixed fields")
    sequence, stream, flags = struct.unpack_from(">IHB", body)
    if flags & _RESERVED_FLAGS:
        raise FlagFieldReservedBitsSet("flags 0x%02x use reserved bits" % flags)
    offset = 7

    def take_string(label: str) -> str:
        nonlocal offset
        if offset + 4 > len(body):
            raise LengthMismatch("truncated %s length" % label)
        (n,) = struct.unpack_from(">I", body, offset)
        offset += 4
        if offset + n > len(body):
            raise LengthMismatch("%s overruns message" % label)
        value = body[offset:offset + n].decode("ascii", "replace")
        offset += n
        return value

    response_identifier = take_string("response identifier")
    message_uuid = take_string("uuid")
    topic = None
    if flags & FLAG_TOP:
        topic = take_string("topic")
        if not topic:
            raise TopicMissing("TOP set but topic empty")
    expiry = None
    payload_end = len(body)
    if flags & FLAG_EXP:
        if len(body) - offset < 4:
            raise LengthMismatch("EXP set but no expiry bytes")
        payload_end -= 4
        (expiry,) = struct.unpack_from(">I", body, payload_end)
    payload = bytes(body[offset:payload_end])
    msg = AlloyMessage(msg_type, sequence, stream, flags,
                       response_identifier, message_uuid, topic, payload, expiry)
    return msg, end


def make_flags(topic: bool = False, expiry: bool = False, app_ack: bool = False,
               compressed: bool = False, expects_response: bool = False) -> int:
    return ((FLAG_TOP if topic else 0) | (FLAG_EXP if expiry else 0)
            | (FLAG_APP if app_ack else 0) | (FLAG_CPR if compressed else 0)
            | (FLAG_EPR if expects_response else 0))


# --- control message codec -------------------------------------------------------

@dataclass
class ControlMessage:
    msg_type: int
    body: bytes = b""

    @property
    def type_name(self) -> str:
        return CONTROL_TYPE_NAMES.get(self.msg_type, "type-%d" % self.msg_type)


def control_encode(msg: ControlMessage) -> bytes:
    return struct.pack(">BI", msg.msg_type, len(msg.body)) + msg.body


def control_decode(data: bytes) -> tuple[ControlMessage, int]:
    if len(data) < 5:
        raise LengthMismatch("need 5 header bytes, have %d" % len(data))
    msg_type, length = struct.unpack_from(">BI", data)
    if msg_type not in CONTROL_TYPE_NAMES:
        raise AlloyError("unknown control type %d" % msg_type)
    end = 5 + length
    if len(data) < end:
        raise LengthMismatch("declared %d body bytes, have %d" % (length, len(data) - 5))
    return ControlMessage(msg_type, bytes(data[5:end])), end


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 255:
        raise AlloyError("string too long for u8 length")
    return bytes([len(raw)]) + raw


def _unpack_str(data: bytes, offset: int) -> tuple[str, int]:
    if offset >= len(data):
        raise LengthMismatch("truncated string length")
    n = data[offset]
    offset += 1
    if offset + n > len(data):
        raise LengthMismatch("string overruns body")
    return data[offset:offset + n].decode("utf-8", "replace"), offset + n


def encode_hello(version: str, device_id: str, features: int) -> ControlMessage:
    return ControlMessage(CTRL_HELLO,
                          _pack_str(version) + _pack_str(device_id)
                          + struct.pack(">I", features))


def decode_hello(msg: ControlMessage) -> tuple[str, str, int]:
    version, offset = _unpack_str(msg.body, 0)
    device_id, offset = _unpack_str(msg.body, offset)
    if len(msg.body) - offset < 4:
        raise LengthMismatch("hello missing feature bits")
    (features,) = struct.unpack_from(">I", msg.body, offset)
    return version, device_id, features


@dataclass(frozen=True)
class ChannelDescriptor:
    account: str
    service: str
    name: str
    channel_uuid: bytes       # 16 raw bytes
    tcp_port: int = DATA_PORT
    protection_class: str = "C"
    urgency: str = "Default"


def encode_setup_channel(desc: ChannelDescriptor) -> ControlMessage:
    body = (_pack_str(desc.account) + _pack_str(desc.service) + _pack_str(desc.name)
            + desc.channel_uuid + struct.pack(">H", desc.tcp_port)
            + desc.protection_class.encode("ascii")
            + bytes([1 if desc.urgency == "Urgent" else 0]))
    return ControlMessage(CTRL_SETUP_CHANNEL, body)


def decode_setup_channel(msg: ControlMessage) -> ChannelDescriptor:
    account, offset = _unpack_str(msg.body, 0)
    service, offset = _unpack_str(msg.body, offset)
    name, offset = _unpack_str(msg.body, offset)
    if len(msg.body) - offset < 16 + 2 + 1 + 1:
        raise LengthMismatch("setup channel body truncated")
    channel_uuid = bytes(msg.body[offset:offset + 16])
    offset += 16
    (tcp_port,) = struct.unpack_from(">H", msg.body, offset)
    offset += 2
    protection_class = chr(msg.body[offset])
    urgency = "Urgent" if msg.body[offset + 1] else "Default"
    return ChannelDescriptor(account, service, name, channel_uuid,
                             tcp_port, protection_class, urgency)


def builtin_channels(rng: RandomSource) -> list[ChannelDescriptor]:
    channels = []
    for urgency in ("Default", "Urgent"):
        for protection_class in ("C", "D"):
            channels.append(ChannelDescriptor(
                account="idstest", service="localdelivery",
                name="UTunDelivery-Default-%s-%s" % (urgency, protection_class),
                channel_uuid=rng.bytes(16),
                protection_class=protection_class, urgency=urgency))
    return channels


BUILTIN_CHANNELS = [d.name for d in builtin_channels(RandomSource(0))]


# --- message log -----------------------------------------------------------------

class MessageLog:
    """JSON-lines sink, one object per decoded data message."""

    def __init__(self, sink):
        if isinstance(sink, str):
            sink = open(sink, "a", encoding="utf-8")
            self._owns = True
        else:
            self._owns = False
        self._sink = sink
        self._lock = threading.Lock()

    def record(self, direction: str, msg: AlloyMessage, topic: str | None) -> None:
        entry = {
            "direction": direction,
            "type": msg.msg_type,
            "stream": msg.stream,
            "topic": topic,
            "uuid": msg.message_uuid,
            "flags": msg.flags,
            "payload_hex": msg.payload.hex(),
        }
        with self._lock:
            self._sink.write(json.dumps(entry) + "\n")
            self._sink.flush()

    def close(self) -> None:
        if self._owns:
            self._sink.close()


# --- stream table -----------------------------------------------------------------

class StreamTable:
    """Stream id ↔ topic, one mapping per connection lifetime.

    The watch allocates odd ids and the phone even ones, so both ends can
    introduce topics without colliding.  Stream 0 is the ack stream.
    """

    def __init__(self, side: str):
        self._next = 1 if side == "watch" else 2
        self._by_stream: dict[int, str] = {}
        self._by_topic: dict[str, int] = {}
        self._lock = threading.Lock()

    def assign(self, topic: str) -> tuple[int, bool]:
        """(stream id, first use?) for a topic we want to send on."""
        with self._lock:
            if topic in self._by_topic:
                return self._by_topic[topic], False
            stream = self._next
            self._next += 2
            self._by_stream[stream] = topic
            self._by_topic[topic] = stream
            return stream, True

    def learn(self, stream: int, topic: str) -> None:
        with self._lock:
            known = self._by_stream.get(stream)
            if known is not None and known != topic:
                raise AlloyError("stream %d already bound to %r" % (stream, known))
            self._by_stream[stream] = topic
            self._by_topic.setdefault(topic, stream)

    def topic_of(self, stream: int) -> str | None:
        with self._lock:
            return self._by_stream.get(stream)


# --- session -----------------------------------------------------------------------

class _Channel:
    def __init__(self, descriptor: ChannelDescriptor, conn: InnerConn):
        self.descriptor = descriptor
        self.conn = conn
        self.send_seq = 1
        self.recv_seq = 0
        self.lock = threading.Lock()


class AlloySession:
    """One end of the bus; 'watch' initiates, 'phone' accepts.

    muxes maps protection class to the inner mux of that class's tunnel.
    The control channel and class-C data channels live on the C mux; -D
    channels on the D mux when one is present.
    """

    def __init__(self, side: str, muxes: dict[str, InnerMux],
                 device_id: str = "", descriptors: list[ChannelDescriptor] | None = None,
                 log: MessageLog | None = None, clock=None,
                 rng: RandomSource | None = None):
        if side not in ("phone", "watch"):
            raise ValueError("side must be 'phone' or 'watch'")
        self.side = side
        self.muxes = muxes
        self.device_id = device_id or side
        self.rng = rng or RandomSource()
        self.clock = clock or time.time
        self.log = log
        self.descriptors = descriptors
        self.streams = StreamTable(side)
        self.handlers: dict[str, object] = {}
        self.dead_letters: list[tuple[str | None, str]] = []
        self.peer_hello: tuple[str, str, int] | None = None
        self.channels: dict[str, _Channel] = {}       # name -> channel
        self.errors: list[Exception] = []
        self.unsupported_seen: list[int] = []
        self._announced: dict[str, ChannelDescriptor] = {}
        self._setup_acks: dict[str, threading.Event] = {}
        self._open_uuids: set[bytes] = set()
        self._control: InnerConn | None = None
        self._control_lock = threading.Lock()
        self._acks: dict[str, str] = {}               # uuid -> "ack"/"expired"
        self._ack_cond = threading.Condition()
        self._threads: list[threading.Thread] = []
        self._down = False
        self._send_direction = "to-watch" if side == "phone" else "to-phone"

    # -- control plane ---------------------------------------------------------

    def serve(self) -> None:
        """Phone side: accept the control connection and channel opens."""
        self.muxes["C"].listen(CONTROL_PORT, self._accept_control)
        for mux in set(self.muxes.values()):
            mux.listen(DATA_PORT, self._accept_data)

    def start(self, timeout: float = 5.0) -> None:
        """Watch side: connect control, say hello, set up and open channels."""
        if self.descriptors is None:
            self.descriptors = builtin_channels(self.rng.child("channels"))
        self.descriptors = [d for d in self.descriptors
                            if d.protection_class in self.muxes]
        control = self.muxes["C"].connect(CONTROL_PORT, timeout)
        self._control = control
        self._send_control(encode_hello(HELLO_VERSION, self.device_id, 1))
        reply, leftover = self._read_control(control, timeout)
        self._handle_hello(reply)
        for descriptor in self.descriptors:
            self._setup_acks[descriptor.name] = threading.Event()
            self._announced[descriptor.name] = descriptor
        self._spawn(self._control_loop, control, leftover)
        # one descriptor at a time: announce, await the ack, open.  The
        # lockstep keeps wire traffic a pure function of the seed.
        for descriptor in self.descriptors:
            self._send_control(encode_setup_channel(descriptor))
            if not self._setup_acks[descriptor.name].wait(timeout):
                raise SessionDown("no setup ack for %s" % descriptor.name)
            self._open_channel(descriptor, timeout)

    def _accept_control(self, conn: InnerConn) -> None:
        self._control = conn
        self._spawn(self._control_loop, conn, b"")

    def _send_control(self, msg: ControlMessage) -> None:
        if self._control is None:
            raise SessionDown("no control connection")
        with self._control_lock:
            self._control.send(control_encode(msg))

    def _read_control(self, conn: InnerConn, timeout: float | None
                      ) -> tuple[ControlMessage, bytes]:
        buffer = b""
        while True:
            try:
                msg, consumed = control_decode(buffer)
                return msg, buffer[consumed:]
            except LengthMismatch:
                pass
            chunk = conn.recv(timeout)
            if chunk == b"":
                raise SessionDown("control connection closed")
            buffer += chunk

    def _control_loop(self, conn: InnerConn, buffer: bytes) -> None:
        while not self._down:
            try:
                while True:
                    try:
                        msg, consumed = control_decode(buffer)
                    except LengthMismatch:
                        break
                    buffer = buffer[consumed:]
                    self._handle_control(msg)
                chunk = conn.recv(None)
            except (MuxClosed, InnerError, SessionDown):
                return
            except AlloyError as exc:
                self.errors.append(exc)
                return
            if chunk == b"":
                return
            buffer += chunk

    def _handle_control(self, msg: ControlMessage) -> None:
        if msg.msg_type == CTRL_HELLO:
            self._handle_hello(msg)
            self._send_control(encode_hello(HELLO_VERSION, self.device_id, 1))
        elif msg.msg_type == CTRL_SETUP_CHANNEL:
            descriptor = decode_setup_channel(msg)
            known = descriptor.name in self._announced
            self._announced[descriptor.name] = descriptor
            event = self._setup_acks.get(descriptor.name)
            if event is not None:
                event.set()
            elif not known:
                # announce back so the peer knows it may open the channel
                self._send_control(encode_setup_channel(descriptor))
        elif msg.msg_type == CTRL_CLOSE_CHANNEL:
            self._handle_close_channel(msg.body)
        elif msg.msg_type == CTRL_UNSUPPORTED_FEATURE:
            self.unsupported_seen.append(msg.body[0] if msg.body else -1)
        else:
            self._send_control(ControlMessage(CTRL_UNSUPPORTED_FEATURE,
                                              bytes([msg.msg_type])))

    def _handle_hello(self, msg: ControlMessage) -> None:
        if msg.msg_type != CTRL_HELLO:
            raise AlloyError("expected Hello, got %s" % msg.type_name)
        version, device_id, features = decode_hello(msg)
        if version.split(".")[0] != HELLO_VERSION.split(".")[0]:
            raise IncompatibleVersion("peer speaks %s, we speak %s"
                                      % (version, HELLO_VERSION))
        self.peer_hello = (version, device_id, features)

    def _handle_close_channel(self, body: bytes) -> None:
        for name, channel in list(self.channels.items()):
            if channel.descriptor.channel_uuid == body:
                channel.conn.close()
                self._open_uuids.discard(body)
                del self.channels[name]

    def close_channel(self, name: str) -> None:
        channel = self.channels.get(name)
        if channel is None:
            return
        self._send_control(ControlMessage(CTRL_CLOSE_CHANNEL,
                                          channel.descriptor.channel_uuid))
        self._handle_close_channel(channel.descriptor.channel_uuid)

    # -- data channels -----------------------------------------------------------

    def _open_channel(self, descriptor: ChannelDescriptor, timeout: float) -> None:
        mux = self.muxes[descriptor.protection_class]
        conn = mux.connect(descriptor.tcp_port, timeout)
        name = descriptor.name.encode("utf-8")
        conn.send(bytes([len(name)]) + name + descriptor.channel_uuid)
        verdict = conn.recv(timeout)
        if verdict != b"\x01":
            conn.close()
            raise UnknownChannel("peer rejected channel %s" % descriptor.name)
        self._register_channel(descriptor, conn)

    def _accept_data(self, conn: InnerConn) -> None:
        # mux listeners must not block the delivery thread: the preamble
        # arrives in a later packet, so reading it here would deadlock
        self._spawn(self._accept_data_worker, conn)

    def _accept_data_worker(self, conn: InnerConn) -> None:
        try:
            preamble = conn.recv(5.0)
        except (InnerError, MuxClosed):
            return
        if not preamble:
            return
        name_len = preamble[0]
        if len(preamble) < 1 + name_len + 16:
            conn.send(b"\x00")
            conn.close()
            return
        name = preamble[1:1 + name_len].decode("utf-8", "replace")
        channel_uuid = preamble[1 + name_len:1 + name_len + 16]
        descriptor = self._announced.get(name)
        if descriptor is None or descriptor.channel_uuid != channel_uuid:
            self.errors.append(UnknownChannel("open for unannounced %r" % name))
            conn.send(b"\x00")
            conn.close()
            return
        if channel_uuid in self._open_uuids:
            self.errors.append(DuplicateOpen("channel %s already open" % name))
            conn.send(b"\x00")
            conn.close()
            return
        conn.send(b"\x01")
        self._register_channel(descriptor, conn)

    def _register_channel(self, descriptor: ChannelDescriptor, conn: InnerConn) -> None:
        channel = _Channel(descriptor, conn)
        self.channels[descriptor.name] = channel
        self._open_uuids.add(descriptor.channel_uuid)
        self._spawn(self._channel_loop, channel)

    def _channel_loop(self, channel: _Channel) -> None:
        buffer = b""
        while not self._down:
            try:
                while len(buffer) >= 5:
                    try:
                        msg, consumed = alloy_decode(buffer)
                    except LengthMismatch:
                        break
                    buffer = buffer[consumed:]
                    self._on_message(channel, msg)
                chunk = channel.conn.recv(None)
            except (MuxClosed, InnerError):
                return
            if chunk == b"":
                return
            buffer += chunk

    # -- sending -------------------------------------------------------------------

    def register_handler(self, topic: str, handler) -> None:
        self.handlers[topic] = handler

    def _pick_channel(self, topic: str, urgency: str) -> _Channel:
        protection_class = "D" if topic.endswith("classd") else "C"
        if protection_class not in self.muxes:
            protection_class = next(iter(self.muxes))
        name = "UTunDelivery-Default-%s-%s" % (urgency, protection_class)
        channel = self.channels.get(name)
        if channel is None:
            # fall back to any open channel of the right class
            for candidate in self.channels.values():
                if candidate.descriptor.protection_class == protection_class:
                    return candidate
            raise SessionDown("no open channel for class %s" % protection_class)
        return channel

    def send_on_topic(self, topic: str, payload: bytes, msg_type: int = TYPE_DATA,
                      wants_app_ack: bool = False, expiry_in: float | None = None,
                      expects_response: bool = False, compress: bool = False,
                      urgency: str = "Default") -> str:
        if self._down:
            raise SessionDown("session closed")
        channel = self._pick_channel(topic, urgency)
        stream, first_use = self.streams.assign(topic)
        body = zlib.compress(payload) if compress else payload
        expiry = None
        if expiry_in is not None:
            expiry = int(self.clock() - APPLE_EPOCH + expiry_in)
        flags = make_flags(topic=first_use, expiry=expiry is not None,
                           app_ack=wants_app_ack, compressed=compress,
                           expects_response=expects_response)
        message_uuid = str(self.rng.uuid4())
        with channel.lock:
            msg = AlloyMessage(msg_type, channel.send_seq, stream, flags,
                               "", message_uuid, topic if first_use else None,
                               body, expiry)
            channel.send_seq += 1
            channel.conn.send(alloy_encode(msg))
        if self.log is not None:
            self.log.record(self._send_direction, msg, topic)
        return message_uuid

    def _send_ack(self, channel: _Channel, ack_type: int, original_uuid: str) -> None:
        with channel.lock:
            msg = AlloyMessage(ack_type, channel.send_seq, 0, 0,
                               original_uuid, str(self.rng.uuid4()), None, b"", None)
            channel.send_seq += 1
            try:
                channel.conn.send(alloy_encode(msg))
            except (MuxClosed, InnerError):
                return
        if self.log is not None:
            self.log.record(self._send_direction, msg, None)

    # -- receiving -------------------------------------------------------------------

    def _on_message(self, channel: _Channel, msg: AlloyMessage) -> None:
        if msg.sequence <= channel.recv_seq:
            return  # sequence must strictly increase per connection: drop
        channel.recv_seq = msg.sequence
        topic = None
        if msg.stream != 0:
            if msg.topic is not None:
                self.streams.learn(msg.stream, msg.topic)
            topic = self.streams.topic_of(msg.stream)
        if self.log is not None:
            self.log.record("to-watch" if self.side == "watch" else "to-phone",
                            msg, topic)
        if msg.msg_type in (TYPE_ACK, TYPE_EXPIRED_ACK):
            with self._ack_cond:
                self._acks[msg.response_identifier] = (
                    "ack" if msg.msg_type == TYPE_ACK else "expired")
                self._ack_cond.notify_all()
            return
        expired = (msg.expiry is not None
                   and msg.expiry + APPLE_EPOCH < self.clock())
        if expired:
            self._send_ack(channel, TYPE_EXPIRED_ACK, msg.message_uuid)
            return
        if msg.flags & FLAG_APP:
            self._send_ack(channel, TYPE_ACK, msg.message_uuid)
        payload = msg.payload
        if msg.flags & FLAG_CPR:
            try:
                payload = zlib.decompress(payload)
            except zlib.error:
                self.dead_letters.append((topic, msg.message_uuid))
                return
        handler = self.handlers.get(topic) if topic else None
        if handler is None:
            self.dead_letters.append((topic, msg.message_uuid))
            return
        handler(payload, msg)

    def wait_ack(self, message_uuid: str, timeout: float = 5.0) -> str:
        deadline = time.monotonic() + timeout
        with self._ack_cond:
            while message_uuid not in self._acks:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise AlloyError("no ack for %s" % message_uuid)
                self._ack_cond.wait(remaining)
            return self._acks.pop(message_uuid)

    # -- lifecycle ---------------------------------------------------------------------

    def _spawn(self, target, *args) -> None:
        thread = threading.Thread(target=target, args=args, daemon=True)
        thread.start()
        self._threads.append(thread)

    def close(self) -> None:
        self._down = True
        for channel in list(self.channels.values()):
            channel.conn.close()
        if self._control is not None:
            self._control.close()

"""Message bus codec and session behavior."""

import io
import json
import struct
import threading
import time

import pytest

from witchstack import alloy
from witchstack.alloy import (
    AlloyMessage,
    AlloySession,
    ChannelDescriptor,
    ControlMessage,
    FLAG_APP,
    FLAG_CPR,
    FLAG_EXP,
    FLAG_TOP,
    FlagFieldReservedBitsSet,
    LengthMismatch,
    MessageLog,
    StreamTable,
    TopicMissing,
    alloy_decode,
    alloy_encode,
    control_decode,
    control_encode,
)
from witchstack.inner import InnerMux
from witchstack.rng import RandomSource


def hand_encode(msg_type, sequence, stream, flags, resp, uuid, topic, payload, expiry):
    """Independent reference encoder, assembled field by field."""
    body = struct.pack(">IHB", sequence, stream, flags)
    body += struct.pack(">I", len(resp)) + resp.encode()
    body += struct.pack(">I", len(uuid)) + uuid.encode()
    if topic is not None:
        body += struct.pack(">I", len(topic)) + topic.encode()
    body += payload
    if expiry is not None:
        body += struct.pack(">I", expiry)
    return struct.pack(">BI", msg_type, len(body)) + body


def test_data_message_layout():
    msg = AlloyMessage(0x00, 1, 1, FLAG_TOP | FLAG_EXP, "", "ABC",
                       "net.test", b"hi", 0x01020304)
    wire = alloy_encode(msg)
    assert wire == hand_encode(0, 1, 1, 0x18, "", "ABC", "net.test", b"hi", 0x01020304)
    # length covers everything after itself
    assert struct.unpack_from(">I", wire, 1)[0] == len(wire) - 5
    # topic plus expiry is exactly flag byte 0x18
    assert wire[11] == 0x18


def test_flag_bits():
    assert FLAG_TOP == 0x10 and FLAG_EXP == 0x08 and FLAG_APP == 0x04
    assert alloy.FLAG_CPR == 0x02 and alloy.FLAG_EPR == 0x01
    assert alloy.make_flags(topic=True, expiry=True) == 0x18


def test_round_trip_variants():
    rng = RandomSource(11)
    for i in range(1000):
        flags = 0
        topic = None
        expiry = None
        if rng.bytes(1)[0] & 1:
            flags |= FLAG_TOP
            topic = "topic-%d" % i
        if rng.bytes(1)[0] & 1:
            flags |= FLAG_EXP
            expiry = int.from_bytes(rng.bytes(4), "big")
        flags |= rng.bytes(1)[0] & (FLAG_APP | FLAG_CPR | alloy.FLAG_EPR)
        msg = AlloyMessage(rng.bytes(1)[0] % 6, i + 1, (i % 7) + 1, flags,
                           str(rng.uuid4()) if flags & FLAG_APP else "",
                           str(rng.uuid4()), topic,
                           rng.bytes(rng.bytes(1)[0]), expiry)
        wire = alloy_encode(msg)
        decoded, consumed = alloy_decode(wire + b"trailing")
        assert consumed == len(wire)
        assert decoded == msg


def test_reserved_flag_bits_rejected():
    good = alloy_encode(AlloyMessage(0, 1, 1, 0, "", "u", None, b"x", None))
    bad = bytearray(good)
    bad[11] |= 0x80
    with pytest.raises(FlagFieldReservedBitsSet):
        alloy_decode(bytes(bad))
    with pytest.raises(FlagFieldReservedBitsSet):
        alloy_encode(AlloyMessage(0, 1, 1, 0x40, "", "u", None, b"", None))


def test_topic_flag_must_match_topic():
    with pytest.raises(TopicMissing):
        alloy_encode(AlloyMessage(0, 1, 1, FLAG_TOP, "", "u", None, b"", None))
    with pytest.raises(TopicMissing):
        alloy_encode(AlloyMessage(0, 1, 1, 0, "", "u", "t", b"", None))
    with pytest.raises(TopicMissing):
        alloy_encode(AlloyMessage(0, 1, 1, FLAG_TOP, "", "u", "", b"", None))
    # zero length topic on the wire
    wire = hand_encode(0, 1, 1, FLAG_TOP, "", "u", "", b"", None)
    with pytest.raises(TopicMissing):
        alloy_decode(wire)


def test_length_mismatch():
    wire = alloy_encode(AlloyMessage(0, 1, 1, 0, "", "u", None, b"payload", None))
    with pytest.raises(LengthMismatch):
        alloy_decode(wire[:-2])
    grown = bytearray(wire)
    struct.pack_into(">I", grown, 1, len(wire))  # claims more than present
    with pytest.raises(LengthMismatch):
        alloy_decode(bytes(grown))


def test_decode_fuzz_never_hangs():
    rng = RandomSource(12)
    outcomes = {"ok": 0, "rejected": 0}
    for _ in range(3000):
        blob = rng.bytes(rng.bytes(1)[0])
        try:
            alloy_decode(blob)
            outcomes["ok"] += 1
        except alloy.AlloyError:
            outcomes["rejected"] += 1
    assert outcomes["rejected"] > 0


def test_control_codec():
    for ctype in list(alloy.CONTROL_TYPE_NAMES):
        msg = ControlMessage(ctype, b"body-%d" % ctype)
        wire = control_encode(msg)
        assert wire[0] == ctype
        assert struct.unpack_from(">I", wire, 1)[0] == len(msg.body)
        decoded, consumed = control_decode(wire + b"xx")
        assert decoded == msg and consumed == len(wire)
    with pytest.raises(alloy.AlloyError):
        control_decode(bytes([0x50]) + b"\x00\x00\x00\x00")


def test_control_type_table():
    names = alloy.CONTROL_TYPE_NAMES
    assert names[1] == "Hello"
    assert names[2] == "SetupChannel"
    assert names[3] == "CloseChannel"
    assert names[4] == "CompressionRequest"
    assert names[5] == "CompressionResponse"
    assert names[6] == "SetupEncryptedChannel"
    assert names[7] == "FairplayHostSessionInfo"
    assert names[8] == "FairplayDeviceInfo"
    assert names[9] == "FairplayDeviceSessionInfo"
    assert names[10] == "OTRNegotiationMessage"
    assert names[11] == "EncryptControlChannel"
    assert names[12] == "SuspendOTRNegotiationMsg"
    assert names[0x7F] == "UnsupportedFeature"


def test_hello_codec_and_version_gate():
    hello = alloy.encode_hello("1.0", "phone-1", 7)
    assert alloy.decode_hello(hello) == ("1.0", "phone-1", 7)
    session = AlloySession("phone", {})
    with pytest.raises(alloy.IncompatibleVersion):
        session._handle_hello(alloy.encode_hello("2.0", "future", 0))
    session._handle_hello(alloy.encode_hello("1.3", "minor-skew", 0))
    assert session.peer_hello == ("1.3", "minor-skew", 0)


def test_channel_descriptor_names():
    rng = RandomSource(3)
    names = [d.name for d in alloy.builtin_channels(rng)]
    assert names == [
        "UTunDelivery-Default-Default-C",
        "UTunDelivery-Default-Default-D",
        "UTunDelivery-Default-Urgent-C",
        "UTunDelivery-Default-Urgent-D",
    ]
    for descriptor in alloy.builtin_channels(rng):
        assert descriptor.account == "idstest"
        assert descriptor.service == "localdelivery"
        assert descriptor.name.rsplit("-", 1)[1] == descriptor.protection_class


def test_stream_table():
    table = StreamTable("watch")
    stream, first = table.assign("a")
    assert (stream, first) == (1, True)
    assert table.assign("a") == (1, False)
    assert table.assign("b") == (3, True)
    other = StreamTable("phone")
    assert other.assign("x")[0] == 2
    other.learn(1, "a")
    assert other.topic_of(1) == "a"
    with pytest.raises(alloy.AlloyError):
        other.learn(1, "different")


def session_pair(clock=None, phone_kwargs=None, watch_kwargs=None):
    holder = {}

    def to_watch(data):
        threading.Thread(target=holder["watch_mux"].handle_packet, args=(data,)).start()

    def to_phone(data):
        threading.Thread(target=holder["phone_mux"].handle_packet, args=(data,)).start()

    holder["phone_mux"] = InnerMux("phone", to_watch)
    holder["watch_mux"] = InnerMux("watch", to_phone)
    descriptors = [d for d in alloy.builtin_channels(RandomSource(77))
                   if d.protection_class == "C"]
    phone = AlloySession("phone", {"C": holder["phone_mux"]}, device_id="phone-dev",
                         rng=RandomSource(101), clock=clock,
                         **(phone_kwargs or {}))
    watch = AlloySession("watch", {"C": holder["watch_mux"]}, device_id="watch-dev",
                         rng=RandomSource(102), clock=clock,
                         descriptors=descriptors, **(watch_kwargs or {}))
    phone.serve()
    watch.start(timeout=5.0)
    return phone, watch


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.005)
    return predicate()


def test_session_handshake_and_channels():
    phone, watch = session_pair()
    try:
        assert watch.peer_hello[1] == "phone-dev"
        assert wait_for(lambda: phone.peer_hello is not None)
        assert phone.peer_hello[1] == "watch-dev"
        names = set(watch.channels)
        assert names == {"UTunDelivery-Default-Default-C",
                         "UTunDelivery-Default-Urgent-C"}
        assert wait_for(lambda: set(phone.channels) == names)
    finally:
        watch.close()
        phone.close()


def test_topic_dispatch_and_elision():
    phone_log = MessageLog(io.StringIO())
    phone, watch = session_pair(phone_kwargs={"log": phone_log})
    got = []
    try:
        phone.register_handler("net.example.echo",
                               lambda payload, msg: got.append(payload))
        watch.send_on_topic("net.example.echo", b"first")
        watch.send_on_topic("net.example.echo", b"second")
        assert wait_for(lambda: len(got) == 2)
        assert got == [b"first", b"second"]
        entries = [json.loads(line) for line
                   in phone_log._sink.getvalue().splitlines()]
        received = [e for e in entries if e["direction"] == "to-phone"]
        assert received[0]["flags"] & FLAG_TOP
        assert not received[1]["flags"] & FLAG_TOP
        # topic is recovered from the stream table even when elided
        assert received[0]["topic"] == received[1]["topic"] == "net.example.echo"
        assert received[0]["stream"] == received[1]["stream"] == 1
        assert received[0]["payload_hex"] == b"first".hex()
    finally:
        watch.close()
        phone.close()


def test_both_directions_share_stream():
    phone, watch = session_pair()
    got = []
    try:
        watch.register_handler("net.example.bidi",
                               lambda payload, msg: got.append(msg))
        phone.register_handler("net.example.bidi", lambda payload, msg: None)
        watch.send_on_topic("net.example.bidi", b"from watch")
        assert wait_for(lambda: phone.streams.topic_of(1) == "net.example.bidi")
        phone.send_on_topic("net.example.bidi", b"from phone")
        assert wait_for(lambda: len(got) == 1)
        assert got[0].stream == 1     # learned, not re-allocated as 2
        assert got[0].topic is None   # elided: watch introduced the stream
    finally:
        watch.close()
        phone.close()


def test_app_ack_round_trip():
    phone, watch = session_pair()
    try:
        phone.register_handler("net.example.ack", lambda payload, msg: None)
        uuid = watch.send_on_topic("net.example.ack", b"ping", wants_app_ack=True)
        assert watch.wait_ack(uuid, timeout=5.0) == "ack"
    finally:
        watch.close()
        phone.close()


def test_expired_message_short_circuits():
    clock = time.time
    phone, watch = session_pair(clock=clock)
    got = []
    try:
        phone.register_handler("net.example.stale",
                               lambda payload, msg: got.append(payload))
        uuid = watch.send_on_topic("net.example.stale", b"old news",
                                   wants_app_ack=True, expiry_in=-30.0)
        assert watch.wait_ack(uuid, timeout=5.0) == "expired"
        time.sleep(0.05)
        assert got == []   # handler never sees an expired message
        fresh = watch.send_on_topic("net.example.stale", b"new",
                                    wants_app_ack=True, expiry_in=60.0)
        assert watch.wait_ack(fresh, timeout=5.0) == "ack"
        assert wait_for(lambda: got == [b"new"])
    finally:
        watch.close()
        phone.close()


def test_compression_is_truthful_and_transparent():
    phone_log = MessageLog(io.StringIO())
    phone, watch = session_pair(phone_kwargs={"log": phone_log})
    got = []
    try:
        phone.register_handler("net.example.zip",
                               lambda payload, msg: got.append((payload, msg.flags)))
        body = b"squeeze me " * 50
        watch.send_on_topic("net.example.zip", body, compress=True)
        watch.send_on_topic("net.example.zip", body, compress=False)
        assert wait_for(lambda: len(got) == 2)
        assert got[0][0] == got[1][0] == body
        assert got[0][1] & FLAG_CPR and not got[1][1] & FLAG_CPR
        entries = [json.loads(line) for line
                   in phone_log._sink.getvalue().splitlines()]
        received = [e for e in entries if e["direction"] == "to-phone"]
        assert len(bytes.fromhex(received[0]["payload_hex"])) < len(body)
        assert bytes.fromhex(received[1]["payload_hex"]) == body
    finally:
        watch.close()
        phone.close()


def test_unknown_topic_dead_letters():
    phone, watch = session_pair()
    try:
        uuid = watch.send_on_topic("net.example.nobody-home", b"hello?")
        assert wait_for(lambda: phone.dead_letters != [])
        assert phone.dead_letters[0] == ("net.example.nobody-home", uuid)
    finally:
        watch.close()
        phone.close()


def test_stale_sequence_dropped():
    phone, watch = session_pair()
    got = []
    try:
        phone.register_handler("net.example.seq",
                               lambda payload, msg: got.append(payload))
        watch.send_on_topic("net.example.seq", b"one")
        assert wait_for(lambda: got == [b"one"])
        channel = watch.channels["UTunDelivery-Default-Default-C"]
        replay = AlloyMessage(0, 1, 1, 0, "", "dup-uuid", None, b"replayed", None)
        channel.conn.send(alloy_encode(replay))
        time.sleep(0.1)
        assert got == [b"one"]
    finally:
        watch.close()
        phone.close()


def test_unsupported_control_features_answered():
    phone, watch = session_pair()
    try:
        for ctype in range(4, 13):
            watch._send_control(ControlMessage(ctype, b""))
        assert wait_for(lambda: len(watch.unsupported_seen) == 9)
        assert watch.unsupported_seen == list(range(4, 13))
        # the session still works afterwards
        phone.register_handler("net.example.after", lambda payload, msg: None)
        uuid = watch.send_on_topic("net.example.after", b"x", wants_app_ack=True)
        assert watch.wait_ack(uuid, timeout=5.0) == "ack"
    finally:
        watch.close()
        phone.close()


def test_duplicate_channel_open_rejected():
    phone, watch = session_pair()
    try:
        descriptor = watch.channels["UTunDelivery-Default-Default-C"].descriptor
        with pytest.raises(alloy.UnknownChannel):
            watch._open_channel(descriptor, timeout=2.0)
        assert wait_for(lambda: phone.errors != [])
        assert isinstance(phone.errors[0], alloy.DuplicateOpen)
    finally:
        watch.close()
        phone.close()


def test_unannounced_channel_open_rejected():
    phone, watch = session_pair()
    try:
        rogue = ChannelDescriptor("idstest", "localdelivery",
                                  "UTunDelivery-Rogue-C", bytes(16))
        with pytest.raises(alloy.UnknownChannel):
            watch._open_channel(rogue, timeout=2.0)
    finally:
        watch.close()
        phone.close()


def test_close_channel_reopenable():
    phone, watch = session_pair()
    try:
        name = "UTunDelivery-Default-Urgent-C"
        descriptor = watch.channels[name].descriptor
        watch.close_channel(name)
        assert name not in watch.channels
        assert wait_for(lambda: name not in phone.channels)
        watch._open_channel(descriptor, timeout=2.0)
        assert name in watch.channels
        assert wait_for(lambda: name in phone.channels)
    finally:
        watch.close()
        phone.close()

import ipaddress
import json
import queue
import random
import socket
import struct
import threading
import time

import pytest

from witchstack.inner import InnerMux, MuxClosed
from witchstack.shoes import (
    DENY_CONDITIONS,
    DENY_DIAL,
    DENY_FIREWALL,
    DENY_UNSUPPORTED,
    DOMAIN_PROXY,
    FLAG_CELLULAR,
    FLAG_CONSTRAINED,
    FLAG_DENIED,
    FLAG_EXPENSIVE,
    FLAG_WIFI,
    Firewall,
    FirewallRule,
    InvalidGlob,
    Malformed,
    NETWORK_STATES,
    REPLY_SIZE,
    REQUEST_BONJOUR,
    REQUEST_HOST,
    REQUEST_IPV4,
    REQUEST_IPV6,
    ReservedBitsSet,
    ShoesError,
    ShoesReply,
    ShoesRequest,
    ShoesServer,
    shoes_connect,
    shoes_decode_reply,
    shoes_decode_request,
    shoes_encode_reply,
    shoes_encode_request,
)


# --- reply codec --------------------------------------------------------------


def test_flag_bits_match_documented_positions():
    # E M W C D occupy bits 7..3 of the flags byte; bits 2..0 stay zero
    assert FLAG_EXPENSIVE == 1 << 7
    assert FLAG_CELLULAR == 1 << 6
    assert FLAG_WIFI == 1 << 5
    assert FLAG_CONSTRAINED == 1 << 4
    assert FLAG_DENIED == 1 << 3


def test_reply_layout_vectors():
    success_on_wifi = shoes_encode_reply(ShoesReply(0, 0, FLAG_WIFI))
    assert success_on_wifi == b"\x00\x06\x00\x00\x04\x00\x01\x20"
    denied = shoes_encode_reply(
        ShoesReply(DOMAIN_PROXY, DENY_FIREWALL, FLAG_DENIED))
    assert denied == b"\x00\x06\x01\x01\x04\x00\x01\x08"
    expensive_cellular = shoes_encode_reply(
        ShoesReply(0, 0, FLAG_EXPENSIVE | FLAG_CELLULAR))
    assert expensive_cellular[7] == 0xC0


def test_reply_always_eight_bytes_and_round_trips():
    for domain in (0, 1, 7, 255):
        for code in (0, 1, 4, 200):
            for flags in (0, 0x08, 0x20, 0xC0, 0xF8):
                reply = ShoesReply(domain, code, flags)
                raw = shoes_encode_reply(reply)
                assert len(raw) == REPLY_SIZE == 8
                assert raw[:2] == b"\x00\x06"
                assert shoes_decode_reply(raw) == reply


def test_reply_reserved_bits_rejected():
    with pytest.raises(ReservedBitsSet):
        shoes_encode_reply(ShoesReply(0, 0, FLAG_WIFI | 0x01))
    wire = bytearray(shoes_encode_reply(ShoesReply(0, 0, FLAG_WIFI)))
    wire[7] |= 0x04
    with pytest.raises(ReservedBitsSet):
        shoes_decode_reply(bytes(wire))


def test_reply_decode_rejects_malformed():
    good = shoes_encode_reply(ShoesReply(0, 0, FLAG_WIFI))
    with pytest.raises(Malformed):
        shoes_decode_reply(good[:7])
    with pytest.raises(Malformed):
        shoes_decode_reply(good + b"\x00")
    with pytest.raises(Malformed):
        shoes_decode_reply(b"\x00\x07" + good[2:])
    bad_tlv = bytearray(good)
    bad_tlv[4] = 0x05
    with pytest.raises(Malformed):
        shoes_decode_reply(bytes(bad_tlv))
    bad_tlv_len = bytearray(good)
    bad_tlv_len[6] = 0x02
    with pytest.raises(Malformed):
        shoes_decode_reply(bytes(bad_tlv_len))


# --- request codec --------------------------------------------------------------


def test_request_layout_vector():
    request = ShoesRequest(REQUEST_HOST, 443, "api.example",
                           "nsurlsessiond", FLAG_WIFI)
    body = bytes([REQUEST_HOST]) + struct.pack(">H", 443)
    body += bytes([len(b"api.example")]) + b"api.example"
    body += bytes([0x01]) + struct.pack(">H", 13) + b"nsurlsessiond"
    body += bytes([0x02]) + struct.pack(">H", 1) + bytes([FLAG_WIFI])
    assert shoes_encode_request(request) == struct.pack(">H", len(body)) + body


def test_request_length_counts_everything_after_itself():
    raw = shoes_encode_request(ShoesRequest(REQUEST_IPV4, 80, "10.0.0.7"))
    (declared,) = struct.unpack_from(">H", raw)
    assert declared == len(raw) - 2


def test_request_round_trip_randomized():
    rng = random.Random(62742)
    letters = "abcdefghijklmnopqrstuvwxyz0123456789-."
    for _ in range(1200):
        request_type = rng.choice(
            (REQUEST_HOST, REQUEST_IPV4, REQUEST_IPV6, REQUEST_BONJOUR))
        if request_type in (REQUEST_HOST, REQUEST_BONJOUR):
            destination = "".join(
                rng.choice(letters) for _ in range(rng.randrange(1, 64)))
        elif request_type == REQUEST_IPV4:
            destination = str(ipaddress.IPv4Address(rng.randbytes(4)))
        else:
            destination = str(ipaddress.IPv6Address(rng.randbytes(16)))
        request = ShoesRequest(
            request_type, rng.randrange(1 << 16), destination,
            rng.choice(("", "healthd", "terminusd", "proc-%d" % rng.randrange(99))),
            rng.choice((0, FLAG_WIFI, FLAG_WIFI | FLAG_CONSTRAINED, 0xF8)))
        assert shoes_decode_request(shoes_encode_request(request)) == request


def test_request_unknown_tlv_skipped():
    raw = bytearray(shoes_encode_request(
        ShoesRequest(REQUEST_HOST, 80, "example.net", "curl")))
    extra = bytes([0x7F]) + struct.pack(">H", 3) + b"xyz"
    raw += extra
    struct.pack_into(">H", raw, 0, len(raw) - 2)
    decoded = shoes_decode_request(bytes(raw))
    assert decoded.destination == "example.net"
    assert decoded.process_name == "curl"


def test_request_decode_rejects_malformed():
    good = shoes_encode_request(ShoesRequest(REQUEST_HOST, 80, "a.example"))
    with pytest.raises(Malformed):
        shoes_decode_request(b"\x00")
    with pytest.raises(Malformed):
        shoes_decode_request(good[:-1])      # declared length too long
    with pytest.raises(Malformed):
        shoes_decode_request(good + b"\x00")  # trailing unclaimed byte
    with pytest.raises(ShoesError):
        bad_type = bytearray(good)
        bad_type[2] = 0x99
        shoes_decode_request(bytes(bad_type))
    truncated_name = bytearray(good)
    truncated_name[5] = 250                   # name length overrunning body
    with pytest.raises(Malformed):
        shoes_decode_request(bytes(truncated_name))
    short_ip = struct.pack(">H", 5) + bytes([REQUEST_IPV4]) + b"\x00\x50\x0a\x00"
    with pytest.raises(Malformed):
        shoes_decode_request(short_ip)
    bad_cond = bytearray(shoes_encode_request(
        ShoesRequest(REQUEST_HOST, 80, "a", condition_flags=FLAG_WIFI)))
    bad_cond[-2] = 0x00                       # conditions TLV length -> 0... mismatch
    with pytest.raises(Malformed):
        shoes_decode_request(bytes(bad_cond))


def test_request_fuzz_never_crashes():
    rng = random.Random(808)
    survived = 0
    for _ in range(3000):
        blob = rng.randbytes(rng.randrange(0, 80))
        if rng.random() < 0.4 and len(blob) >= 2:
            blob = struct.pack(">H", len(blob) - 2) + blob[2:]
        try:
            shoes_decode_request(blob)
            survived += 1
        except ShoesError:
            pass
    assert survived >= 0  # only ShoesError subclasses may escape


# --- firewall -----------------------------------------------------------------


def test_precedence_pair_over_process_over_host():
    firewall = Firewall()
    firewall.add_rule("block", host="*.example")
    assert firewall.decide("api.example", "healthd") == "block"
    firewall.add_rule("allow", process="healthd")
    assert firewall.decide("api.example", "healthd") == "allow"
    assert firewall.decide("api.example", "other") == "block"
    firewall.add_rule("block", host="api.example", process="healthd")
    assert firewall.decide("api.example", "healthd") == "block"
    assert firewall.decide("cdn.example", "healthd") == "allow"
    assert firewall.decide("elsewhere.net", "anything") == "allow"


def test_latest_rule_wins_within_tier():
    firewall = Firewall()
    firewall.add_rule("block", host="tracker.*")
    firewall.add_rule("allow", host="tracker.example")
    assert firewall.decide("tracker.example", "x") == "allow"
    assert firewall.decide("tracker.net", "x") == "block"
    firewall.add_rule("block", host="tracker.example")
    assert firewall.decide("tracker.example", "x") == "block"


def test_glob_matching_is_case_insensitive():
    firewall = Firewall()
    firewall.add_rule("block", host="Tracker.*")
    assert firewall.decide("tracker.EXAMPLE", "x") == "block"
    assert firewall.decide("TRACKER.net", "x") == "block"
    assert firewall.decide("nottracker.net", "x") == "allow"


def test_invalid_rules_rejected():
    with pytest.raises(InvalidGlob):
        FirewallRule("block")
    with pytest.raises(InvalidGlob):
        FirewallRule("block", host="   ")
    with pytest.raises(InvalidGlob):
        FirewallRule("allow", process="")
    with pytest.raises(InvalidGlob):
        FirewallRule("deny", host="*")


def test_rules_persist_to_json_and_reload(tmp_path):
    path = str(tmp_path / "rules.json")
    firewall = Firewall(rules_path=path)
    firewall.add_rule("block", host="ads.*")
    firewall.add_rule("allow", host="ads.example", process="newsd")
    with open(path, "r", encoding="utf-8") as handle:
        records = json.load(handle)
    assert [r["action"] for r in records] == ["block", "allow"]
    reloaded = Firewall(rules_path=path)
    assert reloaded.decide("ads.net", "x") == "block"
    assert reloaded.decide("ads.example", "newsd") == "allow"
    reloaded.clear_rules()
    assert Firewall(rules_path=path).decide("ads.net", "x") == "allow"


def test_precedence_matches_brute_force_oracle():
    rng = random.Random(4242)
    hosts = ["api.example", "cdn.example", "tracker.net", "a.b.c"]
    patterns = ["*.example", "api.*", "tracker.net", "*", "a.b.c", "nomatch"]
    processes = ["healthd", "newsd", "curl"]

    def oracle(rules, host, process):
        best = None  # (tier, index)
        for index, rule in enumerate(rules):
            if rule.matches(host, process):
                key = (rule.tier, index)
                if best is None or key > best[0]:
                    best = (key, rule.action)
        return "allow" if best is None else best[1]

    for _ in range(300):
        firewall = Firewall()
        rules = []
        for _ in range(rng.randrange(0, 7)):
            tier = rng.randrange(3)
            host = rng.choice(patterns) if tier != 1 else None
            process = rng.choice(processes) if tier != 0 else None
            action = rng.choice(("allow", "block"))
            rules.append(firewall.add_rule(action, host=host, process=process))
        for _ in range(10):
            host = rng.choice(hosts)
            process = rng.choice(processes + ["unknownd"])
            assert firewall.decide(host, process) == oracle(rules, host, process)


# --- proxy server end to end -----------------------------------------------------


def wait_until(predicate, timeout=5.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return predicate()


def linked_muxes():
    """Ordered, non-blocking delivery between two muxes via queue pumps."""
    to_phone, to_watch = queue.Queue(), queue.Queue()
    phone = InnerMux("phone", to_watch.put)
    watch = InnerMux("watch", to_phone.put)

    def pump(source, mux):
        while True:
            data = source.get()
            if data is None:
                return
            mux.handle_packet(data)

    threading.Thread(target=pump, args=(to_watch, watch), daemon=True).start()
    threading.Thread(target=pump, args=(to_phone, phone), daemon=True).start()
    return phone, watch


class EchoTap:
    """Loopback TCP echo server that counts every byte it receives."""

    def __init__(self):
        self.listener = socket.socket()
        self.listener.bind(("127.0.0.1", 0))
        self.listener.listen(8)
        self.port = self.listener.getsockname()[1]
        self.received = 0
        self._lock = threading.Lock()
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self):
        while True:
            try:
                conn, _ = self.listener.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,),
                             daemon=True).start()

    def _serve(self, conn):
        with conn:
            while True:
                data = conn.recv(4096)
                if not data:
                    return
                with self._lock:
                    self.received += len(data)
                conn.sendall(data)

    def close(self):
        self.listener.close()


@pytest.fixture()
def tap():
    server = EchoTap()
    yield server
    server.close()


def proxy_pair(tap, network="wifi", firewall=None, dialer=None):
    firewall = firewall or Firewall()
    if dialer is None:
        def dialer(host, port):
            if host in ("echo.local", "127.0.0.1"):
                return socket.create_connection(("127.0.0.1", tap.port), 2.0)
            raise ConnectionRefusedError(host)
    server = ShoesServer(firewall, network=network, dialer=dialer)
    phone, watch = linked_muxes()
    server.attach(phone)
    return watch, server, firewall


def test_allowed_transfer_echoes_and_counts(tap):
    watch, server, firewall = proxy_pair(tap)
    request = ShoesRequest(REQUEST_HOST, tap.port, "echo.local", "healthd")
    reply, conn = shoes_connect(watch, request, timeout=5.0)
    assert (reply.domain, reply.code) == (0, 0)
    assert reply.flags == FLAG_WIFI
    payload = bytes(range(256)) * 4
    conn.send(payload)
    echoed = b""
    while len(echoed) < len(payload):
        chunk = conn.recv(5.0)
        assert chunk != b""
        echoed += chunk
    assert echoed == payload
    conn.close()
    assert wait_until(lambda: firewall.counters_snapshot()[0]["bytes_down"]
                      == len(payload))
    counters = firewall.counters_snapshot()
    assert counters == [{
        "host": "echo.local", "process": "healthd",
        "bytes_up": len(payload), "bytes_down": len(payload),
        "connection_count": 1, "blocked_count": 0,
    }]
    assert tap.received == len(payload)


def test_blocked_transfer_forwards_zero_bytes(tap):
    watch, server, firewall = proxy_pair(tap)
    firewall.add_rule("block", host="tracker.example")
    request = ShoesRequest(REQUEST_HOST, tap.port, "tracker.example", "adsd")
    reply, conn = shoes_connect(watch, request, timeout=5.0)
    assert reply.denied
    assert (reply.domain, reply.code) == (DOMAIN_PROXY, DENY_FIREWALL)
    assert reply.flags == FLAG_DENIED
    with pytest.raises(MuxClosed):
        conn.send(b"should never leave the watch")
    assert tap.received == 0
    counters = firewall.counters_snapshot()
    assert counters[0]["blocked_count"] == 1
    assert counters[0]["connection_count"] == 0
    assert counters[0]["bytes_up"] == 0


def test_conditions_unsatisfied_on_cellular(tap):
    watch, server, firewall = proxy_pair(tap, network="cellular")
    bulk = ShoesRequest(REQUEST_HOST, tap.port, "echo.local", "backupd",
                        condition_flags=FLAG_WIFI)
    reply, _ = shoes_connect(watch, bulk, timeout=5.0)
    assert reply.denied and reply.code == DENY_CONDITIONS
    assert tap.received == 0
    casual = ShoesRequest(REQUEST_HOST, tap.port, "echo.local", "backupd")
    reply, conn = shoes_connect(watch, casual, timeout=5.0)
    assert not reply.denied
    assert reply.flags == (FLAG_EXPENSIVE | FLAG_CELLULAR) == 0xC0
    conn.close()


def test_condition_flags_satisfied_on_matching_network(tap):
    watch, server, firewall = proxy_pair(tap, network="constrained-wifi")
    bulk = ShoesRequest(REQUEST_HOST, tap.port, "echo.local", "backupd",
                        condition_flags=FLAG_WIFI)
    reply, conn = shoes_connect(watch, bulk, timeout=5.0)
    assert not reply.denied
    assert reply.flags == (FLAG_WIFI | FLAG_CONSTRAINED)
    conn.close()


def test_dial_failure_distinct_code(tap):
    watch, server, firewall = proxy_pair(tap)
    request = ShoesRequest(REQUEST_HOST, 9, "unreachable.example", "curl")
    reply, _ = shoes_connect(watch, request, timeout=5.0)
    assert reply.denied and reply.code == DENY_DIAL
    assert reply.domain == DOMAIN_PROXY


def test_bonjour_requests_refused(tap):
    watch, server, firewall = proxy_pair(tap)
    request = ShoesRequest(REQUEST_BONJOUR, 0, "printer._ipp._tcp", "printd")
    reply, _ = shoes_connect(watch, request, timeout=5.0)
    assert reply.denied and reply.code == DENY_UNSUPPORTED


def test_malformed_request_denied_not_crashed(tap):
    watch, server, firewall = proxy_pair(tap)
    conn = watch.connect(62742, timeout=5.0)
    conn.send(struct.pack(">H", 3) + b"\x99\x00\x50")
    raw = b""
    while len(raw) < REPLY_SIZE:
        chunk = conn.recv(5.0)
        assert chunk != b""
        raw += chunk
    reply = shoes_decode_reply(raw)
    assert reply.denied and reply.code == DENY_UNSUPPORTED


def test_ip_destinations_reach_dialer_verbatim(tap):
    seen = []

    def dialer(host, port):
        seen.append((host, port))
        return socket.create_connection(("127.0.0.1", tap.port), 2.0)

    watch, server, firewall = proxy_pair(tap, dialer=dialer)
    reply, conn = shoes_connect(
        watch, ShoesRequest(REQUEST_IPV4, 8080, "192.0.2.55", "curl"), 5.0)
    assert not reply.denied
    conn.close()
    reply, conn = shoes_connect(
        watch, ShoesRequest(REQUEST_IPV6, 8081, "2001:db8::7", "curl"), 5.0)
    assert not reply.denied
    conn.close()
    assert seen == [("192.0.2.55", 8080), ("2001:db8::7", 8081)]


def test_rules_take_effect_on_next_connection(tap):
    watch, server, firewall = proxy_pair(tap)
    request = ShoesRequest(REQUEST_HOST, tap.port, "echo.local", "newsd")
    reply, live = shoes_connect(watch, request, timeout=5.0)
    assert not reply.denied
    live.send(b"before rule")
    assert live.recv(5.0) == b"before rule"
    firewall.add_rule("block", host="echo.local")
    live.send(b"still spliced")          # existing splice unaffected
    assert live.recv(5.0) == b"still spliced"
    reply, _ = shoes_connect(watch, request, timeout=5.0)
    assert reply.denied and reply.code == DENY_FIREWALL
    live.close()

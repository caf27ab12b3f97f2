"""Internet-sharing proxy: request/reply codec, firewall, forwarding.

A client opens an inner connection to port 62742 and sends one request:

    +--------+------+--------+-------------+----------------+
    | length | type | port   | destination | TLVs           |
    | 2 B BE | 1 B  | 2 B BE | per type    | t(1) l(2) v... |
    +--------+------+--------+-------------+----------------+

    type: 0x01 hostname (u8-len ASCII), 0x02 IPv4 (4 B),
          0x03 IPv6 (16 B), 0x04 bonjour (u8-len, always refused)
    TLVs: 0x01 requesting process name, 0x02 condition flags

The length counts everything after itself.  The reply is always exactly
eight bytes, its length field always 0x0006:

    +--------+--------+------+------+--------+-------+
    | 0x0006 | domain | code | 0x04 | 0x0001 | flags |
    | 2 B    | 1 B    | 1 B  | 1 B  | 2 B    | 1 B   |
    +--------+--------+------+------+--------+-------+

    flags: bit7 E expensive, bit6 M cellular, bit5 W wifi,
           bit4 C constrained, bit3 D denied; bits 2-0 zero

On success (domain 0, code 0) the flags describe the sharing network and
every byte that follows is spliced verbatim to the destination; the
counters record per-(host, process) traffic.  Denials carry the D flag
and a code: 1 firewall, 2 conditions unsatisfied, 3 dial failure,
4 unsupported request.

Condition flags on the request are requirements against the simulated
network: a bulk transfer asks for W and is refused while on cellular.

Firewall rules are host globs, process names, or host+process pairs,
evaluated most-specific-first (pair over process over host, newest rule
winning inside a tier) with allow as the default.  Rules apply to the
next connection; live splices are never cut.
"""

from __future__ import annotations

import fnmatch
import ipaddress
import json
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from .inner import SHOES_PORT, InnerConn, InnerError, InnerMux, MuxClosed

__all__ = [
    "DENY_CONDITIONS",
    "DENY_DIAL",
    "DENY_FIREWALL",
    "DENY_UNSUPPORTED",
    "DOMAIN_PROXY",
    "FLAG_CELLULAR",
    "FLAG_CONSTRAINED",
    "FLAG_DENIED",
    "FLAG_EXPENSIVE",
    "FLAG_WIFI",
    "Firewall",
    "FirewallRule",
    "InvalidGlob",
    "Malformed",
    "NETWORK_STATES",
    "REQUEST_BONJOUR",
    "REPLY_SIZE",
    "REQUEST_HOST",
    "REQUEST_IPV4",
    "REQUEST_IPV6",
    "ReservedBitsSet",
    "ShoesReply",
    "ShoesRequest",
    "ShoesServer",
    "UnknownRequestType",
    "shoes_connect",
    "shoes_decode_reply",
    "shoes_decode_request",
    "shoes_encode_reply",
    "shoes_encode_request",
]

REQUEST_HOST = 0x01
REQUEST_IPV4 = 0x02
REQUEST_IPV6 = 0x03
REQUEST_BONJOUR = 0x04

REQUEST_TYPE_NAMES = {
    REQUEST_HOST: "hostname",
    REQUEST_IPV4: "ipv4",
    REQUEST_IPV6: "ipv6",
    REQUEST_BONJOUR: "bonjour",
}

TLV_PROCESS = 0x01
TLV_CONDITIONS = 0x02
_REPLY_INFO_TLV = 0x04        # reply-side network-info TLV type

FLAG_EXPENSIVE = 0x80
FLAG_CELLULAR = 0x40
FLAG_WIFI = 0x20
FLAG_CONSTRAINED = 0x10
FLAG_DENIED = 0x08
_RESERVED_FLAGS = 0x07

DOMAIN_PROXY = 0x01
DENY_FIREWALL = 0x01
DENY_CONDITIONS = 0x02
DENY_DIAL = 0x03
DENY_UNSUPPORTED = 0x04

REPLY_SIZE = 8

NETWORK_STATES = {
    "wifi": FLAG_WIFI,
    "cellular": FLAG_EXPENSIVE | FLAG_CELLULAR,
    "constrained-wifi": FLAG_WIFI | FLAG_CONSTRAINED,
}


class ShoesError(Exception):
    pass


class Malformed(ShoesError):
    pass


class UnknownRequestType(ShoesError):
    pass


class ReservedBitsSet(ShoesError):
    pass


class InvalidGlob(ShoesError):
    pass


# --- codec -------------------------------------------------------------------------

@dataclass(frozen=True)
class ShoesRequest:
    request_type: int
    port: int
    destination: str
    process_name: str = ""
    condition_flags: int = 0

    @property
    def type_name(self) -> str:
        return REQUEST_TYPE_NAMES.get(self.request_type,
                                      "type-%d" % self.request_type)


@dataclass(frozen=True)
class ShoesReply:
    domain: int
    code: int
    flags: int

    @property
    def denied(self) -> bool:
        return bool(self.flags & FLAG_DENIED)


def _encode_destination(request_type: int, destination: str) -> bytes:
    if request_type in (REQUEST_HOST, REQUEST_BONJOUR):
        raw = destination.encode("ascii")
        if len(raw) > 255:
            raise Malformed("name longer than 255 bytes")
        return bytes([len(raw)]) + raw
    if request_type == REQUEST_IPV4:
        return ipaddress.IPv4Address(destination).packed
    if request_type == REQUEST_IPV6:
        return ipaddress.IPv6Address(destination).packed
    raise UnknownRequestType("request type %d" % request_type)


def shoes_encode_request(request: ShoesRequest) -> bytes:
    body = bytes([request.request_type]) + struct.pack(">H", request.port)
    body += _encode_destination(request.request_type, request.destination)
    if request.process_name:
        raw = request.process_name.encode("utf-8")
        body += bytes([TLV_PROCESS]) + struct.pack(">H", len(raw)) + raw
    if request.condition_flags:
        body += bytes([TLV_CONDITIONS]) + struct.pack(">H", 1)
        body += bytes([request.condition_flags])
    return struct.pack(">H", len(body)) + body


def shoes_decode_request(data: bytes) -> ShoesRequest:
    if len(data) < 2:
        raise Malformed("no length field")
    (length,) = struct.unpack_from(">H", data)
    if length != len(data) - 2:
        raise Malformed("declared %d bytes, carried %d" % (length, len(data) - 2))
    body = data[2:]
    if len(body) < 3:
        raise Malformed("body shorter than type and port")
    request_type = body[0]
    (port,) = struct.unpack_from(">H", body, 1)
    offset = 3
    if request_type in (REQUEST_HOST, REQUEST_BONJOUR):
        if offset >= len(body):
            raise Malformed("missing name length")
        n = body[offset]
        offset += 1
        if offset + n > len(body):
            raise Malformed("name overruns request")
        destination = body[offset:offset + n].decode("ascii", "replace")
        offset += n
    elif request_type == REQUEST_IPV4:
        if offset + 4 > len(body):
            raise Malformed("IPv4 destination truncated")
        destination = str(ipaddress.IPv4Address(body[offset:offset + 4]))
        offset += 4
    elif request_type == REQUEST_IPV6:
        if offset + 16 > len(body):
            raise Malformed("IPv6 destination truncated")
        destination = str(ipaddress.IPv6Address(body[offset:offset + 16]))
        offset += 16
    else:
        raise UnknownRequestType("request type %d" % request_type)
    process_name = ""
    condition_flags = 0
    while offset < len(body):
        if offset + 3 > len(body):
            raise Malformed("truncated TLV header")
        tag = body[offset]
        (n,) = struct.unpack_from(">H", body, offset + 1)
        offset += 3
        if offset + n > len(body):
            raise Malformed("TLV overruns request")
        value = body[offset:offset + n]
        offset += n
        if tag == TLV_PROCESS:
            process_name = value.decode("utf-8", "replace")
        elif tag == TLV_CONDITIONS:
            if n != 1:
                raise Malformed("condition flags TLV must be 1 byte")
            condition_flags = value[0]
        # unknown TLVs skipped
    return ShoesRequest(request_type, port, destination,
                        process_name, condition_flags)


def shoes_encode_reply(reply: ShoesReply) -> bytes:
    if reply.flags & _RESERVED_FLAGS:
        raise ReservedBitsSet("flags 0x%02x use reserved bits" % reply.flags)
    return (struct.pack(">H", 0x0006) + bytes([reply.domain, reply.code])
            + bytes([_REPLY_INFO_TLV]) + struct.pack(">H", 0x0001)
            + bytes([reply.flags]))


def shoes_decode_reply(data: bytes) -> ShoesReply:
    if len(data) != REPLY_SIZE:
        raise Malformed("reply must be exactly %d bytes, got %d"
                        % (REPLY_SIZE, len(data)))
    (length,) = struct.unpack_from(">H", data)
    if length != 0x0006:
        raise Malformed("reply length field 0x%04x" % length)
    if data[4] != _REPLY_INFO_TLV or data[5:7] != b"\x00\x01":
        raise Malformed("reply info TLV malformed")
    if data[7] & _RESERVED_FLAGS:
        raise ReservedBitsSet("flags 0x%02x use reserved bits" % data[7])
    return ShoesReply(data[2], data[3], data[7])


# --- firewall ------------------------------------------------------------------------

@dataclass(frozen=True)
class FirewallRule:
    action: str                          # "allow" | "block"
    host: str | None = None             # glob, matched case-insensitively
    process: str | None = None
    created_at: float = 0.0

    def __post_init__(self):
        if self.action not in ("allow", "block"):
            raise InvalidGlob("action must be allow or block")
        if self.host is None and self.process is None:
            raise InvalidGlob("rule needs a host glob, a process, or both")
        if self.host is not None and not self.host.strip():
            raise InvalidGlob("empty host glob")
        if self.process is not None and not self.process.strip():
            raise InvalidGlob("empty process name")

    @property
    def tier(self) -> int:
        """2 pair, 1 process, 0 host; higher is more specific."""
        if self.host is not None and self.process is not None:
            return 2
        return 1 if self.process is not None else 0

    def matches(self, host: str, process: str) -> bool:
        if self.host is not None and not fnmatch.fnmatchcase(
                host.lower(), self.host.lower()):
            return False
        if self.process is not None and self.process != process:
            return False
        return True

    def to_json(self) -> dict:
        return {"action": self.action, "host": self.host,
                "process": self.process, "created_at": self.created_at}

    @classmethod
    def from_json(cls, fields: dict) -> "FirewallRule":
        try:
            return cls(fields["action"], fields.get("host"),
                       fields.get("process"), fields.get("created_at", 0.0))
        except (KeyError, TypeError) as exc:
            raise InvalidGlob("bad rule record: %s" % exc) from None


@dataclass
class TrafficCounter:
    bytes_up: int = 0
    bytes_down: int = 0
    connection_count: int = 0
    blocked_count: int = 0


class Firewall:
    """Rule set plus per-(host, process) accounting."""

    def __init__(self, rules_path: str | None = None, clock=None):
        self.clock = clock or time.time
        self.rules_path = rules_path
        self._lock = threading.Lock()
        self._rules: list[FirewallRule] = []
        self._counters: dict[tuple[str, str], TrafficCounter] = {}
        if rules_path:
            self._load()

    def _load(self) -> None:
        try:
            with open(self.rules_path, "r", encoding="utf-8") as handle:
                records = json.load(handle)
        except FileNotFoundError:
            return
        except (OSError, ValueError) as exc:
            raise InvalidGlob("cannot read rules file: %s" % exc) from None
        self._rules = [FirewallRule.from_json(r) for r in records]

    def _persist(self) -> None:
        if not self.rules_path:
            return
        with open(self.rules_path, "w", encoding="utf-8") as handle:
            json.dump([r.to_json() for r in self._rules], handle, indent=2)

    def add_rule(self, action: str, host: str | None = None,
                 process: str | None = None) -> FirewallRule:
        rule = FirewallRule(action, host, process, self.clock())
        with self._lock:
            self._rules.append(rule)
            self._persist()
        return rule

    def replace_rules(self, rules: list[FirewallRule]) -> None:
        with self._lock:
            self._rules = list(rules)
            self._persist()

    def clear_rules(self) -> None:
        self.replace_rules([])

    def list_rules(self) -> list[FirewallRule]:
        with self._lock:
            return list(self._rules)

    def decide(self, host: str, process: str) -> str:
        """Most specific match wins; within a tier the newest rule does."""
        with self._lock:
            for tier in (2, 1, 0):
                for rule in reversed(self._rules):
                    if rule.tier == tier and rule.matches(host, process):
                        return rule.action
        return "allow"

    # -- accounting ---------------------------------------------------------------

    def _counter(self, host: str, process: str) -> TrafficCounter:
        key = (host, process)
        counter = self._counters.get(key)
        if counter is None:
            counter = self._counters[key] = TrafficCounter()
        return counter

    def record_connection(self, host: str, process: str) -> None:
        with self._lock:
            self._counter(host, process).connection_count += 1

    def record_blocked(self, host: str, process: str) -> None:
        with self._lock:
            self._counter(host, process).blocked_count += 1

    def record_traffic(self, host: str, process: str,
                       up: int = 0, down: int = 0) -> None:
        with self._lock:
            counter = self._counter(host, process)
            counter.bytes_up += up
            counter.bytes_down += down

    def counters_snapshot(self) -> list[dict]:
        with self._lock:
            return [{
                "host": host, "process": process,
                "bytes_up": c.bytes_up, "bytes_down": c.bytes_down,
                "connection_count": c.connection_count,
                "blocked_count": c.blocked_count,
            } for (host, process), c in sorted(self._counters.items())]


# --- server ----------------------------------------------------------------------------

def _default_dialer(host: str, port: int) -> socket.socket:
    return socket.create_connection((host, port), timeout=5.0)


class ShoesServer:
    """Accepts proxy requests on the inner shoes port and splices bytes."""

    def __init__(self, firewall: Firewall, network: str = "wifi",
                 dialer=None, on_event=None):
        if network not in NETWORK_STATES:
            raise ShoesError("unknown network state %r" % network)
        self.firewall = firewall
        self.network = network
        self.dialer = dialer or _default_dialer
        self.on_event = on_event or (lambda kind, detail: None)
        self._threads: list[threading.Thread] = []

    @property
    def network_flags(self) -> int:
        return NETWORK_STATES[self.network]

    def attach(self, mux: InnerMux) -> None:
        def spawn(conn: InnerConn) -> None:
            worker = threading.Thread(target=self.handle_connection,
                                      args=(conn,), daemon=True)
            worker.start()
            self._threads.append(worker)

        mux.listen(SHOES_PORT, spawn)

    def _deny(self, conn: InnerConn, code: int) -> None:
        reply = ShoesReply(DOMAIN_PROXY, code, FLAG_DENIED)
        try:
            conn.send(shoes_encode_reply(reply))
        except (MuxClosed, InnerError):
            pass
        conn.close()

    def handle_connection(self, conn: InnerConn) -> None:
        buffer = b""
        request = None
        try:
            while True:
                chunk = conn.recv(5.0)
                if chunk == b"":
                    conn.close()
                    return
                buffer += chunk
                if len(buffer) >= 2:
                    (length,) = struct.unpack_from(">H", buffer)
                    if len(buffer) >= 2 + length:
                        request = shoes_decode_request(buffer[:2 + length])
                        break
        except (MuxClosed, InnerError):
            return
        except ShoesError:
            self._deny(conn, DENY_UNSUPPORTED)
            return
        self._serve_request(conn, request)

    def _serve_request(self, conn: InnerConn, request: ShoesRequest) -> None:
        host = request.destination
        process = request.process_name
        if request.request_type == REQUEST_BONJOUR:
            self.firewall.record_blocked(host, process)
            self._deny(conn, DENY_UNSUPPORTED)
            return
        if self.firewall.decide(host, process) == "block":
            self.firewall.record_blocked(host, process)
            self.on_event("ConnectionBlocked",
                          "%s -> %s:%d" % (process or "?", host, request.port))
            self._deny(conn, DENY_FIREWALL)
            return
        required = request.condition_flags & ~FLAG_DENIED
        if required & ~self.network_flags:
            self.firewall.record_blocked(host, process)
            self._deny(conn, DENY_CONDITIONS)
            return
        try:
            upstream = self.dialer(host, request.port)
        except OSError:
            self.firewall.record_blocked(host, process)
            self._deny(conn, DENY_DIAL)
            return
        self.firewall.record_connection(host, process)
        try:
            conn.send(shoes_encode_reply(
                ShoesReply(0, 0, self.network_flags)))
        except (MuxClosed, InnerError):
            upstream.close()
            return
        self._splice(conn, upstream, host, process)

    def _splice(self, conn: InnerConn, upstream: socket.socket,
                host: str, process: str) -> None:
        def up() -> None:
            try:
                while True:
                    data = conn.recv(None)
                    if data == b"":
                        break
                    upstream.sendall(data)
                    self.firewall.record_traffic(host, process, up=len(data))
            except (MuxClosed, InnerError, OSError):
                pass
            try:
                upstream.shutdown(socket.SHUT_WR)
            except OSError:
                pass

        def down() -> None:
            try:
                while True:
                    data = upstream.recv(4096)
                    if data == b"":
                        break
                    conn.send(data)
                    self.firewall.record_traffic(host, process, down=len(data))
            except (MuxClosed, InnerError, OSError):
                pass
            try:
                conn.close()
            except (MuxClosed, InnerError):
                pass
            upstream.close()

        up_thread = threading.Thread(target=up, daemon=True)
        down_thread = threading.Thread(target=down, daemon=True)
        up_thread.start()
        down_thread.start()
        self._threads.extend([up_thread, down_thread])


# --- client ------------------------------------------------------------------------------

def shoes_connect(mux: InnerMux, request: ShoesRequest,
                  timeout: float = 5.0) -> tuple[ShoesReply, InnerConn]:
    """Open the proxy port, send one request, read the 8-byte verdict."""
    conn = mux.connect(SHOES_PORT, timeout)
    conn.send(shoes_encode_request(request))
    raw = b""
    while len(raw) < REPLY_SIZE:
        chunk = conn.recv(timeout)
        if chunk == b"":
            raise Malformed("connection closed before a full reply")
        raw += chunk
    conn.unrecv(raw[REPLY_SIZE:])
    reply = shoes_decode_reply(raw[:REPLY_SIZE])
    if reply.denied:
        conn.close()
    return reply, conn

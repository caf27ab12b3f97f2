"""Scripted attack and artifact scenarios over a live two-endpoint stack.

Every scenario stands up a real phone endpoint and a watch emulator joined
through an on-path splice:

    watch emulator ──tcp──>  LinkTap (attacker)  ──tcp──> phone endpoint
                                  │
                        transcript + frame hooks

The tap forwards link records between the two sockets, can rewrite or
drop any frame in flight, and can inject frames of its own in either
direction: the full read/modify/inject attacker.  For the envelope
forgery scenarios the tap additionally holds the exported tunnel key log,
the stronger attacker with IPsec key material.  Scenarios observe results
only through public endpoint surfaces: the health store, the event log,
status snapshots, and replies.

Determinism: a scenario's wire traffic is a pure function of its seed.
Endpoints draw all randomness from seeded generators, sample clocks are
pinned, and every step waits for its observable effect before the next
begins, so two runs with the same seed produce byte-identical transcripts
modulo record timestamps.
"""

from __future__ import annotations

import contextlib
import io
import socket
import struct
import threading
import time
from dataclasses import dataclass, field, replace

from .alloy import FLAG_TOP, HEALTH_TOPIC, AlloyError, alloy_decode, alloy_encode
from .aoverc import (AEAD_MITIGATED, FAITHFUL, AovercError, decode_envelope,
                     encode_envelope, forge_sample_type)
from .config import Config
from .endpoints import PROBE_MAGIC, PhoneEndpoint, WatchEndpoint
from .healthstore import (OBJECT_TYPE_QUANTITY, SAMPLE_TYPE_ACTIVE_ENERGY,
                          SAMPLE_TYPE_CYCLE_FLOW, SAMPLE_TYPE_HEART_RATE)
from .identity import generate_identity_pair
from .ike import EXCHANGE_INFORMATIONAL, IkeMessage, ike_encode, notify_payload
from .inner import DATA_PORT, OP_DATA, InnerError, InnerPacket, decode_packet, encode_packet
from .ldm import LinkDirectorMessage, ldm_encode, wifi_update_tlv
from .link import DIRECTION_TO_PHONE, DIRECTION_TO_WATCH, TranscriptWriter, read_transcript
from .nrlp import (TYPE_ESP_CLASSC, TYPE_ESP_CLASSC_ECT0, TYPE_IKEV2,
                   NrlpError, NrlpFrame, nrlp_decode, nrlp_encode)
from .rng import RandomSource
from .tunnel import KeyMaterial, RecordCodec, TunnelError

__all__ = [
    "AssertionFailed",
    "Check",
    "LinkTap",
    "ScenarioError",
    "ScenarioReport",
    "ScenarioUnknown",
    "format_report",
    "list_scenarios",
    "observe_deletion_lifecycle",
    "observe_envelope_forgery",
    "observe_ldm_injection",
    "run_scenario",
    "transcript_shape",
]

DEFAULT_SEED = 7
ATTACKER_ID = b"ATTACKER"

# sample clocks are pinned so payload bytes depend only on the seed
_EPOCH = 1_700_000_000.0

_RECORD_LEN = struct.Struct(">I")


class ScenarioError(Exception):
    pass


class ScenarioUnknown(ScenarioError):
    pass


class AssertionFailed(ScenarioError):
    """Carries the full report; str(exc) is the expected/actual diff."""

    def __init__(self, message: str, report: "ScenarioReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Check:
    label: str
    passed: bool
    expected: object
    actual: object


@dataclass
class ScenarioReport:
    name: str
    seed: int
    passed: bool
    checks: list[Check]
    events: list[dict]
    transcript: bytes
    keylog: list[str] = field(default_factory=list)


def format_report(report: ScenarioReport) -> str:
    lines = ["scenario %s (seed %d): %s"
             % (report.name, report.seed, "PASS" if report.passed else "FAIL")]
    for check in report.checks:
        mark = " ok " if check.passed else "FAIL"
        lines.append("  [%s] %-44s expected %r, got %r"
                     % (mark, check.label, check.expected, check.actual))
    return "\n".join(lines)


def transcript_shape(data: bytes) -> list[tuple[int, bytes]]:
    """Record list with timestamps stripped, for determinism comparisons."""
    return [(r.direction, r.raw) for r in read_transcript(data)]


# -- the on-path attacker ----------------------------------------------------------


def _read_exact(sock: socket.socket, count: int) -> bytes | None:
    buf = b""
    while len(buf) < count:
        try:
            chunk = sock.recv(count - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return buf


class LinkTap:
    """Man-in-the-middle splice over the virtual link's TCP carrier.

    Filters get each NRLP frame (counter bytes stripped) and return the
    frame to forward, a replacement, or None to drop.  Injection writes a
    record with 0xff counter bytes; receivers ignore the counters, which
    is exactly the weakness that makes injection this easy.
    """

    def __init__(self, phone_address: tuple[str, int], transcript=None,
                 clock=None):
        self.phone_address = phone_address
        self.to_phone_filter = None
        self.to_watch_filter = None
        self.filter_error: Exception | None = None
        self._writer = (TranscriptWriter(transcript, clock)
                        if transcript is not None else None)
        self._listener = socket.socket()
        self._listener.bind(("127.0.0.1", 0))
        self._listener.listen(1)
        self.port = self._listener.getsockname()[1]
        self._watch_sock: socket.socket | None = None
        self._phone_sock: socket.socket | None = None
        self._locks = {DIRECTION_TO_WATCH: threading.Lock(),
                       DIRECTION_TO_PHONE: threading.Lock()}

    def start(self) -> None:
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self) -> None:
        try:
            watch_sock, _ = self._listener.accept()
        except OSError:
            return
        try:
            phone_sock = socket.create_connection(self.phone_address, 5.0)
        except OSError:
            watch_sock.close()
            return
        self._watch_sock, self._phone_sock = watch_sock, phone_sock
        threading.Thread(target=self._pump, daemon=True,
                         args=(watch_sock, phone_sock, DIRECTION_TO_PHONE,
                               "to_phone_filter")).start()
        threading.Thread(target=self._pump, daemon=True,
                         args=(phone_sock, watch_sock, DIRECTION_TO_WATCH,
                               "to_watch_filter")).start()

    def _pump(self, src: socket.socket, dst: socket.socket, direction: int,
              filter_attr: str) -> None:
        while True:
            header = _read_exact(src, _RECORD_LEN.size)
            if header is None:
                break
            body = _read_exact(src, _RECORD_LEN.unpack(header)[0])
            if body is None or len(body) < 2:
                break
            frame = body[2:]
            hook = getattr(self, filter_attr)
            if hook is not None:
                try:
                    frame = hook(frame)
                except Exception as exc:  # a broken hook must fail loudly
                    self.filter_error = exc
                    break
            if frame is None:
                continue
            self._write(dst, direction, body[:2] + frame)
        self.close()

    def _write(self, dst: socket.socket, direction: int, body: bytes) -> None:
        with self._locks[direction]:
            # record before sending: a reply can then never be recorded
            # ahead of the frame that caused it
            if self._writer is not None:
                self._writer.record(direction, body)
            try:
                dst.sendall(_RECORD_LEN.pack(len(body)) + body)
            except OSError:
                return

    def inject_to_watch(self, frame: bytes) -> None:
        if self._watch_sock is None:
            raise ScenarioError("tap has no watch side yet")
        self._write(self._watch_sock, DIRECTION_TO_WATCH, b"\xff\xff" + frame)

    def inject_to_phone(self, frame: bytes) -> None:
        if self._phone_sock is None:
            raise ScenarioError("tap has no phone side yet")
        self._write(self._phone_sock, DIRECTION_TO_PHONE, b"\xff\xff" + frame)

    def close(self) -> None:
        for sock in (self._listener, self._watch_sock, self._phone_sock):
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass


class _EnvelopeTamper:
    """Rewrites the first health change set seen flowing watch → phone.

    Works blind below the envelope: the ESP layer is opened with granted
    keys, but the health payload itself is only bit-flipped, never read.
    """

    def __init__(self, codec: RecordCodec):
        self.codec = codec
        self.fired = False
        self._streams: dict[tuple[int, int], str] = {}

    def __call__(self, frame: bytes) -> bytes:
        if self.fired:
            return frame
        try:
            nrlp_frame, _ = nrlp_decode(frame)
        except NrlpError:
            return frame
        if nrlp_frame.frame_type not in (TYPE_ESP_CLASSC, TYPE_ESP_CLASSC_ECT0):
            return frame
        try:
            seq, plain = self.codec.open(nrlp_frame.payload,
                                         from_initiator=True)
            packet = decode_packet(plain)
        except (TunnelError, InnerError):
            return frame
        if packet.op != OP_DATA or packet.port != DATA_PORT:
            return frame
        try:
            msg, consumed = alloy_decode(packet.payload)
        except AlloyError:
            return frame
        if consumed != len(packet.payload):
            return frame
        if msg.flags & FLAG_TOP:
            self._streams[(packet.conn_id, msg.stream)] = msg.topic
            topic = msg.topic
        else:
            topic = self._streams.get((packet.conn_id, msg.stream))
        if topic != HEALTH_TOPIC:
            return frame
        try:
            envelope = decode_envelope(msg.payload)
        except AovercError:
            return frame
        # flip the low nibble of the sample type byte; the sacrificial
        # garbled block lands on the uuid, which just becomes a new uuid
        forged = forge_sample_type(envelope, 1, b"\x0f" + bytes(15))
        rebuilt = encode_packet(InnerPacket(
            OP_DATA, packet.conn_id, packet.port,
            alloy_encode(replace(msg, payload=encode_envelope(forged)))))
        self.fired = True
        return nrlp_encode(NrlpFrame(nrlp_frame.frame_type,
                                     self.codec.seal(seq, rebuilt,
                                                     from_initiator=True)))


# -- staging -----------------------------------------------------------------------


def _wait(predicate, what: str, timeout: float = 8.0,
          tap: LinkTap | None = None) -> None:
    deadline = time.time() + timeout
    while time.time() < deadline:
        if tap is not None and tap.filter_error is not None:
            raise ScenarioError("attacker hook crashed: %r"
                                % tap.filter_error) from tap.filter_error
        if predicate():
            return
        time.sleep(0.01)
    if predicate():
        return
    raise ScenarioError("timed out waiting for %s" % what)


def _settle(transcript: io.BytesIO, idle: float = 0.25,
            timeout: float = 5.0) -> None:
    """Returns once no new record has appeared for `idle` seconds."""
    deadline = time.time() + timeout
    last, quiet_since = -1, time.time()
    while time.time() < deadline:
        count = len(read_transcript(transcript.getvalue()))
        if count != last:
            last, quiet_since = count, time.time()
        elif time.time() - quiet_since >= idle:
            return
        time.sleep(0.05)


def _anchors_acked(watch: WatchEndpoint) -> bool:
    domain = OBJECT_TYPE_QUANTITY
    return (watch.sync.peer_anchors.get(domain, 0)
            == watch.store.local_anchor(domain))


@contextlib.contextmanager
def _stage(seed: int, *, watch_ldm: str = "strict",
           envelope: str = AEAD_MITIGATED, transcript: io.BytesIO):
    rng = RandomSource(seed)
    phone_id, watch_id = generate_identity_pair(rng.child("identities"))
    clock = lambda: _EPOCH
    phone = PhoneEndpoint(
        phone_id, Config(seed=seed, envelope_mode=envelope), clock=clock)
    phone.start()
    tap = LinkTap(("127.0.0.1", phone.port), transcript=transcript)
    tap.start()
    watch = WatchEndpoint(
        watch_id, ("127.0.0.1", tap.port),
        Config(seed=seed, ldm_mode=watch_ldm, envelope_mode=envelope),
        clock=clock)
    try:
        watch.start(timeout=10.0)
        _wait(lambda: phone.ready, "phone services", tap=tap)
        _settle(transcript)
        yield phone, watch, tap
    finally:
        watch.stop()
        tap.close()
        phone.stop()


def _merged_events(phone: PhoneEndpoint, watch: WatchEndpoint) -> list[dict]:
    out = []
    for side, endpoint in (("phone", phone), ("watch", watch)):
        for event in endpoint.events.events():
            out.append({"side": side, **event.to_json()})
    return out


# -- observations ------------------------------------------------------------------


def _bind_sink(seed: int) -> socket.socket:
    """The injected bytes embed the sink address, so it must be a pure
    function of the seed.  A per-seed loopback address sidesteps the
    shared port namespace entirely."""
    address = ("127.73.87.%d" % (seed % 250 + 1), 26000 + seed % 4000)
    sink = socket.socket()
    sink.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sink.bind(address)
    except OSError as exc:
        sink.close()
        raise ScenarioError("sink address %s:%d unavailable: %s"
                            % (address[0], address[1], exc)) from exc
    sink.listen(4)
    return sink


def observe_ldm_injection(mode: str, seed: int = DEFAULT_SEED) -> dict:
    """Inject one unencrypted Wi-Fi address update toward the watch."""
    sink = _bind_sink(seed)
    sink_host, sink_port = sink.getsockname()
    collected: list[bytes] = []

    def collect() -> None:
        while True:
            try:
                conn, _ = sink.accept()
            except OSError:
                return
            with conn:
                data = b""
                while len(data) < 64:
                    chunk = conn.recv(64)
                    if not chunk:
                        break
                    data += chunk
                collected.append(data)

    collector = threading.Thread(target=collect, daemon=True)
    collector.start()
    transcript = io.BytesIO()
    try:
        with _stage(seed, watch_ldm=mode, transcript=transcript) as \
                (phone, watch, tap):
            before = watch.status()
            director = LinkDirectorMessage(
                ATTACKER_ID, [wifi_update_tlv(sink_host, sink_port)])
            notify = ldm_encode(director)
            message = IkeMessage(EXCHANGE_INFORMATIONAL, 0, "C", 0x7777,
                                 [notify_payload(notify.notify_type,
                                                 notify.data)])
            tap.inject_to_watch(
                nrlp_encode(NrlpFrame(TYPE_IKEV2, ike_encode(message))))
            if mode == "vulnerable":
                _wait(lambda: collected, "traffic at the attacker sink",
                      tap=tap)
            else:
                _wait(lambda: watch.events.count("UnauthenticatedNotify") > 0,
                      "the unauthenticated-notify event", tap=tap)
            time.sleep(0.3)       # grace so absent effects are truly absent
            after = watch.status()
            observations = {
                "mode": mode,
                "sink_host": sink_host,
                "sink_port": sink_port,
                "address_before": before["tunnels"]["C"]["peer_address"],
                "address_after": after["tunnels"]["C"]["peer_address"],
                "hash_before": before["state_hash"],
                "hash_after": after["state_hash"],
                "unauthenticated_count":
                    watch.events.count("UnauthenticatedNotify"),
                "peer_updated_count":
                    watch.events.count("PeerAddressUpdated"),
                "sink_data": b"".join(collected),
                "events": _merged_events(phone, watch),
                "keylog": watch.keylog_lines(),
                # snapshot before teardown so closing FINs stay out of it
                "transcript": transcript.getvalue(),
            }
    finally:
        # a blocked accept keeps the listener alive past close(); shut it
        # down first so the address is truly free for the next run
        try:
            sink.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sink.close()
        collector.join(2.0)
    return observations


def observe_envelope_forgery(mode: str, seed: int = DEFAULT_SEED) -> dict:
    """Bit-flip one in-flight health envelope; the attacker holds ESP keys."""
    transcript = io.BytesIO()
    with _stage(seed, envelope=mode, transcript=transcript) as \
            (phone, watch, tap):
        codecs = {}
        for line in watch.keylog_lines():
            label, material, suite = KeyMaterial.from_keylog_line(line)
            codecs[label[-1]] = RecordCodec(material, suite)
        tamper = _EnvelopeTamper(codecs["C"])
        tap.to_phone_filter = tamper
        original = watch.emit_sample(SAMPLE_TYPE_ACTIVE_ENERGY, 30.5, "kcal",
                                     when=_EPOCH)
        if mode == FAITHFUL:
            _wait(lambda: phone.store.query(SAMPLE_TYPE_HEART_RATE),
                  "the forged sample in the phone store", tap=tap)
            _wait(lambda: _anchors_acked(watch), "sync ack", tap=tap)
        else:
            _wait(lambda: phone.events.count("TamperDetected") > 0,
                  "the tamper-detected event", tap=tap)
        time.sleep(0.3)
        heart_rows = phone.store.query(SAMPLE_TYPE_HEART_RATE)
        if heart_rows:
            # ground truth only the harness knows: what left the watch was
            # an active-energy sample, so any heart-rate row is the forgery
            phone.events.emit(
                "ForgedSampleAccepted",
                "heart-rate row %s value %.1f from a tampered envelope"
                % (heart_rows[0]["uuid"], heart_rows[0]["value"]))
        observations = {
            "mode": mode,
            "tamper_fired": tamper.fired,
            "original_uuid": original.uuid.hex(),
            "original_value": original.value,
            "phone_rows": phone.store.query(),
            "heart_rows": heart_rows,
            "energy_rows": phone.store.query(SAMPLE_TYPE_ACTIVE_ENERGY),
            "watch_rows": watch.store.query(),
            "tamper_count": phone.events.count("TamperDetected"),
            "forged_accepted_count":
                phone.events.count("ForgedSampleAccepted"),
            "events": _merged_events(phone, watch),
            "keylog": watch.keylog_lines(),
            "transcript": transcript.getvalue(),
        }
    return observations


def _journal_view(endpoint, uuid: bytes) -> list[tuple[str, bool]]:
    """(op, carries_content) for every journal entry touching uuid."""
    out = []
    for entry in endpoint.store.journal_since(OBJECT_TYPE_QUANTITY, 0, 1000):
        if entry.uuid == uuid or (entry.sample is not None
                                  and entry.sample.uuid == uuid):
            out.append((entry.op, entry.sample is not None))
        elif entry.op == "husk" and entry.uuid is None:
            out.append(("husk", False))
    return out


def observe_deletion_lifecycle(seed: int = DEFAULT_SEED) -> dict:
    """Walk one cycle-tracking sample through delete and hardened delete."""
    transcript = io.BytesIO()
    with _stage(seed, transcript=transcript) as (phone, watch, tap):
        # lockstep: wait out each ack so every push has deterministic content
        first = watch.emit_sample(SAMPLE_TYPE_CYCLE_FLOW, 2.0, "flow-level",
                                  when=_EPOCH)
        _wait(lambda: _anchors_acked(watch), "first ack", tap=tap)
        second = watch.emit_sample(SAMPLE_TYPE_CYCLE_FLOW, 3.0, "flow-level",
                                   when=_EPOCH + 60)
        _wait(lambda: _anchors_acked(watch), "second ack", tap=tap)
        _wait(lambda: len(phone.store.query()) == 2, "both samples synced",
              tap=tap)

        watch.delete_sample(first.uuid)
        _wait(lambda: len(phone.store.query()) == 1, "the delete to land",
              tap=tap)
        _wait(lambda: _anchors_acked(watch), "delete ack", tap=tap)
        phone_stone = phone.store.tombstone(first.uuid)
        after_delete = {
            "phone_tombstone": (phone_stone.sample_type,
                                phone_stone.deletion_time)
                               if phone_stone else None,
            "watch_tombstone": watch.store.tombstone(first.uuid) is not None,
            "watch_journal": _journal_view(watch, first.uuid),
        }

        watch.harden_delete(first.uuid)
        _settle(transcript)
        after_watch_harden = {
            "watch_tombstone": watch.store.tombstone(first.uuid) is not None,
            "watch_journal": _journal_view(watch, first.uuid),
            "phone_tombstone_survives":
                phone.store.tombstone(first.uuid) is not None,
        }

        phone.harden_delete(first.uuid)
        _settle(transcript)
        final = {
            "phone_tombstone": phone.store.tombstone(first.uuid) is not None,
            "phone_uuids": sorted(r["uuid"] for r in
                                  phone.store.query(include_tombstones=True)),
            "watch_uuids": sorted(r["uuid"] for r in
                                  watch.store.query(include_tombstones=True)),
            "phone_live_values": [r["value"] for r in phone.store.query()],
        }
        observations = {
            "first_uuid": first.uuid.hex(),
            "second_uuid": second.uuid.hex(),
            "after_delete": after_delete,
            "after_watch_harden": after_watch_harden,
            "final": final,
            "events": _merged_events(phone, watch),
            "keylog": watch.keylog_lines(),
            "transcript": transcript.getvalue(),
        }
    return observations


# -- per-scenario checks -----------------------------------------------------------


def _check(checks: list[Check], label: str, expected, actual) -> None:
    checks.append(Check(label, expected == actual, expected, actual))


def check_ldm_vulnerable(obs: dict) -> list[Check]:
    checks: list[Check] = []
    _check(checks, "peer address redirected to the sink",
           [obs["sink_host"], obs["sink_port"]], obs["address_after"])
    _check(checks, "address-updated event observed",
           True, obs["peer_updated_count"] >= 1)
    _check(checks, "subsequent traffic reached the attacker sink",
           PROBE_MAGIC + b"C", obs["sink_data"])
    _check(checks, "victim raised no alarm", 0, obs["unauthenticated_count"])
    return checks


def check_ldm_strict(obs: dict) -> list[Check]:
    checks: list[Check] = []
    _check(checks, "peer address unchanged",
           obs["address_before"], obs["address_after"])
    _check(checks, "notify-reachable state untouched",
           obs["hash_before"], obs["hash_after"])
    _check(checks, "exactly one unauthenticated-notify event",
           1, obs["unauthenticated_count"])
    _check(checks, "nothing reached the attacker sink",
           b"", obs["sink_data"])
    return checks


def check_forge_faithful(obs: dict) -> list[Check]:
    checks: list[Check] = []
    _check(checks, "tamper hook rewrote one record", True, obs["tamper_fired"])
    _check(checks, "one heart-rate row in the phone store",
           1, len(obs["heart_rows"]))
    _check(checks, "no active-energy row survived",
           0, len(obs["energy_rows"]))
    if obs["heart_rows"]:
        row = obs["heart_rows"][0]
        _check(checks, "attacker value carried over",
               obs["original_value"], row["value"])
        _check(checks, "uuid garbled by the sacrificial block",
               True, row["uuid"] != obs["original_uuid"])
    _check(checks, "forgery marked accepted", 1, obs["forged_accepted_count"])
    _check(checks, "nothing detected the tamper", 0, obs["tamper_count"])
    return checks


def check_forge_mitigated(obs: dict) -> list[Check]:
    checks: list[Check] = []
    _check(checks, "tamper hook rewrote one record", True, obs["tamper_fired"])
    _check(checks, "exactly one tamper-detected event",
           1, obs["tamper_count"])
    _check(checks, "phone store stayed clean", [], obs["phone_rows"])
    _check(checks, "no forgery was accepted", 0, obs["forged_accepted_count"])
    return checks


def check_deletion(obs: dict) -> list[Check]:
    checks: list[Check] = []
    _check(checks, "delete leaves a typed tombstone on the phone",
           (SAMPLE_TYPE_CYCLE_FLOW, _EPOCH),
           obs["after_delete"]["phone_tombstone"])
    _check(checks, "watch keeps its own tombstone",
           True, obs["after_delete"]["watch_tombstone"])
    _check(checks, "watch journal still carries the full sample",
           True, ("insert", True) in obs["after_delete"]["watch_journal"])
    _check(checks, "hardened delete purges the watch tombstone",
           False, obs["after_watch_harden"]["watch_tombstone"])
    _check(checks, "hardened delete husks the watch journal",
           True, all(op == "husk" and not content for op, content
                     in obs["after_watch_harden"]["watch_journal"]))
    _check(checks, "peer tombstone survives the watch's hardening",
           True, obs["after_watch_harden"]["phone_tombstone_survives"])
    _check(checks, "phone-side hardening purges the last trace",
           False, obs["final"]["phone_tombstone"])
    _check(checks, "no ghost rows remain for the purged uuid",
           [obs["second_uuid"]], obs["final"]["phone_uuids"])
    _check(checks, "the untouched sample survived everywhere",
           [3.0], obs["final"]["phone_live_values"])
    return checks


# -- the registry ------------------------------------------------------------------

_SCENARIOS: dict[str, tuple[str, object, object]] = {
    "ldm-inject-vulnerable": (
        "plaintext Wi-Fi address update redirects a permissive watch",
        lambda seed: observe_ldm_injection("vulnerable", seed),
        check_ldm_vulnerable),
    "ldm-inject-strict": (
        "the same injection is dropped and flagged under strict policy",
        lambda seed: observe_ldm_injection("strict", seed),
        check_ldm_strict),
    "cbc-forge-faithful": (
        "a blind CBC bit-flip turns an energy sample into a heart-rate row",
        lambda seed: observe_envelope_forgery(FAITHFUL, seed),
        check_forge_faithful),
    "cbc-forge-mitigated": (
        "the same bit-flip is rejected outright by the AEAD envelope",
        lambda seed: observe_envelope_forgery(AEAD_MITIGATED, seed),
        check_forge_mitigated),
    "deletion-artifacts": (
        "deleted cycle samples leave recoverable traces until hardened",
        lambda seed: observe_deletion_lifecycle(seed),
        check_deletion),
}


def list_scenarios() -> list[tuple[str, str]]:
    return [(name, entry[0]) for name, entry in sorted(_SCENARIOS.items())]


def run_scenario(name: str, seed: int = DEFAULT_SEED) -> ScenarioReport:
    """Raises ScenarioUnknown for bad names, AssertionFailed with a diff."""
    try:
        _, observe, check = _SCENARIOS[name]
    except KeyError:
        raise ScenarioUnknown(
            "no scenario %r; known: %s"
            % (name, ", ".join(sorted(_SCENARIOS)))) from None
    observations = observe(seed)
    checks = check(observations)
    report = ScenarioReport(
        name=name, seed=seed,
        passed=all(c.passed for c in checks),
        checks=checks,
        events=observations.get("events", []),
        transcript=observations.get("transcript", b""),
        keylog=observations.get("keylog", []))
    if not report.passed:
        raise AssertionFailed(format_report(report), report)
    return report

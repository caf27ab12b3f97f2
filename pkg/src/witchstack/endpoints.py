"""Phone endpoint and watch emulator: the full stack wired together.

    watch                                   phone
    -----                                   -----
    scripted samples, shoes fetches         health store, proxy, firewall
    NanoSync <-> A-over-C <-> Alloy         NanoSync <-> A-over-C <-> Alloy
    inner mux (class C + D)                 inner mux (class C + D)
    ESP tunnels over NRLP frames            ESP tunnels over NRLP frames
    magnet prelude + link framing  <----->  magnet prelude + link framing
                       one loopback TCP connection

The phone listens; the watch connects (with retry/backoff), negotiates
the service channel, then initiates one IKE handshake per traffic class.
Once both tunnels stand, each side raises its inner muxes, the message
bus, and the health-sync service; the phone additionally attaches the
proxy listener and is ready for its control API.

Frame routing, one link frame per NRLP frame:

    0x04 IKEv2          handshake + INFORMATIONAL control, routed by the
                        class byte in the message header
    0x68 ESP class C    sealed inner packets, messaging tunnel
    0x64 ESP class D    sealed inner packets, bulk/proxy tunnel
    0x05 echo           ping answered with pong

Security observables land on the shared EventBus: UnauthenticatedNotify
from strict engines, ReplayDetected / TamperDetected from tunnel record
handling, TamperDetected from the health envelope layer.  A honored
PeerAddressUpdated triggers a WW-PROBE connection toward the new
address, standing in for re-pointing the Wi-Fi transport; on a rerouted
session that probe is what lands in the attacker's sink.
"""

from __future__ import annotations

import hashlib
import os
import socket
import threading
import time
import queue

from . import nrlp, suites
from .alloy import AlloySession, MessageLog, builtin_channels
from .aoverc import keyring_from_identity
from .config import Config
from .events import EventBus
from .healthstore import (
    SAMPLE_TYPE_HEART_RATE,
    HealthSample,
    HealthStore,
    PassphraseKeyProvider,
)
from .identity import DeviceIdentity
from .ike import (
    EXCHANGE_INFORMATIONAL,
    PAYLOAD_SK,
    HandshakeFailure,
    IkeEngine,
    IkeError,
    IkeInitiator,
    IkeMessage,
    IkeResponder,
    ike_decode,
    ike_encode,
)
from .inner import InnerError, InnerMux
from .link import (
    LinkClosed,
    TranscriptWriter,
    VirtualLink,
    advertise_services,
    negotiate_service_channel,
)
from .magnet import ServiceRejected, Timeout as MagnetTimeout
from .nanosync import HealthSyncService
from .nrlp import NrlpError, NrlpFrame, NotAPing, echo_reply, nrlp_decode, nrlp_encode
from .rng import RandomSource
from .shoes import (
    REQUEST_HOST,
    Firewall,
    ShoesReply,
    ShoesRequest,
    ShoesServer,
    shoes_connect,
)
from .tunnel import AuthTagMismatch, ReplayDetected, StaleSequence, TunnelError

__all__ = [
    "ConnectFailure",
    "EndpointError",
    "HandshakeFailure",
    "INNER_ADDRESSES",
    "PhoneEndpoint",
    "PortInUse",
    "PROBE_MAGIC",
    "SERVICE_NAME",
    "WatchEndpoint",
]

SERVICE_NAME = "terminus"
PROBE_MAGIC = b"WW-PROBE"

INNER_ADDRESSES = {"phone": "fe80::1", "watch": "fe80::2"}

ESP_TYPE_FOR_CLASS = {"C": nrlp.TYPE_ESP_CLASSC, "D": nrlp.TYPE_ESP}
CLASS_FOR_ESP_TYPE = {
    nrlp.TYPE_ESP_CLASSC: "C",
    nrlp.TYPE_ESP_CLASSC_ECT0: "C",
    nrlp.TYPE_ESP: "D",
    nrlp.TYPE_ESP_ECT0: "D",
}


class EndpointError(Exception):
    pass


class PortInUse(EndpointError):
    pass


class ConnectFailure(EndpointError):
    pass


class _Endpoint:
    """State and plumbing shared by both sides."""

    role = "?"

    def __init__(
        self,
        identity: DeviceIdentity,
        config: Config | None = None,
        *,
        rng: RandomSource | None = None,
        events: EventBus | None = None,
        profile: suites.Profile | None = None,
        transcript: TranscriptWriter | None = None,
        store: HealthStore | None = None,
        clock=None,
    ):
        self.identity = identity
        self.config = config or Config()
        if rng is not None:
            self.rng = rng
        elif self.config.seed is not None:
            self.rng = RandomSource(self.config.seed).child(self.role)
        else:
            self.rng = RandomSource()
        self.events = events or EventBus()
        self.profile = profile or suites.SERIES_9
        self.clock = clock or time.time
        self.store = store or HealthStore(clock=self.clock)
        self.keyring = keyring_from_identity(identity)

        self.link: VirtualLink | None = None
        self.engines: dict[str, IkeEngine] = {}
        self.muxes: dict[str, InnerMux] = {}
        self.alloy: AlloySession | None = None
        self.sync: HealthSyncService | None = None

        self._owns_transcript = False
        if transcript is None and self.config.transcript_path:
            transcript = TranscriptWriter(self.config.transcript_path)
            self._owns_transcript = True
        self._transcript = transcript
        self._alloy_log_file = None
        self._send_lock = threading.Lock()
        self._ready = threading.Event()
        self._stopping = False
        self._threads: list[threading.Thread] = []

    # -- lifecycle -----------------------------------------------------------

    def wait_ready(self, timeout: float | None = None) -> bool:
        return self._ready.wait(timeout)

    @property
    def ready(self) -> bool:
        return self._ready.is_set()

    def stop(self) -> None:
        self._stopping = True
        if self.alloy is not None:
            self.alloy.close()
        if self.link is not None:
            self.link.close()
        self._persist_store()
        if self._owns_transcript and self._transcript is not None:
            self._transcript.close()
            self._transcript = None
        if self._alloy_log_file is not None:
            self._alloy_log_file.close()
            self._alloy_log_file = None

    def _persist_store(self) -> None:
        if self.config.store_path and self.config.store_passphrase:
            self.store.save(self.config.store_path,
                            PassphraseKeyProvider(self.config.store_passphrase),
                            rng=self.rng.child("store-seal"))

    def _spawn(self, target, *args) -> threading.Thread:
        thread = threading.Thread(target=target, args=args, daemon=True)
        thread.start()
        self._threads.append(thread)
        return thread

    # -- send paths -----------------------------------------------------------

    def _send_nrlp(self, frame: NrlpFrame) -> None:
        # the link is a lossy carrier: frames sent while it is down are
        # dropped, and loss of connectivity is surfaced by the rx loop
        link = self.link
        if link is None:
            return
        try:
            link.send_frame(nrlp_encode(frame))
        except (LinkClosed, OSError):
            pass

    def _send_ike(self, msg: IkeMessage) -> None:
        with self._send_lock:
            self._send_nrlp(NrlpFrame(nrlp.TYPE_IKEV2, ike_encode(msg)))

    def _send_esp(self, traffic_class: str, packet: bytes) -> None:
        engine = self.engines[traffic_class]
        # one lock covers seal + transmit so record order matches seq order
        with self._send_lock:
            sealed = engine.session.seal(packet)
            self._send_nrlp(NrlpFrame(ESP_TYPE_FOR_CLASS[traffic_class], sealed))

    def _esp_sender(self, traffic_class: str):
        def send(packet: bytes) -> None:
            self._send_esp(traffic_class, packet)
        return send

    # -- receive path -----------------------------------------------------------

    def _rx_loop(self, link: VirtualLink) -> None:
        while not self._stopping:
            try:
                frame_bytes = link.recv_frame(None)
            except (LinkClosed, MagnetTimeout, OSError):
                break
            try:
                self._dispatch(frame_bytes)
            except Exception as exc:  # a bad frame must never kill the pump
                self.events.emit("DispatchError",
                                 "%s: %s" % (type(exc).__name__, exc))
        self._on_link_down()

    def _dispatch(self, frame_bytes: bytes) -> None:
        try:
            frame, _ = nrlp_decode(frame_bytes)
        except NrlpError as exc:
            self.events.emit("MalformedFrame", str(exc))
            return
        if frame.frame_type == nrlp.TYPE_IKEV2:
            self._handle_ike(ike_decode(frame.payload))
        elif frame.frame_type in CLASS_FOR_ESP_TYPE:
            self._handle_esp(CLASS_FOR_ESP_TYPE[frame.frame_type], frame.payload)
        elif frame.frame_type == nrlp.TYPE_ECHO:
            self._handle_echo(frame)
        # padding and unknown types are dropped

    def _handle_echo(self, frame: NrlpFrame) -> None:
        try:
            pong = echo_reply(frame)
        except NotAPing:
            return
        with self._send_lock:
            self._send_nrlp(pong)

    def _handle_esp(self, traffic_class: str, record: bytes) -> None:
        engine = self.engines.get(traffic_class)
        if engine is None or not engine.established:
            return
        try:
            packet = engine.session.open(record)
        except ReplayDetected as exc:
            self.events.emit("ReplayDetected",
                             "class %s: %s" % (traffic_class, exc))
            return
        except AuthTagMismatch as exc:
            self.events.emit("TamperDetected",
                             "class %s record: %s" % (traffic_class, exc))
            return
        except (StaleSequence, TunnelError):
            return
        mux = self.muxes.get(traffic_class)
        if mux is None:
            return
        try:
            mux.handle_packet(packet)
        except InnerError as exc:
            self.events.emit("MalformedFrame", "inner: %s" % exc)

    def _handle_ike(self, msg: IkeMessage) -> None:
        raise NotImplementedError

    def _handle_informational(self, msg: IkeMessage) -> None:
        engine = self.engines.get(msg.traffic_class)
        if engine is None or not engine.established:
            return
        try:
            effects = engine.process_notify(msg)
        except IkeError as exc:
            self.events.emit("BadControlMessage", str(exc))
            return
        if msg.is_response:
            engine.keepalive_answered()
        elif msg.first(PAYLOAD_SK) is not None:
            # only authenticated requests earn a response
            self._send_ike(engine.address_update_message(response=True))
        self._apply_effects(engine, effects)

    def _apply_effects(self, engine: IkeEngine, effects) -> None:
        for effect in effects:
            self.events.emit(effect.kind, repr(effect.detail))
            if effect.kind == "PeerAddressUpdated":
                self._spawn(self._probe_peer, engine.traffic_class,
                            effect.detail["host"], effect.detail["port"])

    def _probe_peer(self, traffic_class: str, host: str, port: int) -> None:
        """Re-point the transport: one marked connection to the new address."""
        try:
            with socket.create_connection((host, port), timeout=1.0) as sock:
                sock.sendall(PROBE_MAGIC + traffic_class.encode("ascii"))
        except OSError:
            pass

    def _on_link_down(self) -> None:
        self._ready.clear()
        for engine in self.engines.values():
            engine.down = True

    # -- services above the tunnels ------------------------------------------------

    def _services_up(self) -> None:
        self.muxes = {cls: InnerMux(self.role, self._esp_sender(cls))
                      for cls in ("C", "D")}
        log = None
        if self.config.alloy_log_path:
            self._alloy_log_file = open(self.config.alloy_log_path, "w",
                                        encoding="utf-8")
            log = MessageLog(self._alloy_log_file)
        self.alloy = AlloySession(
            self.role, self.muxes,
            device_id=self.identity.device_name,
            descriptors=builtin_channels(self.rng.child("channels")),
            log=log, clock=self.clock, rng=self.rng.child("alloy"))
        self.sync = HealthSyncService(
            self.store, self.alloy, self.keyring,
            mode=self.config.envelope_mode,
            rng=self.rng.child("aoverc"),
            on_event=self.events.emit)
        if self.config.keepalive_interval > 0:
            self._spawn(self._keepalive_loop)

    def _keepalive_loop(self) -> None:
        interval = self.config.keepalive_interval
        while not self._stopping:
            time.sleep(interval)
            if self._stopping or not self._ready.is_set():
                continue
            for engine in list(self.engines.values()):
                if engine.established and not engine.down:
                    msg = engine.keepalive_tick()
                    if msg is not None:
                        try:
                            self._send_ike(msg)
                        except (LinkClosed, OSError):
                            return

    # -- health scripting ------------------------------------------------------------

    def push_samples(self) -> None:
        if self.sync is not None:
            self.sync.push_changes()

    def delete_sample(self, uuid: bytes) -> None:
        self.store.delete(uuid)
        if self.sync is not None:
            self.sync.push_changes()

    def harden_delete(self, uuid: bytes) -> None:
        self.store.hardened_delete(uuid)
        if self.sync is not None:
            self.sync.push_changes()

    # -- observability ---------------------------------------------------------------

    def state_hash(self) -> str:
        """Digest over both engines' notify-reachable state."""
        blob = b"".join(
            cls.encode() + self.engines[cls].state_hash().encode()
            for cls in sorted(self.engines))
        return hashlib.sha256(blob).hexdigest()

    def keylog_lines(self) -> list[str]:
        lines = []
        for cls in sorted(self.engines):
            engine = self.engines[cls]
            if engine.material is not None and engine.chosen is not None:
                lines.append(engine.material.keylog_line(
                    "class%s" % cls, engine.chosen))
        return lines

    def status(self) -> dict:
        tunnels = {}
        for cls, engine in self.engines.items():
            chosen = engine.chosen
            tunnels[cls] = {
                "established": engine.established,
                "down": engine.down,
                "suite": ("%02x%02x%02x%02x" % (chosen.encryption, chosen.prf,
                                                chosen.dh, chosen.signature_hash)
                          if chosen else None),
                "peer_inner_address": engine.peer_inner_address,
                "peer_address": list(engine.peer_address)
                                if engine.peer_address else None,
            }
        peer_info = {}
        if "C" in self.engines:
            peer_info = dict(self.engines["C"].peer_info)
        all_rows = self.store.query(include_tombstones=True)
        live_rows = self.store.query()
        return {
            "role": self.role,
            "device_name": self.identity.device_name,
            "connected": self.link is not None,
            "ready": self._ready.is_set(),
            "modes": {"ldm": self.config.ldm_mode,
                      "envelope": self.config.envelope_mode},
            "tunnels": tunnels,
            "channels": sorted(self.alloy.channels) if self.alloy else [],
            "peer_info": peer_info,
            "store": {"live": len(live_rows),
                      "tombstones": len(all_rows) - len(live_rows)},
            "event_count": len(self.events.events()),
            "state_hash": self.state_hash(),
        }


class PhoneEndpoint(_Endpoint):
    """Listens for a watch, answers handshakes, serves proxy + health."""

    role = "phone"

    def __init__(self, identity, config=None, *, network: str = "wifi",
                 dialer=None, firewall: Firewall | None = None, **kwargs):
        super().__init__(identity, config, **kwargs)
        self.network = network
        self.firewall = firewall or Firewall(rules_path=self.config.rules_path)
        self.shoes = ShoesServer(self.firewall, network=network, dialer=dialer,
                                 on_event=self.events.emit)
        self.listener: socket.socket | None = None
        self.port: int | None = None
        if (self.config.store_path and self.config.store_passphrase
                and os.path.exists(self.config.store_path)):
            self.store = HealthStore.load(
                self.config.store_path,
                PassphraseKeyProvider(self.config.store_passphrase),
                clock=self.clock)

    def start(self) -> "PhoneEndpoint":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            sock.bind(("127.0.0.1", self.config.link_port))
            sock.listen(4)
        except OSError as exc:
            sock.close()
            raise PortInUse("cannot listen on %d: %s"
                            % (self.config.link_port, exc)) from exc
        self.port = sock.getsockname()[1]
        self.listener = sock
        self._spawn(self._accept_loop)
        return self

    def stop(self) -> None:
        super().stop()
        if self.listener is not None:
            self.listener.close()

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self.listener.accept()
            except OSError:
                return
            self._run_link(conn)

    def _run_link(self, sock: socket.socket) -> None:
        link = VirtualLink(sock, "phone", self._transcript)
        try:
            advertise_services(link, {SERVICE_NAME})
        except (ServiceRejected, MagnetTimeout, LinkClosed):
            link.close()
            return
        self._reset_session()
        self.link = link
        self._rx_loop(link)
        link.close()

    def _reset_session(self) -> None:
        self._ready.clear()
        strict = self.config.ldm_mode == "strict"
        self.engines = {
            cls: IkeResponder(
                self.identity, cls, self.profile,
                rng=self.rng.child("ike-%s" % cls),
                strict=strict,
                inner_address=INNER_ADDRESSES["phone"],
                on_security_event=self.events.emit)
            for cls in ("C", "D")
        }

    def _handle_ike(self, msg: IkeMessage) -> None:
        if msg.exchange_type == EXCHANGE_INFORMATIONAL:
            self._handle_informational(msg)
            return
        engine = self.engines.get(msg.traffic_class)
        if engine is None:
            return
        try:
            reply = engine.handle(msg)
        except IkeError as exc:
            self.events.emit("HandshakeError",
                             "class %s: %s" % (msg.traffic_class, exc))
            return
        if reply is not None:
            self._send_ike(reply)
        if (not self._ready.is_set()
                and all(e.established for e in self.engines.values())):
            self._services_up()
            self._ready.set()

    def _services_up(self) -> None:
        super()._services_up()
        self.alloy.serve()
        self.shoes.attach(self.muxes["D"])


class WatchEndpoint(_Endpoint):
    """Connects to a phone, drives handshakes, runs the scripted behavior."""

    role = "watch"

    def __init__(self, identity, address: tuple[str, int],
                 config=None, **kwargs):
        super().__init__(identity, config, **kwargs)
        self.address = address
        self._ike_queues: dict[str, queue.Queue] = {
            "C": queue.Queue(), "D": queue.Queue()}

    def start(self, timeout: float = 10.0) -> "WatchEndpoint":
        sock = self._connect_with_retry()
        link = VirtualLink(sock, "watch", self._transcript)
        try:
            negotiate_service_channel(link, SERVICE_NAME, timeout=timeout)
        except (ServiceRejected, MagnetTimeout, LinkClosed) as exc:
            link.close()
            raise ConnectFailure("service negotiation failed: %s" % exc) from exc
        self.link = link
        strict = self.config.ldm_mode == "strict"
        self.engines = {
            cls: IkeInitiator(
                self.identity, cls, self.profile,
                rng=self.rng.child("ike-%s" % cls),
                strict=strict,
                inner_address=INNER_ADDRESSES["watch"],
                on_security_event=self.events.emit)
            for cls in ("C", "D")
        }
        self._spawn(self._rx_loop, link)
        for cls in ("C", "D"):
            self._handshake(cls, timeout)
        self._services_up()
        self.alloy.start(timeout=timeout)
        self._ready.set()
        return self

    def _connect_with_retry(self) -> socket.socket:
        deadline = time.monotonic() + self.config.connect_timeout
        backoff = self.config.retry_backoff
        attempts = 0
        while True:
            attempts += 1
            try:
                return socket.create_connection(self.address, timeout=2.0)
            except OSError as exc:
                if time.monotonic() + backoff >= deadline:
                    raise ConnectFailure(
                        "cannot reach %s:%d after %d attempt(s): %s"
                        % (self.address[0], self.address[1], attempts, exc)
                    ) from exc
                time.sleep(backoff)
                backoff = min(backoff * 2, 2.0)

    def _handshake(self, traffic_class: str, timeout: float) -> None:
        engine = self.engines[traffic_class]
        self._send_ike(engine.start())
        deadline = time.monotonic() + timeout
        while not engine.established:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise HandshakeFailure("class %s handshake timed out"
                                       % traffic_class)
            try:
                msg = self._ike_queues[traffic_class].get(timeout=remaining)
            except queue.Empty:
                raise HandshakeFailure("class %s handshake timed out"
                                       % traffic_class) from None
            try:
                reply = engine.handle(msg)
            except HandshakeFailure:
                raise
            except IkeError as exc:
                raise HandshakeFailure("class %s: %s"
                                       % (traffic_class, exc)) from exc
            if reply is not None:
                self._send_ike(reply)

    def _handle_ike(self, msg: IkeMessage) -> None:
        if msg.exchange_type == EXCHANGE_INFORMATIONAL:
            self._handle_informational(msg)
            return
        engine = self.engines.get(msg.traffic_class)
        if engine is None or engine.established:
            return
        self._ike_queues[msg.traffic_class].put(msg)

    # -- scripted behavior ---------------------------------------------------------

    def start_script(self) -> None:
        self._spawn(self._script_loop)

    def _script_loop(self) -> None:
        while not self._stopping:
            time.sleep(self.config.sample_interval)
            if self._stopping or not self._ready.is_set():
                continue
            try:
                self.emit_heart_rate()
            except Exception:
                return

    def emit_heart_rate(self, value: float | None = None,
                        when: float | None = None) -> HealthSample:
        if value is None:
            value = 55.0 + self.rng.bytes(1)[0] % 60
        return self.emit_sample(SAMPLE_TYPE_HEART_RATE, float(value),
                                "count/min", when=when)

    def emit_sample(self, sample_type: int, value: float, unit: str,
                    when: float | None = None) -> HealthSample:
        now = self.clock() if when is None else when
        sample = HealthSample(
            uuid=self.rng.uuid4().bytes,
            sample_type=sample_type,
            value=float(value), unit=unit,
            start_time=now, end_time=now,
            source=self.identity.device_name, provenance="scripted")
        self.store.insert(sample)
        self.sync.push_changes()
        return sample

    def shoes_fetch(self, host: str, port: int, payload: bytes = b"ping",
                    process: str = "scripted-fetch", condition_flags: int = 0,
                    request_type: int = REQUEST_HOST,
                    timeout: float = 5.0) -> tuple[ShoesReply, bytes]:
        """Proxy one request and echo `payload` through it if allowed."""
        request = ShoesRequest(request_type, port, host, process,
                               condition_flags)
        reply, conn = shoes_connect(self.muxes["D"], request, timeout)
        if reply.denied:
            return reply, b""
        conn.send(payload)
        echoed = b""
        while len(echoed) < len(payload):
            chunk = conn.recv(timeout)
            if chunk == b"":
                break
            echoed += chunk
        conn.close()
        return reply, echoed

    def send_address_update(self, host: str | None = None,
                            port: int | None = None,
                            traffic_class: str = "C") -> None:
        engine = self.engines[traffic_class]
        engine.local_address = ((host, port) if host is not None
                                else None)
        self._send_ike(engine.address_update_message())

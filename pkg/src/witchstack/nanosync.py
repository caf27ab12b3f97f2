"""Health-data replication: anchor-ordered change sets over the bus.

Messages are tag-length-value encoded, one variant byte then TLVs whose
tags are one byte and lengths four bytes big-endian:

    variant 0x01 change set:   change TLV (0x01) ... status TLV (0x02)
    variant 0x02 sync status:  anchor TLV (0x01) ...

    change body TLVs: 0x01 insert sample, 0x02 delete uuid (16 B),
                      0x03 object type, 0x04 start anchor (u64),
                      0x05 end anchor (u64)
    status body:      one byte, 1 Continue / 2 Done
    anchor body:      value (u64 BE) ‖ domain text

    sample: +-----+----------+------+------+-------+-------+-----+
            | ver | reserved | uuid | type | value | start | end |
            | 1 B | 4 B      | 16 B | 1 B  | f64   | f64   | f64 |
            +-----+----------+------+------+-------+-------+-----+
            ‖ unit (u8-len) ‖ source (u8-len) ‖ provenance (u8-len)

Field order is load-bearing: with the insert TLV first in the first
change, the bytes before the uuid total exactly 16, so under a 16-byte
block cipher the uuid fills block 1 and the type byte starts block 2.
Unknown tags are skipped at every level for forward compatibility.

Anchors are per-domain change counters.  A producer emits one change per
journal entry (end anchor = start + 1) in batches of up to 50, flagging
Continue until it has nothing newer than the consumer's anchor.  The
consumer applies a change only when its start anchor matches the applied
anchor, holds back on gaps, skips duplicates, and answers with a sync
status listing post-application anchors.  A consumer claiming an anchor
ahead of the producer's journal is a desync; the producer replays from
zero ("full resync"), which is safe because inserts are upserts and
deletes are idempotent.

On the wire the payloads ride the health topic inside per-message
protection envelopes; HealthSyncService does that wrapping and turns
envelope failures into TamperDetected events instead of store writes.
"""

from __future__ import annotations

import logging
import struct
import threading

from dataclasses import dataclass

from . import aoverc
from .alloy import HEALTH_TOPIC, AlloySession, SessionDown
from .healthstore import HealthSample, HealthStore
from .rng import RandomSource

__all__ = [
    "BATCH_SIZE",
    "HealthSyncService",
    "Malformed",
    "NanoSyncChange",
    "NanoSyncError",
    "NanoSyncMessage",
    "PeerAhead",
    "STATUS_CONTINUE",
    "STATUS_DONE",
    "UnknownVariant",
    "apply_changes",
    "nanosync_decode",
    "nanosync_encode",
    "produce_changes",
]

log = logging.getLogger(__name__)

VARIANT_CHANGE_SET = 0x01
VARIANT_SYNC_STATUS = 0x02

TLV_CHANGE = 0x01
TLV_STATUS = 0x02
TLV_ANCHOR = 0x01

CHANGE_INSERT = 0x01
CHANGE_DELETE = 0x02
CHANGE_OBJECT_TYPE = 0x03
CHANGE_START_ANCHOR = 0x04
CHANGE_END_ANCHOR = 0x05

STATUS_CONTINUE = 1
STATUS_DONE = 2

SAMPLE_VERSION = 0x01
_SAMPLE_FIXED = 1 + 4 + 16 + 1 + 8 * 3

BATCH_SIZE = 50


class NanoSyncError(Exception):
    pass


class Malformed(NanoSyncError):
    pass


class UnknownVariant(NanoSyncError):
    pass


class PeerAhead(NanoSyncError):
    """The consumer claims an anchor past our journal: protocol desync."""


@dataclass(frozen=True)
class NanoSyncChange:
    object_type: str
    start_anchor: int
    end_anchor: int
    inserts: tuple[HealthSample, ...] = ()
    deletes: tuple[bytes, ...] = ()

    def __post_init__(self):
        if self.end_anchor != self.start_anchor + 1:
            raise Malformed("end anchor %d is not start %d + 1"
                            % (self.end_anchor, self.start_anchor))
        if not self.inserts and not self.deletes:
            raise Malformed("change carries neither inserts nor deletes")


@dataclass(frozen=True)
class NanoSyncMessage:
    variant: int
    changes: tuple[NanoSyncChange, ...] = ()
    status: int | None = None
    anchors: tuple[tuple[str, int], ...] = ()

    @classmethod
    def change_set(cls, changes, status: int) -> "NanoSyncMessage":
        return cls(VARIANT_CHANGE_SET, tuple(changes), status, ())

    @classmethod
    def sync_status(cls, anchors: dict[str, int]) -> "NanoSyncMessage":
        return cls(VARIANT_SYNC_STATUS, (), None,
                   tuple(sorted(anchors.items())))


# --- codec ------------------------------------------------------------------------

def _tlv(tag: int, body: bytes) -> bytes:
    return bytes([tag]) + struct.pack(">I", len(body)) + body


def _pack_str8(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 255:
        raise Malformed("string too long for u8 length")
    return bytes([len(raw)]) + raw


def _encode_sample(sample: HealthSample) -> bytes:
    return (bytes([SAMPLE_VERSION]) + bytes(4) + sample.uuid
            + bytes([sample.sample_type])
            + struct.pack(">ddd", sample.value, sample.start_time,
                          sample.end_time)
            + _pack_str8(sample.unit) + _pack_str8(sample.source)
            + _pack_str8(sample.provenance))


def _decode_sample(body: bytes) -> HealthSample:
    if len(body) < _SAMPLE_FIXED:
        raise Malformed("sample body %d bytes, need %d"
                        % (len(body), _SAMPLE_FIXED))
    if body[0] != SAMPLE_VERSION:
        raise Malformed("sample version %d" % body[0])
    if body[1:5] != bytes(4):
        raise Malformed("sample reserved bytes not zero")
    uuid = bytes(body[5:21])
    sample_type = body[21]
    value, start_time, end_time = struct.unpack_from(">ddd", body, 22)
    offset = _SAMPLE_FIXED

    def take_str() -> str:
        nonlocal offset
        if offset >= len(body):
            raise Malformed("sample strings truncated")
        n = body[offset]
        offset += 1
        if offset + n > len(body):
            raise Malformed("sample string overruns body")
        text = body[offset:offset + n].decode("utf-8", "replace")
        offset += n
        return text

    unit = take_str()
    source = take_str()
    provenance = take_str()
    try:
        return HealthSample(uuid, sample_type, value, unit,
                            start_time, end_time, source, provenance)
    except Exception as exc:
        raise Malformed(str(exc)) from None


def _iter_tlvs(data: bytes, offset: int = 0):
    while offset < len(data):
        if offset + 5 > len(data):
            raise Malformed("truncated TLV header")
        tag = data[offset]
        (length,) = struct.unpack_from(">I", data, offset + 1)
        offset += 5
        if offset + length > len(data):
            raise Malformed("TLV overruns buffer")
        yield tag, data[offset:offset + length]
        offset += length


def _encode_change(change: NanoSyncChange) -> bytes:
    body = b""
    for sample in change.inserts:       # inserts first: uuid block alignment
        body += _tlv(CHANGE_INSERT, _encode_sample(sample))
    for uuid in change.deletes:
        if len(uuid) != 16:
            raise Malformed("delete uuid must be 16 bytes")
        body += _tlv(CHANGE_DELETE, uuid)
    body += _tlv(CHANGE_OBJECT_TYPE, change.object_type.encode("utf-8"))
    body += _tlv(CHANGE_START_ANCHOR, struct.pack(">Q", change.start_anchor))
    body += _tlv(CHANGE_END_ANCHOR, struct.pack(">Q", change.end_anchor))
    return body


def _decode_change(body: bytes) -> NanoSyncChange:
    inserts: list[HealthSample] = []
    deletes: list[bytes] = []
    object_type = None
    start_anchor = None
    end_anchor = None
    for tag, value in _iter_tlvs(body):
        if tag == CHANGE_INSERT:
            inserts.append(_decode_sample(value))
        elif tag == CHANGE_DELETE:
            if len(value) != 16:
                raise Malformed("delete uuid is %d bytes" % len(value))
            deletes.append(bytes(value))
        elif tag == CHANGE_OBJECT_TYPE:
            object_type = value.decode("utf-8", "replace")
        elif tag == CHANGE_START_ANCHOR:
            if len(value) != 8:
                raise Malformed("start anchor is %d bytes" % len(value))
            (start_anchor,) = struct.unpack(">Q", value)
        elif tag == CHANGE_END_ANCHOR:
            if len(value) != 8:
                raise Malformed("end anchor is %d bytes" % len(value))
            (end_anchor,) = struct.unpack(">Q", value)
        # unknown tags skipped
    if object_type is None or start_anchor is None or end_anchor is None:
        raise Malformed("change missing object type or anchors")
    return NanoSyncChange(object_type, start_anchor, end_anchor,
                          tuple(inserts), tuple(deletes))


def nanosync_encode(msg: NanoSyncMessage) -> bytes:
    if msg.variant == VARIANT_CHANGE_SET:
        if msg.status not in (STATUS_CONTINUE, STATUS_DONE):
            raise Malformed("change set needs a Continue/Done status")
        out = bytes([VARIANT_CHANGE_SET])
        for change in msg.changes:
            out += _tlv(TLV_CHANGE, _encode_change(change))
        out += _tlv(TLV_STATUS, bytes([msg.status]))
        return out
    if msg.variant == VARIANT_SYNC_STATUS:
        out = bytes([VARIANT_SYNC_STATUS])
        for domain, value in msg.anchors:
            out += _tlv(TLV_ANCHOR,
                        struct.pack(">Q", value) + domain.encode("utf-8"))
        return out
    raise UnknownVariant("variant %d" % msg.variant)


def nanosync_decode(data: bytes) -> NanoSyncMessage:
    if not data:
        raise Malformed("empty buffer")
    variant = data[0]
    if variant == VARIANT_CHANGE_SET:
        changes: list[NanoSyncChange] = []
        status = None
        for tag, value in _iter_tlvs(data, 1):
            if tag == TLV_CHANGE:
                changes.append(_decode_change(value))
            elif tag == TLV_STATUS:
                if len(value) != 1 or value[0] not in (STATUS_CONTINUE,
                                                       STATUS_DONE):
                    raise Malformed("bad status byte")
                status = value[0]
        if status is None:
            raise Malformed("change set without status")
        return NanoSyncMessage.change_set(changes, status)
    if variant == VARIANT_SYNC_STATUS:
        anchors: list[tuple[str, int]] = []
        for tag, value in _iter_tlvs(data, 1):
            if tag == TLV_ANCHOR:
                if len(value) < 8:
                    raise Malformed("anchor body too short")
                (number,) = struct.unpack_from(">Q", value)
                anchors.append((value[8:].decode("utf-8", "replace"), number))
        return NanoSyncMessage(VARIANT_SYNC_STATUS, (), None, tuple(anchors))
    raise UnknownVariant("variant %d" % variant)


# --- producer / consumer ------------------------------------------------------------

def produce_changes(store: HealthStore, peer_anchors: dict[str, int],
                    batch_size: int = BATCH_SIZE) -> NanoSyncMessage:
    """Changes the peer has not seen, oldest first, Continue when more wait."""
    changes: list[NanoSyncChange] = []
    exhausted = True
    for domain in store.journal_domains():
        peer_at = peer_anchors.get(domain, 0)
        local_at = store.local_anchor(domain)
        if peer_at > local_at:
            raise PeerAhead("%s: peer at %d, journal ends at %d"
                            % (domain, peer_at, local_at))
        budget = batch_size - len(changes)
        if budget <= 0:
            exhausted = False
            break
        entries = store.journal_since(domain, peer_at, budget + 1)
        if len(entries) > budget:
            exhausted = False
            entries = entries[:budget]
        for entry in entries:
            if entry.op == "insert":
                change = NanoSyncChange(domain, entry.anchor - 1, entry.anchor,
                                        inserts=(entry.sample,))
            elif entry.op == "delete":
                change = NanoSyncChange(domain, entry.anchor - 1, entry.anchor,
                                        deletes=(entry.uuid,))
            else:
                # husk: content purged; an all-zero delete keeps the
                # anchor moving and is a no-op at the consumer
                change = NanoSyncChange(domain, entry.anchor - 1, entry.anchor,
                                        deletes=(bytes(16),))
            changes.append(change)
    status = STATUS_DONE if exhausted else STATUS_CONTINUE
    return NanoSyncMessage.change_set(changes, status)


def apply_changes(store: HealthStore, msg: NanoSyncMessage) -> NanoSyncMessage:
    """Apply in-order changes, hold back gaps, answer with anchors."""
    if msg.variant != VARIANT_CHANGE_SET:
        raise NanoSyncError("can only apply change sets")
    touched: set[str] = set()
    for change in msg.changes:
        domain = change.object_type
        touched.add(domain)
        applied = store.applied_anchor(domain)
        if change.start_anchor == 0 and applied > 0:
            # producer restarted from zero: full resync, replay is safe
            log.warning("full resync for %r: replaying from anchor 0", domain)
            store.set_applied_anchor(domain, 0)
            applied = 0
        if change.end_anchor <= applied:
            continue                    # duplicate of something applied
        if change.start_anchor != applied:
            continue                    # gap: hold back, anchors reveal it
        for sample in change.inserts:
            store.apply_remote_insert(sample)
        for uuid in change.deletes:
            store.apply_remote_delete(uuid)
        store.set_applied_anchor(domain, change.end_anchor)
    anchors = store.applied_domains()
    for domain in touched:
        anchors.setdefault(domain, 0)
    return NanoSyncMessage.sync_status(anchors)


# --- bus glue -------------------------------------------------------------------------

class HealthSyncService:
    """Wires a store to the health topic through protection envelopes."""

    def __init__(self, store: HealthStore, session: AlloySession,
                 keyring: aoverc.AovercKeyring, mode: str = aoverc.FAITHFUL,
                 rng: RandomSource | None = None, on_event=None):
        self.store = store
        self.session = session
        self.keyring = keyring
        self.mode = mode
        self.rng = rng or RandomSource()
        self.on_event = on_event or (lambda kind, detail: None)
        self.peer_anchors: dict[str, int] = {}
        self.resyncs = 0
        self._lock = threading.Lock()
        session.register_handler(HEALTH_TOPIC, self._on_payload)

    def _send(self, msg: NanoSyncMessage) -> None:
        envelope = aoverc.aoverc_encrypt(self.keyring, nanosync_encode(msg),
                                         self.mode, self.rng)
        try:
            self.session.send_on_topic(HEALTH_TOPIC,
                                       aoverc.encode_envelope(envelope))
        except SessionDown:
            log.debug("sync message dropped: session closed")

    def push_changes(self) -> None:
        """Send everything the peer lacks; Continue batches follow acks."""
        with self._lock:
            try:
                msg = produce_changes(self.store, self.peer_anchors)
            except PeerAhead as exc:
                log.warning("health sync desync (%s); full resync", exc)
                self.resyncs += 1
                self.peer_anchors = {}
                msg = produce_changes(self.store, self.peer_anchors)
        self._send(msg)

    def _on_payload(self, payload: bytes, alloy_msg) -> None:
        try:
            envelope = aoverc.decode_envelope(payload)
            plaintext = aoverc.aoverc_decrypt(self.keyring, envelope, self.mode)
        except aoverc.AovercError as exc:
            self.on_event("TamperDetected",
                          "health envelope rejected: %s" % exc)
            return
        try:
            msg = nanosync_decode(plaintext)
        except NanoSyncError as exc:
            self.on_event("TamperDetected",
                          "health payload malformed: %s" % exc)
            return
        if msg.variant == VARIANT_CHANGE_SET:
            reply = apply_changes(self.store, msg)
            self._send(reply)
            return
        outstanding = False
        with self._lock:
            for domain, anchor in msg.anchors:
                if anchor > self.peer_anchors.get(domain, 0):
                    self.peer_anchors[domain] = anchor
                self.store.record_peer_ack(domain, anchor)
            for domain in self.store.journal_domains():
                if self.store.local_anchor(domain) > \
                        self.peer_anchors.get(domain, 0):
                    outstanding = True
        if outstanding:
            self.push_changes()

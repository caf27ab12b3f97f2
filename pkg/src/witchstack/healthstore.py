"""Encrypted-at-rest health sample store with honest deletion semantics.

Live samples, tombstones, sync anchors, and a per-domain change journal
live in one table serialized to a single sealed file:

    +--------+---------+-----------+-----------+------------------+
    | "WWHS" | version | salt      | nonce     | AES-GCM(body)    |
    | 4 B    | 1 B     | 16 B      | 12 B      | JSON + tag       |
    +--------+---------+-----------+-----------+------------------+

The key comes from a pluggable provider (default: passphrase through
scrypt), standing in for a hardware keystore.  The magic and version are
authenticated as associated data.

Deleting a sample keeps a deliberate artifact: a tombstone row holding
only the uuid, the sample type, and the deletion time, every other field
nulled.  hardened_delete is the stricter extension: it first emits a
normal delete through the journal so peers converge, then purges the row,
the tombstone, and every journal trace of the sample's content, leaving
anchor-preserving husks so sync counters stay monotone.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, replace

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .rng import RandomSource

__all__ = [
    "BadStoreFile",
    "HealthSample",
    "HealthStore",
    "PassphraseKeyProvider",
    "SAMPLE_TYPE_ACTIVE_ENERGY",
    "SAMPLE_TYPE_CYCLE_FLOW",
    "SAMPLE_TYPE_HEART_RATE",
    "SAMPLE_TYPES",
    "StoreError",
    "StoreLocked",
    "Tombstone",
    "UnknownUuid",
    "sample_type_name",
]

MAGIC = b"WWHS"
FORMAT_VERSION = 1
_SCRYPT_N = 2 ** 14
_SCRYPT_R = 8
_SCRYPT_P = 1

SAMPLE_TYPE_HEART_RATE = 0x05
SAMPLE_TYPE_ACTIVE_ENERGY = 0x0A
SAMPLE_TYPE_CYCLE_FLOW = 0x5F

# registry is extensible; these carry the canonical units
SAMPLE_TYPES: dict[int, tuple[str, str]] = {
    SAMPLE_TYPE_HEART_RATE: ("heart-rate", "count/min"),
    SAMPLE_TYPE_ACTIVE_ENERGY: ("active-energy", "kcal"),
    SAMPLE_TYPE_CYCLE_FLOW: ("cycle-flow", "flow-level"),
}

OBJECT_TYPE_QUANTITY = "Quantity Sample"


def sample_type_name(sample_type: int) -> str:
    entry = SAMPLE_TYPES.get(sample_type)
    return entry[0] if entry else "type-0x%02x" % sample_type


class StoreError(Exception):
    pass


class StoreLocked(StoreError):
    pass


class BadStoreFile(StoreError):
    pass


class UnknownUuid(StoreError):
    pass


@dataclass(frozen=True)
class HealthSample:
    uuid: bytes
    sample_type: int
    value: float
    unit: str
    start_time: float
    end_time: float
    source: str = ""
    provenance: str = ""

    def __post_init__(self):
        if len(self.uuid) != 16:
            raise StoreError("sample uuid must be 16 bytes")
        if self.end_time < self.start_time:
            raise StoreError("sample ends before it starts")

    @property
    def type_name(self) -> str:
        return sample_type_name(self.sample_type)


@dataclass(frozen=True)
class Tombstone:
    uuid: bytes
    sample_type: int
    deletion_time: float


@dataclass
class _JournalEntry:
    anchor: int
    op: str                       # "insert" | "delete" | "husk"
    uuid: bytes | None = None
    sample: HealthSample | None = None
    scrub_after_ack: bool = False


class PassphraseKeyProvider:
    """Memory-hard passphrase KDF; derive() is deterministic per salt."""

    def __init__(self, passphrase: str):
        self._passphrase = passphrase.encode("utf-8")

    def derive(self, salt: bytes) -> bytes:
        return hashlib.scrypt(self._passphrase, salt=salt,
                              n=_SCRYPT_N, r=_SCRYPT_R, p=_SCRYPT_P, dklen=32)


class HealthStore:
    """In-memory table with sealed-file persistence.

    All mutations run under one lock; queries copy under the lock, so
    readers always see a consistent snapshot.
    """

    def __init__(self, clock=None):
        self.clock = clock or time.time
        self._lock = threading.RLock()
        self._samples: dict[bytes, HealthSample] = {}
        self._tombstones: dict[bytes, Tombstone] = {}
        self._journal: dict[str, list[_JournalEntry]] = {}
        self._local_anchors: dict[str, int] = {}
        self._applied_anchors: dict[str, int] = {}
        self._peer_acked: dict[str, int] = {}

    # -- mutation ---------------------------------------------------------------

    def insert(self, sample: HealthSample,
               domain: str = OBJECT_TYPE_QUANTITY) -> int:
        """Upsert by uuid; returns the new local anchor for the domain."""
        with self._lock:
            self._samples[sample.uuid] = sample
            self._tombstones.pop(sample.uuid, None)
            return self._journal_append(domain, _JournalEntry(
                0, "insert", sample.uuid, sample))

    def delete(self, uuid: bytes, domain: str = OBJECT_TYPE_QUANTITY) -> int:
        """Tombstone a live sample; idempotent for already-deleted rows."""
        with self._lock:
            sample = self._samples.pop(uuid, None)
            if sample is None:
                if uuid in self._tombstones:
                    return self._local_anchors.get(domain, 0)
                raise UnknownUuid(uuid.hex())
            self._tombstones[uuid] = Tombstone(uuid, sample.sample_type,
                                               self.clock())
            return self._journal_append(domain, _JournalEntry(0, "delete", uuid))

    def hardened_delete(self, uuid: bytes,
                        domain: str = OBJECT_TYPE_QUANTITY) -> int:
        """Delete (propagating to peers) and purge every local trace."""
        with self._lock:
            if uuid in self._samples:
                anchor = self.delete(uuid, domain)
            elif uuid in self._tombstones:
                anchor = self._local_anchors.get(domain, 0)
            else:
                raise UnknownUuid(uuid.hex())
            self._tombstones.pop(uuid, None)
            for entries in self._journal.values():
                for index, entry in enumerate(entries):
                    if entry.uuid != uuid:
                        continue
                    if entry.op == "insert":
                        # content must vanish now; the anchor stays
                        entries[index] = _JournalEntry(entry.anchor, "husk")
                    elif entry.op == "delete":
                        # peers still need the delete; scrub once acked
                        entry.scrub_after_ack = True
            self._scrub_acked(domain)
            return anchor

    def apply_remote_insert(self, sample: HealthSample) -> None:
        with self._lock:
            self._samples[sample.uuid] = sample
            self._tombstones.pop(sample.uuid, None)

    def apply_remote_delete(self, uuid: bytes) -> None:
        """Deletes for uuids we never saw are silent no-ops."""
        with self._lock:
            sample = self._samples.pop(uuid, None)
            if sample is not None:
                self._tombstones[uuid] = Tombstone(uuid, sample.sample_type,
                                                   self.clock())

    def _journal_append(self, domain: str, entry: _JournalEntry) -> int:
        anchor = self._local_anchors.get(domain, 0) + 1
        self._local_anchors[domain] = anchor
        entry.anchor = anchor
        self._journal.setdefault(domain, []).append(entry)
        return anchor

    def record_peer_ack(self, domain: str, anchor: int) -> None:
        with self._lock:
            if anchor > self._peer_acked.get(domain, 0):
                self._peer_acked[domain] = anchor
            self._scrub_acked(domain)

    def _scrub_acked(self, domain: str) -> None:
        acked = self._peer_acked.get(domain, 0)
        entries = self._journal.get(domain, [])
        for index, entry in enumerate(entries):
            if entry.scrub_after_ack and entry.anchor <= acked:
                entries[index] = _JournalEntry(entry.anchor, "husk")

    # -- sync bookkeeping ----------------------------------------------------------

    def local_anchor(self, domain: str = OBJECT_TYPE_QUANTITY) -> int:
        with self._lock:
            return self._local_anchors.get(domain, 0)

    def applied_anchor(self, domain: str = OBJECT_TYPE_QUANTITY) -> int:
        with self._lock:
            return self._applied_anchors.get(domain, 0)

    def set_applied_anchor(self, domain: str, value: int) -> None:
        with self._lock:
            self._applied_anchors[domain] = value

    def journal_since(self, domain: str, anchor: int,
                      limit: int) -> list[_JournalEntry]:
        with self._lock:
            entries = self._journal.get(domain, [])
            picked = [e for e in entries if e.anchor > anchor]
            return [replace(e) for e in picked[:limit]]

    def journal_domains(self) -> list[str]:
        with self._lock:
            return sorted(set(self._journal) | set(self._local_anchors))

    def applied_domains(self) -> dict[str, int]:
        with self._lock:
            return dict(self._applied_anchors)

    # -- queries ----------------------------------------------------------------------

    def get(self, uuid: bytes) -> HealthSample | None:
        with self._lock:
            return self._samples.get(uuid)

    def tombstone(self, uuid: bytes) -> Tombstone | None:
        with self._lock:
            return self._tombstones.get(uuid)

    def live_samples(self) -> list[HealthSample]:
        with self._lock:
            return sorted(self._samples.values(),
                          key=lambda s: (s.start_time, s.uuid))

    def query(self, sample_type: int | None = None,
              start: float | None = None, end: float | None = None,
              include_tombstones: bool = False) -> list[dict]:
        """Rows ordered by (start_time, uuid); tombstones opt-in, nulled."""
        with self._lock:
            rows = []
            for sample in self._samples.values():
                if sample_type is not None and sample.sample_type != sample_type:
                    continue
                if start is not None and sample.start_time < start:
                    continue
                if end is not None and sample.start_time > end:
                    continue
                rows.append({
                    "uuid": sample.uuid.hex(),
                    "sample_type": sample.sample_type,
                    "type_name": sample.type_name,
                    "value": sample.value,
                    "unit": sample.unit,
                    "start_time": sample.start_time,
                    "end_time": sample.end_time,
                    "source": sample.source,
                    "provenance": sample.provenance,
                    "deleted": False,
                    "deletion_time": None,
                })
            rows.sort(key=lambda r: (r["start_time"], r["uuid"]))
            if include_tombstones:
                ghosts = []
                for stone in self._tombstones.values():
                    if (sample_type is not None
                            and stone.sample_type != sample_type):
                        continue
                    ghosts.append({
                        "uuid": stone.uuid.hex(),
                        "sample_type": stone.sample_type,
                        "type_name": sample_type_name(stone.sample_type),
                        "value": None,
                        "unit": None,
                        "start_time": None,
                        "end_time": None,
                        "source": None,
                        "provenance": None,
                        "deleted": True,
                        "deletion_time": stone.deletion_time,
                    })
                ghosts.sort(key=lambda r: r["uuid"])
                rows.extend(ghosts)
            return rows

    # -- persistence --------------------------------------------------------------------

    def _state(self) -> dict:
        def sample_fields(sample: HealthSample) -> dict:
            return {
                "uuid": sample.uuid.hex(), "sample_type": sample.sample_type,
                "value": sample.value, "unit": sample.unit,
                "start_time": sample.start_time, "end_time": sample.end_time,
                "source": sample.source, "provenance": sample.provenance,
            }

        return {
            "samples": [sample_fields(s) for s in self._samples.values()],
            "tombstones": [
                {"uuid": t.uuid.hex(), "sample_type": t.sample_type,
                 "deletion_time": t.deletion_time}
                for t in self._tombstones.values()],
            "journal": {
                domain: [
                    {"anchor": e.anchor, "op": e.op,
                     "uuid": e.uuid.hex() if e.uuid else None,
                     "sample": sample_fields(e.sample) if e.sample else None,
                     "scrub_after_ack": e.scrub_after_ack}
                    for e in entries]
                for domain, entries in self._journal.items()},
            "local_anchors": self._local_anchors,
            "applied_anchors": self._applied_anchors,
            "peer_acked": self._peer_acked,
        }

    def save(self, path: str, provider, rng: RandomSource | None = None) -> None:
        if provider is None:
            raise StoreLocked("no key provider to seal the store")
        rng = rng or RandomSource()
        with self._lock:
            body = json.dumps(self._state()).encode("utf-8")
        salt = rng.bytes(16)
        nonce = rng.bytes(12)
        header = MAGIC + bytes([FORMAT_VERSION])
        sealed = AESGCM(provider.derive(salt)).encrypt(nonce, body, header)
        with open(path, "wb") as handle:
            handle.write(header + salt + nonce + sealed)

    @classmethod
    def load(cls, path: str, provider, clock=None) -> "HealthStore":
        try:
            with open(path, "rb") as handle:
                blob = handle.read()
        except OSError as exc:
            raise BadStoreFile(str(exc)) from None
        if len(blob) < 4 + 1 + 16 + 12 + 16 or blob[:4] != MAGIC:
            raise BadStoreFile("not a sealed store file")
        if blob[4] != FORMAT_VERSION:
            raise BadStoreFile("unsupported store version %d" % blob[4])
        if provider is None:
            raise StoreLocked("store is sealed and no key provider is set")
        header, salt, nonce = blob[:5], blob[5:21], blob[21:33]
        try:
            body = AESGCM(provider.derive(salt)).decrypt(nonce, blob[33:], header)
        except InvalidTag:
            raise StoreLocked("key does not open this store") from None
        try:
            state = json.loads(body)
        except ValueError as exc:
            raise BadStoreFile(str(exc)) from None
        store = cls(clock=clock)
        store._restore(state)
        return store

    def _restore(self, state: dict) -> None:
        def to_sample(fields: dict) -> HealthSample:
            return HealthSample(
                bytes.fromhex(fields["uuid"]), fields["sample_type"],
                fields["value"], fields["unit"], fields["start_time"],
                fields["end_time"], fields["source"], fields["provenance"])

        try:
            for fields in state["samples"]:
                sample = to_sample(fields)
                self._samples[sample.uuid] = sample
            for fields in state["tombstones"]:
                stone = Tombstone(bytes.fromhex(fields["uuid"]),
                                  fields["sample_type"], fields["deletion_time"])
                self._tombstones[stone.uuid] = stone
            for domain, entries in state["journal"].items():
                self._journal[domain] = [
                    _JournalEntry(e["anchor"], e["op"],
                                  bytes.fromhex(e["uuid"]) if e["uuid"] else None,
                                  to_sample(e["sample"]) if e["sample"] else None,
                                  e["scrub_after_ack"])
                    for e in entries]
            self._local_anchors.update(state["local_anchors"])
            self._applied_anchors.update(state["applied_anchors"])
            self._peer_acked.update(state["peer_acked"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BadStoreFile("store body malformed: %s" % exc) from None

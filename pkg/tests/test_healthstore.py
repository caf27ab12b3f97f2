"""Health store: tombstone semantics, hardened delete, sealed file."""

import json

import pytest

from witchstack.healthstore import (
    SAMPLE_TYPE_ACTIVE_ENERGY,
    SAMPLE_TYPE_HEART_RATE,
    BadStoreFile,
    HealthSample,
    HealthStore,
    PassphraseKeyProvider,
    StoreLocked,
    Tombstone,
    UnknownUuid,
)
from witchstack.rng import RandomSource


def make_sample(rng, sample_type=SAMPLE_TYPE_HEART_RATE, value=72.0, start=100.0):
    return HealthSample(rng.bytes(16), sample_type, value,
                        "count/min" if sample_type == SAMPLE_TYPE_HEART_RATE
                        else "kcal",
                        start, start + 60.0, "watch-app", "sensor")


def test_sample_validation():
    rng = RandomSource(1)
    with pytest.raises(Exception):
        HealthSample(b"short", 5, 1.0, "u", 0.0, 1.0)
    with pytest.raises(Exception):
        HealthSample(rng.bytes(16), 5, 1.0, "u", 10.0, 5.0)
    assert make_sample(rng).type_name == "heart-rate"


def test_insert_and_query_order():
    rng = RandomSource(2)
    store = HealthStore(clock=lambda: 1000.0)
    samples = [make_sample(rng, start=float(start)) for start in (30, 10, 20)]
    for sample in samples:
        store.insert(sample)
    rows = store.query()
    assert [r["start_time"] for r in rows] == [10.0, 20.0, 30.0]
    assert store.local_anchor() == 3
    heart = store.query(sample_type=SAMPLE_TYPE_HEART_RATE)
    assert len(heart) == 3
    assert store.query(sample_type=SAMPLE_TYPE_ACTIVE_ENERGY) == []


def test_query_filters():
    rng = RandomSource(3)
    store = HealthStore()
    for start in range(5):
        store.insert(make_sample(rng, start=float(start * 100)))
    store.insert(make_sample(rng, sample_type=SAMPLE_TYPE_ACTIVE_ENERGY,
                             value=12.5, start=50.0))
    assert len(store.query(sample_type=SAMPLE_TYPE_ACTIVE_ENERGY)) == 1
    window = store.query(start=100.0, end=300.0)
    assert [r["start_time"] for r in window] == [100.0, 200.0, 300.0]


def test_upsert_by_uuid():
    rng = RandomSource(4)
    store = HealthStore()
    sample = make_sample(rng)
    store.insert(sample)
    updated = HealthSample(sample.uuid, sample.sample_type, 99.0,
                           sample.unit, sample.start_time, sample.end_time)
    store.insert(updated)
    rows = store.query()
    assert len(rows) == 1 and rows[0]["value"] == 99.0
    assert store.local_anchor() == 2    # every change bumps the anchor


def test_tombstone_retains_exactly_type_and_time():
    rng = RandomSource(5)
    clock = [5000.0]
    store = HealthStore(clock=lambda: clock[0])
    sample = make_sample(rng, value=123.456)
    store.insert(sample)
    clock[0] = 6000.0
    store.delete(sample.uuid)
    assert store.get(sample.uuid) is None
    stone = store.tombstone(sample.uuid)
    assert stone == Tombstone(sample.uuid, SAMPLE_TYPE_HEART_RATE, 6000.0)
    rows = store.query(include_tombstones=True)
    assert len(rows) == 1
    row = rows[0]
    assert row["deleted"] is True
    assert row["sample_type"] == SAMPLE_TYPE_HEART_RATE
    assert row["deletion_time"] == 6000.0
    for nulled in ("value", "unit", "start_time", "end_time",
                   "source", "provenance"):
        assert row[nulled] is None
    assert store.query() == []          # hidden unless asked for


def test_delete_unknown_uuid():
    store = HealthStore()
    with pytest.raises(UnknownUuid):
        store.delete(bytes(16))
    # remote deletes of unknown uuids are silent no-ops
    store.apply_remote_delete(bytes(16))
    assert store.query(include_tombstones=True) == []


def test_delete_idempotent_on_tombstone():
    rng = RandomSource(6)
    store = HealthStore()
    sample = make_sample(rng)
    store.insert(sample)
    anchor = store.delete(sample.uuid)
    assert store.delete(sample.uuid) == anchor    # no new journal entry
    assert store.local_anchor() == anchor


def test_hardened_delete_purges_everything():
    rng = RandomSource(7)
    store = HealthStore()
    sample = make_sample(rng)
    store.insert(sample)
    store.delete(sample.uuid)
    assert store.tombstone(sample.uuid) is not None
    store.hardened_delete(sample.uuid)
    assert store.tombstone(sample.uuid) is None
    assert store.query(include_tombstones=True) == []
    # journal keeps anchors but no content for the purged uuid
    entries = store.journal_since("Quantity Sample", 0, 100)
    assert [e.anchor for e in entries] == [1, 2]
    inserts = [e for e in entries if e.op == "insert"]
    assert inserts == []
    assert entries[0].op == "husk" and entries[0].sample is None


def test_hardened_delete_of_live_sample_propagates_first():
    rng = RandomSource(8)
    store = HealthStore()
    sample = make_sample(rng)
    store.insert(sample)
    anchor = store.hardened_delete(sample.uuid)
    assert anchor == 2
    entries = store.journal_since("Quantity Sample", 0, 100)
    # the delete entry survives until the peer acknowledges it
    assert entries[0].op == "husk"
    assert entries[1].op == "delete" and entries[1].uuid == sample.uuid
    store.record_peer_ack("Quantity Sample", 2)
    entries = store.journal_since("Quantity Sample", 0, 100)
    assert [e.op for e in entries] == ["husk", "husk"]
    assert all(e.uuid is None for e in entries)


def test_hardened_delete_unknown():
    store = HealthStore()
    with pytest.raises(UnknownUuid):
        store.hardened_delete(bytes(16))


def test_save_load_round_trip(tmp_path):
    rng = RandomSource(9)
    store = HealthStore()
    kept = make_sample(rng)
    gone = make_sample(rng)
    store.insert(kept)
    store.insert(gone)
    store.delete(gone.uuid)
    store.set_applied_anchor("Quantity Sample", 4)
    provider = PassphraseKeyProvider("open sesame")
    path = str(tmp_path / "store.wwhs")
    store.save(path, provider, rng)
    loaded = HealthStore.load(path, provider)
    assert loaded.get(kept.uuid) == kept
    assert loaded.tombstone(gone.uuid).sample_type == kept.sample_type
    assert loaded.local_anchor() == 3
    assert loaded.applied_anchor() == 4
    assert [e.op for e in loaded.journal_since("Quantity Sample", 0, 10)] == [
        "insert", "insert", "delete"]


def test_at_rest_opacity(tmp_path):
    rng = RandomSource(10)
    store = HealthStore()
    store.insert(HealthSample(rng.bytes(16), SAMPLE_TYPE_HEART_RATE, 101.5,
                              "count/min", 1.0, 2.0,
                              "very-identifiable-source", "prov-string"))
    path = str(tmp_path / "opaque.wwhs")
    store.save(path, PassphraseKeyProvider("hunter2"), rng)
    blob = open(path, "rb").read()
    assert blob[:4] == b"WWHS" and blob[4] == 1
    for secret in (b"very-identifiable-source", b"prov-string",
                   b"count/min", b"101.5", b"heart"):
        assert secret not in blob
    # and it is not sneaking through as plain JSON anywhere
    assert b'{"samples"' not in blob and b'"uuid"' not in blob


def test_locked_and_wrong_key(tmp_path):
    rng = RandomSource(11)
    store = HealthStore()
    store.insert(make_sample(rng))
    path = str(tmp_path / "locked.wwhs")
    store.save(path, PassphraseKeyProvider("right"), rng)
    with pytest.raises(StoreLocked):
        HealthStore.load(path, None)
    with pytest.raises(StoreLocked):
        HealthStore.load(path, PassphraseKeyProvider("wrong"))
    with pytest.raises(StoreLocked):
        store.save(path, None)


def test_bad_store_file(tmp_path):
    path = str(tmp_path / "junk.wwhs")
    open(path, "wb").write(b"not a store at all, far too short? no: " + bytes(64))
    with pytest.raises(BadStoreFile):
        HealthStore.load(path, PassphraseKeyProvider("x"))
    open(path, "wb").write(b"WWHS\x09" + bytes(64))
    with pytest.raises(BadStoreFile):
        HealthStore.load(path, PassphraseKeyProvider("x"))
    with pytest.raises(BadStoreFile):
        HealthStore.load(str(tmp_path / "missing.wwhs"),
                         PassphraseKeyProvider("x"))


def test_tamper_detected_by_seal(tmp_path):
    rng = RandomSource(12)
    store = HealthStore()
    store.insert(make_sample(rng))
    path = str(tmp_path / "sealed.wwhs")
    provider = PassphraseKeyProvider("secret")
    store.save(path, provider, rng)
    blob = bytearray(open(path, "rb").read())
    blob[40] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(StoreLocked):
        HealthStore.load(path, provider)


def test_journal_batching_and_peer_ack():
    rng = RandomSource(13)
    store = HealthStore()
    for _ in range(7):
        store.insert(make_sample(rng))
    first = store.journal_since("Quantity Sample", 0, 3)
    assert [e.anchor for e in first] == [1, 2, 3]
    rest = store.journal_since("Quantity Sample", 3, 100)
    assert [e.anchor for e in rest] == [4, 5, 6, 7]
    store.record_peer_ack("Quantity Sample", 5)
    # acks only move forward
    store.record_peer_ack("Quantity Sample", 2)
    assert store._peer_acked["Quantity Sample"] == 5

import dataclasses
import random
import threading

from mcpgate.audit import (
    GENESIS_HASH,
    AuditLog,
    AuditRecord,
    EventKind,
    FileAuditStore,
    MemoryAuditStore,
    record_hash,
    verify_chain,
)

KINDS = list(EventKind)


def build_log(n: int, rng: random.Random | None = None, store=None) -> AuditLog:
    rng = rng or random.Random(0)
    log = AuditLog(store if store is not None else MemoryAuditStore())
    for i in range(n):
        log.append(
            rng.choice(KINDS),
            principal=rng.choice(["alice", "bob", "gateway"]),
            payload={"n": i, "trace_id": f"t{i}"},
            ts=float(i),
        )
    return log


class TestChain:
    def test_genesis(self):
        log = build_log(1)
        record = log.records()[0]
        assert record.seq == 0
        assert record.prev_hash == GENESIS_HASH == b"\x00" * 32

    def test_linkage(self):
        log = build_log(2)
        first, second = log.records()
        assert second.prev_hash == first.this_hash

    def test_identical_payloads_different_hashes(self):
        log = AuditLog()
        a = log.append(EventKind.TOOL_INVOKED, "alice", {"x": 1}, ts=1.0)
        b = log.append(EventKind.TOOL_INVOKED, "alice", {"x": 1}, ts=1.0)
        assert a.payload == b.payload and a.this_hash != b.this_hash

    def test_untouched_log_verifies(self):
        log = build_log(100)
        assert log.verify().ok

    def test_mutated_record_detected(self):
        log = build_log(100)
        store = log.store
        target = store._records[37]
        store._records[37] = dataclasses.replace(
            target, payload={**target.payload, "n": 999}
        )
        result = verify_chain(store)
        assert not result.ok and result.broken_at == 37

    def test_truncation_detected_via_head(self):
        log = build_log(100)
        store = log.store
        del store._records[97:]
        result = verify_chain(store)
        assert not result.ok and result.broken_at == 97

    def test_record_hash_is_length_prefixed(self):
        # Moving a byte across a field boundary must change the hash.
        a = record_hash(1, 0.0, "ab", "c", b"\x00" * 32, GENESIS_HASH)
        b = record_hash(1, 0.0, "a", "bc", b"\x00" * 32, GENESIS_HASH)
        assert a != b


FIELDS = ("seq", "ts", "kind", "principal", "payload", "prev_hash", "this_hash")


def mutate(record: AuditRecord, field: str, rng: random.Random) -> AuditRecord:
    if field == "seq":
        return dataclasses.replace(record, seq=record.seq + rng.randint(1, 5))
    if field == "ts":
        return dataclasses.replace(record, ts=record.ts + rng.uniform(0.5, 9.0))
    if field == "kind":
        other = rng.choice([k for k in KINDS if k is not record.kind])
        return dataclasses.replace(record, kind=other)
    if field == "principal":
        return dataclasses.replace(record, principal=record.principal + "x")
    if field == "payload":
        return dataclasses.replace(record, payload={**record.payload, "evil": True})
    if field == "prev_hash":
        return dataclasses.replace(record, prev_hash=and_flip(record.prev_hash, rng))
    if field == "this_hash":
        return dataclasses.replace(record, this_hash=and_flip(record.this_hash, rng))
    raise AssertionError(field)


def and_flip(digest: bytes, rng: random.Random) -> bytes:
    i = rng.randrange(len(digest))
    flipped = bytearray(digest)
    flipped[i] ^= 0xFF
    return bytes(flipped)


class TestMutationProperty:
    def test_any_single_field_mutation_detected(self):
        rng = random.Random(77)
        for trial in range(200):
            n = rng.randint(1, 40)
            log = build_log(n, rng)
            store = log.store
            idx = rng.randrange(n)
            field = rng.choice(FIELDS)
            store._records[idx] = mutate(store._records[idx], field, rng)
            result = verify_chain(store)
            assert not result.ok, f"trial {trial}: {field} mutation missed"
            assert result.broken_at is not None and result.broken_at <= idx


class TestQuery:
    def test_kind_filter(self):
        log = AuditLog()
        log.append(EventKind.AUTHZ_DENY, "alice", ts=1.0)
        log.append(EventKind.AUTHZ_ALLOW, "alice", ts=2.0)
        log.append(EventKind.AUTHZ_DENY, "bob", ts=3.0)
        denies = log.query(kind=EventKind.AUTHZ_DENY)
        assert [r.principal for r in denies] == ["alice", "bob"]

    def test_empty_range(self):
        log = build_log(10)
        assert log.query(start=100.0, end=200.0) == []

    def test_principal_filter_in_seq_order(self):
        log = build_log(50, random.Random(4))
        records = log.query(principal="alice")
        assert all(r.principal == "alice" for r in records)
        assert [r.seq for r in records] == sorted(r.seq for r in records)


class TestFileStore:
    def test_durable_round_trip(self, tmp_path):
        store = FileAuditStore(tmp_path / "audit.jsonl")
        log = build_log(25, store=store)
        assert log.verify().ok
        reopened = FileAuditStore(tmp_path / "audit.jsonl")
        assert verify_chain(reopened).ok
        assert len(reopened.records()) == 25
        head = reopened.head()
        assert head.last_seq == 24

    def test_append_visible_after_return(self, tmp_path):
        store = FileAuditStore(tmp_path / "audit.jsonl")
        log = AuditLog(store)
        record = log.append(EventKind.CONFIG_CHANGE, "gateway", {"k": 1}, ts=0.0)
        assert any(r.this_hash == record.this_hash for r in store.records())
        assert log.query(kind=EventKind.CONFIG_CHANGE)

    def test_tamper_on_disk_detected(self, tmp_path):
        path = tmp_path / "audit.jsonl"
        build_log(10, store=FileAuditStore(path))
        lines = path.read_text().splitlines()
        lines[4] = lines[4].replace('"n": 4', '"n": 444').replace('"n":4', '"n":444')
        path.write_text("\n".join(lines) + "\n")
        result = verify_chain(FileAuditStore(path))
        assert not result.ok and result.broken_at == 4

    def test_truncation_on_disk_detected(self, tmp_path):
        path = tmp_path / "audit.jsonl"
        build_log(10, store=FileAuditStore(path))
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:7]) + "\n")
        result = verify_chain(FileAuditStore(path))
        assert not result.ok and result.broken_at == 7


class TestConcurrency:
    def test_serialized_appends_keep_chain_intact(self):
        log = AuditLog()
        errors = []

        def writer(worker: int):
            try:
                for i in range(200):
                    log.append(EventKind.TOOL_INVOKED, f"w{worker}", {"i": i}, ts=float(i))
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=writer, args=(w,)) for w in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert len(log.records()) == 1600
        assert log.verify().ok

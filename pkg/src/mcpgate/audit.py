"""Append-only, hash-chained audit log with chain verification.

Each record's hash covers an unambiguous length-prefixed encoding of
(seq, ts, kind, principal, payload_digest, prev_hash); record 0 chains from
a fixed all-zero genesis hash. One serialized writer appends; readers see a
prefix-consistent view. The file store keeps one JSON record per line plus a
separate head file replaced atomically, so truncation is detectable.
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None

from .canonical import digest_of, sha256

GENESIS_HASH = b"\x00" * 32


class EventKind(Enum):
    AUTHN_SUCCESS = "AuthnSuccess"
    AUTHN_FAILURE = "AuthnFailure"
    AUTHZ_ALLOW = "AuthzAllow"
    AUTHZ_DENY = "AuthzDeny"
    TOOL_REGISTERED = "ToolRegistered"
    TOOL_APPROVED = "ToolApproved"
    TOOL_QUARANTINED = "ToolQuarantined"
    TOOL_INVOKED = "ToolInvoked"
    RESPONSE_FILTERED = "ResponseFiltered"
    RATE_THROTTLED = "RateThrottled"
    DETECTION_FINDING = "DetectionFinding"
    ANOMALY_ALERT = "AnomalyAlert"
    CONFIG_CHANGE = "ConfigChange"
    REVOCATION = "Revocation"
    # Per-stage pipeline outcomes (parse/validate/normalize/...): needed so
    # every stage of a request is audited, not only the allow/deny verdicts.
    PIPELINE_STAGE = "PipelineStage"


class AuditError(Exception):
    pass


class StoreFailure(AuditError):
    pass


def _lp(data: bytes) -> bytes:
    return struct.pack(">Q", len(data)) + data


def record_hash(
    seq: int,
    ts: float,
    kind: str,
    principal: str,
    payload_digest: bytes,
    prev_hash: bytes,
) -> bytes:
    """SHA-256 over the length-prefixed field concatenation. The prefixes
    make the encoding injective, so no two field tuples share a preimage."""
    preimage = (
        _lp(struct.pack(">Q", seq))
        + _lp(struct.pack(">d", ts))
        + _lp(kind.encode("utf-8"))
        + _lp(principal.encode("utf-8"))
        + _lp(payload_digest)
        + _lp(prev_hash)
    )
    return sha256(preimage)


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    ts: float
    kind: EventKind
    principal: str
    payload: Mapping[str, Any]
    payload_digest: bytes
    prev_hash: bytes
    this_hash: bytes

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "ts": self.ts,
            "kind": self.kind.value,
            "principal": self.principal,
            "payload": dict(self.payload),
            "payload_digest": self.payload_digest.hex(),
            "prev_hash": self.prev_hash.hex(),
            "this_hash": self.this_hash.hex(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AuditRecord":
        return cls(
            seq=int(data["seq"]),
            ts=float(data["ts"]),
            kind=EventKind(data["kind"]),
            principal=data["principal"],
            payload=dict(data.get("payload") or {}),
            payload_digest=bytes.fromhex(data["payload_digest"]),
            prev_hash=bytes.fromhex(data["prev_hash"]),
            this_hash=bytes.fromhex(data["this_hash"]),
        )


@dataclass(frozen=True)
class ChainHead:
    last_seq: int
    last_hash: bytes


@dataclass(frozen=True)
class VerifyResult:
    ok: bool
    broken_at: int | None = None

    def __bool__(self) -> bool:
        return self.ok


# ---------------------------------------------------------------------------
# Stores
# ---------------------------------------------------------------------------


class MemoryAuditStore:
    def __init__(self):
        self._records: list[AuditRecord] = []
        self._head: ChainHead | None = None

    def append(self, record: AuditRecord) -> None:
        self._records.append(record)
        self._head = ChainHead(record.seq, record.this_hash)

    def records(self) -> list[AuditRecord]:
        return list(self._records)

    def head(self) -> ChainHead | None:
        return self._head

    def tail(self) -> tuple[int, bytes]:
        """(next seq, prev hash) for the upcoming append."""
        if self._head is None:
            return 0, GENESIS_HASH
        return self._head.last_seq + 1, self._head.last_hash

    @contextlib.contextmanager
    def exclusive(self):
        yield  # in-process serialization is the AuditLog lock's job


class FileAuditStore:
    """One JSON record per line, append-only; the head lives in a sibling
    file rewritten via atomic rename on every append."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.head_path = self.path.with_suffix(self.path.suffix + ".head")
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: AuditRecord) -> None:
        try:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            tmp = self.head_path.with_suffix(".tmp")
            tmp.write_text(
                json.dumps({"last_seq": record.seq, "last_hash": record.this_hash.hex()}) + "\n"
            )
            os.replace(tmp, self.head_path)
        except OSError as exc:
            raise StoreFailure(str(exc)) from None

    def records(self) -> list[AuditRecord]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(AuditRecord.from_dict(json.loads(line)))
        return out

    def head(self) -> ChainHead | None:
        if not self.head_path.exists():
            return None
        data = json.loads(self.head_path.read_text())
        return ChainHead(int(data["last_seq"]), bytes.fromhex(data["last_hash"]))

    def tail(self) -> tuple[int, bytes]:
        head = self.head()
        if head is None:
            return 0, GENESIS_HASH
        return head.last_seq + 1, head.last_hash

    @contextlib.contextmanager
    def exclusive(self):
        """Cross-process append serialization: several writers (a running
        gateway plus admin CLI invocations) may share one store, so the chain
        tail must be read and extended under an OS-level lock."""
        if fcntl is None:  # pragma: no cover - non-POSIX
            yield
            return
        lock_path = self.path.with_suffix(self.path.suffix + ".lock")
        with lock_path.open("w") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)


# ---------------------------------------------------------------------------
# Log
# ---------------------------------------------------------------------------


class AuditLog:
    """The single append point for all gateway events. Callers must sanitize
    payloads before logging (the gateway applies its egress rules to any
    logged parameters)."""

    def __init__(self, store=None):
        self.store = store if store is not None else MemoryAuditStore()
        self._lock = threading.Lock()

    def append(
        self,
        kind: EventKind,
        principal: str,
        payload: Mapping[str, Any] | None = None,
        ts: float = 0.0,
    ) -> AuditRecord:
        payload = dict(payload or {})
        with self._lock, self.store.exclusive():
            # The tail is re-read under the lock so concurrent appenders
            # (including other processes on a shared file store) chain
            # correctly instead of forking the log.
            seq, prev_hash = self.store.tail()
            payload_digest = digest_of(payload)
            this_hash = record_hash(seq, ts, kind.value, principal, payload_digest, prev_hash)
            record = AuditRecord(
                seq=seq,
                ts=ts,
                kind=kind,
                principal=principal,
                payload=payload,
                payload_digest=payload_digest,
                prev_hash=prev_hash,
                this_hash=this_hash,
            )
            self.store.append(record)  # durable before the append returns
            return record

    def verify(self) -> VerifyResult:
        return verify_chain(self.store)

    def query(
        self,
        kind: EventKind | None = None,
        principal: str | None = None,
        start: float | None = None,
        end: float | None = None,
    ) -> list[AuditRecord]:
        """Read-only filtered scan, returned in seq order."""
        out = []
        for record in self.store.records():
            if kind is not None and record.kind is not kind:
                continue
            if principal is not None and record.principal != principal:
                continue
            if start is not None and record.ts < start:
                continue
            if end is not None and record.ts > end:
                continue
            out.append(record)
        return out

    def records(self) -> list[AuditRecord]:
        return self.store.records()


def verify_chain(store) -> VerifyResult:
    """Recompute every hash and linkage; report the first broken index.
    A head that does not match the final record flags truncation."""
    prev = GENESIS_HASH
    records = store.records()
    for i, record in enumerate(records):
        if record.seq != i:
            return VerifyResult(False, i)
        if record.prev_hash != prev:
            return VerifyResult(False, i)
        if digest_of(dict(record.payload)) != record.payload_digest:
            return VerifyResult(False, i)
        expected = record_hash(
            record.seq, record.ts, record.kind.value, record.principal,
            record.payload_digest, record.prev_hash,
        )
        if expected != record.this_hash:
            return VerifyResult(False, i)
        prev = record.this_hash
    head = store.head()
    if head is not None:
        if not records:
            return VerifyResult(False, 0)
        last = records[-1]
        if head.last_seq != last.seq or head.last_hash != last.this_hash:
            return VerifyResult(False, last.seq + 1)
    return VerifyResult(True)

"""Signed tool registry: manifest canonicalization, Ed25519 signing and
verification against trust roots, lifecycle state (vetting through
quarantine), and a tamper-evident chained root over all entries.

Persistence is an append-only JSONL event file; superseding versions are
appended, never rewritten in place.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

from .access import InvalidScope, parse_scope
from .canonical import canonical_json_bytes, digest_of, sha256
from .signing import SigningKey, verify_signature

TOOL_ID_RE = re.compile(r"^[a-z0-9_\-\.]{1,128}$")

DEFAULT_RECERT_PERIOD = 90 * 86400.0  # seconds

GENESIS_ROOT = sha256(b"")


class RegistryError(Exception):
    pass


class InvalidManifest(RegistryError):
    pass


class UnknownSigner(RegistryError):
    pass


class SignatureInvalid(RegistryError):
    pass


class UntrustedSigner(RegistryError):
    pass


class DigestMismatch(RegistryError):
    pass


class NotSubmitted(RegistryError):
    pass


class VerificationFailed(RegistryError):
    pass


class MissingReview(RegistryError):
    pass


class UnknownTool(RegistryError):
    pass


class InvalidTransition(RegistryError):
    pass


# ---------------------------------------------------------------------------
# Manifests and signatures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToolManifest:
    """A tool's registered description: purpose, argument schema, requested
    scopes, and declared functional category."""

    tool_id: str
    server_id: str
    description: str
    parameters: Mapping[str, Mapping[str, Any]]
    requested_scopes: tuple[str, ...]
    category: str
    version: int = 1

    def __post_init__(self):
        if not TOOL_ID_RE.match(self.tool_id):
            raise InvalidManifest(f"tool_id {self.tool_id!r} violates the id grammar")
        if not self.requested_scopes:
            raise InvalidManifest("requested_scopes must be non-empty")
        for scope in self.requested_scopes:
            try:
                parse_scope(scope)
            except InvalidScope as exc:
                raise InvalidManifest(str(exc)) from None
        if self.version < 1:
            raise InvalidManifest("version must be a positive integer")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool_id": self.tool_id,
            "server_id": self.server_id,
            "description": self.description,
            "parameters": {k: dict(v) for k, v in self.parameters.items()},
            "requested_scopes": list(self.requested_scopes),
            "category": self.category,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ToolManifest":
        return cls(
            tool_id=data["tool_id"],
            server_id=data["server_id"],
            description=data["description"],
            parameters=dict(data.get("parameters") or {}),
            requested_scopes=tuple(data["requested_scopes"]),
            category=data["category"],
            version=int(data.get("version", 1)),
        )


def canonical_bytes(manifest: ToolManifest) -> bytes:
    """Deterministic wire form signed and hashed: sorted keys, compact,
    NFC-normalized strings. Equal manifests always give equal bytes."""
    return canonical_json_bytes(manifest.to_dict())


@dataclass(frozen=True)
class SignedManifest:
    manifest: ToolManifest
    signer_id: str
    signature: bytes
    digest: bytes  # sha256 of the canonical bytes

    def to_dict(self) -> dict[str, Any]:
        return {
            "manifest": self.manifest.to_dict(),
            "signer_id": self.signer_id,
            "signature": self.signature.hex(),
            "digest": self.digest.hex(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SignedManifest":
        return cls(
            manifest=ToolManifest.from_dict(data["manifest"]),
            signer_id=data["signer_id"],
            signature=bytes.fromhex(data["signature"]),
            digest=bytes.fromhex(data["digest"]),
        )


class TrustRoots:
    """Signer identities the registry accepts, with their public keys."""

    def __init__(self, keys: Mapping[str, bytes] | None = None):
        self._keys: dict[str, bytes] = dict(keys or {})

    def add(self, signer_id: str, public: bytes) -> None:
        self._keys[signer_id] = public

    def remove(self, signer_id: str) -> None:
        self._keys.pop(signer_id, None)

    def public_key(self, signer_id: str) -> bytes | None:
        return self._keys.get(signer_id)

    def __contains__(self, signer_id: str) -> bool:
        return signer_id in self._keys

    def signers(self) -> tuple[str, ...]:
        return tuple(self._keys)


def sign_manifest(manifest: ToolManifest, key: SigningKey, trust_roots: TrustRoots) -> SignedManifest:
    """Sign canonical manifest bytes. The key must belong to a configured
    trust root (signing authority), otherwise UnknownSigner."""
    if key.key_id not in trust_roots:
        raise UnknownSigner(f"signer {key.key_id!r} is not a configured trust root")
    data = canonical_bytes(manifest)
    return SignedManifest(
        manifest=manifest,
        signer_id=key.key_id,
        signature=key.sign(data),
        digest=sha256(data),
    )


def verify_manifest(
    signed: SignedManifest,
    trust_roots: TrustRoots,
    canonical: bytes | None = None,
) -> None:
    """Raise unless the signature verifies, the signer is trusted, and the
    digest matches the canonical bytes. ``canonical`` overrides the recomputed
    byte form (used by integrity checks over stored wire bytes)."""
    public = trust_roots.public_key(signed.signer_id)
    if public is None:
        raise UntrustedSigner(f"signer {signed.signer_id!r} is not in the trust roots")
    data = canonical if canonical is not None else canonical_bytes(signed.manifest)
    if sha256(data) != signed.digest:
        raise DigestMismatch("canonical bytes do not match the recorded digest")
    if not verify_signature(public, signed.signature, data):
        raise SignatureInvalid("signature does not verify over the canonical bytes")


# ---------------------------------------------------------------------------
# Lifecycle
# ---------------------------------------------------------------------------


class LifecycleState(Enum):
    SUBMITTED = "Submitted"
    APPROVED = "Approved"
    RECERTIFICATION_DUE = "RecertificationDue"
    QUARANTINED = "Quarantined"
    RETIRED = "Retired"


_ALLOWED_TRANSITIONS = {
    (LifecycleState.SUBMITTED, LifecycleState.APPROVED),
    (LifecycleState.APPROVED, LifecycleState.RECERTIFICATION_DUE),
}


def _transition_allowed(src: LifecycleState, dst: LifecycleState) -> bool:
    if dst in (LifecycleState.QUARANTINED, LifecycleState.RETIRED):
        return True
    return (src, dst) in _ALLOWED_TRANSITIONS


@dataclass(frozen=True)
class ReviewRecord:
    reviewer: str
    findings_digest: str  # hex digest of the attached detection scan
    risk_score: float = 0.0
    notes: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "reviewer": self.reviewer,
            "findings_digest": self.findings_digest,
            "risk_score": self.risk_score,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReviewRecord":
        return cls(
            reviewer=data["reviewer"],
            findings_digest=data["findings_digest"],
            risk_score=float(data.get("risk_score", 0.0)),
            notes=data.get("notes", ""),
        )


def qualified_id(manifest: ToolManifest) -> str:
    """Server-qualified tool name. Registry entries are keyed by this so two
    servers may expose same-named tools without collision or spoofing."""
    return f"{manifest.server_id}:{manifest.tool_id}"


@dataclass
class RegistryEntry:
    signed: SignedManifest
    state: LifecycleState = LifecycleState.SUBMITTED
    submitted_at: float = 0.0
    approved_at: float | None = None
    recert_deadline: float | None = None
    review: ReviewRecord | None = None
    state_reason: str = ""

    @property
    def tool_id(self) -> str:
        return self.signed.manifest.tool_id

    @property
    def key(self) -> str:
        return qualified_id(self.signed.manifest)

    def entry_digest(self) -> bytes:
        return digest_of(
            {
                "manifest": self.signed.manifest.to_dict(),
                "signer_id": self.signed.signer_id,
                "signature": self.signed.signature.hex(),
                "state": self.state.value,
                "submitted_at": self.submitted_at,
                "approved_at": self.approved_at,
                "recert_deadline": self.recert_deadline,
                "review": self.review.to_dict() if self.review else None,
            }
        )


@dataclass(frozen=True)
class RegistryRoot:
    entries_digest: bytes
    count: int

    @property
    def hex(self) -> str:
        return self.entries_digest.hex()


class ToolRegistry:
    """Registry of tool versions. Reads are concurrent; every transition is
    serialized through one writer lock, and roots are computed on a
    consistent snapshot."""

    def __init__(
        self,
        trust_roots: TrustRoots,
        recert_period: float = DEFAULT_RECERT_PERIOD,
        store: "RegistryStore | None" = None,
    ):
        self.trust_roots = trust_roots
        self.recert_period = recert_period
        self._entries: list[RegistryEntry] = []  # insertion order, append-only
        self._latest: dict[str, int] = {}  # tool_id -> index of current entry
        self._lock = threading.RLock()
        self._store = store
        self._recorded_root: RegistryRoot = RegistryRoot(GENESIS_ROOT, 0)

    # -- queries --------------------------------------------------------

    def _resolve(self, tool_id: str) -> int:
        """Resolve a qualified (server:tool) or unambiguous bare tool id."""
        idx = self._latest.get(tool_id)
        if idx is not None:
            return idx
        if ":" not in tool_id:
            matches = [i for key, i in self._latest.items() if key.split(":", 1)[1] == tool_id]
            if len(matches) == 1:
                return matches[0]
            if len(matches) > 1:
                raise UnknownTool(f"tool id {tool_id!r} is ambiguous; qualify it as server:tool")
        raise UnknownTool(f"tool {tool_id!r} is not registered")

    def get(self, tool_id: str) -> RegistryEntry:
        with self._lock:
            return self._entries[self._resolve(tool_id)]

    def has(self, tool_id: str) -> bool:
        with self._lock:
            try:
                self._resolve(tool_id)
                return True
            except UnknownTool:
                return False

    def entries(self) -> list[RegistryEntry]:
        with self._lock:
            return [self._entries[i] for i in sorted(self._latest.values())]

    def invocable(self, tool_id: str) -> bool:
        """Approved or overdue-for-recertification tools stay invocable;
        overdue invocations are flagged by the gateway in audit."""
        try:
            entry = self.get(tool_id)
        except UnknownTool:
            return False
        return entry.state in (LifecycleState.APPROVED, LifecycleState.RECERTIFICATION_DUE)

    # -- transitions ------------------------------------------------------

    def submit(self, signed: SignedManifest, now: float = 0.0) -> RegistryEntry:
        entry = RegistryEntry(signed=signed, submitted_at=now)
        with self._lock:
            self._entries.append(entry)
            self._latest[entry.key] = len(self._entries) - 1
            self._record("submit", entry, {"signed": signed.to_dict()}, now)
        return entry

    def approve(self, tool_id: str, review: ReviewRecord | None, now: float) -> RegistryEntry:
        with self._lock:
            entry = self.get(tool_id)
            if entry.state is not LifecycleState.SUBMITTED:
                raise NotSubmitted(f"tool {tool_id!r} is {entry.state.value}, not Submitted")
            try:
                verify_manifest(entry.signed, self.trust_roots)
            except RegistryError as exc:
                raise VerificationFailed(str(exc)) from None
            if review is None or not review.findings_digest:
                raise MissingReview("approval requires a review with an attached detection scan")
            entry.state = LifecycleState.APPROVED
            entry.approved_at = now
            entry.recert_deadline = now + self.recert_period
            entry.review = review
            self._record("approve", entry, {"review": review.to_dict()}, now)
            return entry

    def quarantine(self, tool_id: str, reason: str, now: float) -> RegistryEntry:
        with self._lock:
            entry = self.get(tool_id)
            if entry.state is LifecycleState.QUARANTINED:
                return entry  # idempotent
            entry.state = LifecycleState.QUARANTINED
            entry.state_reason = reason
            self._record("quarantine", entry, {"reason": reason}, now)
            return entry

    def retire(self, tool_id: str, now: float) -> RegistryEntry:
        with self._lock:
            entry = self.get(tool_id)
            entry.state = LifecycleState.RETIRED
            self._record("retire", entry, {}, now)
            return entry

    def tick_recertification(self, now: float) -> list[str]:
        """Move every Approved entry whose deadline passed to
        RecertificationDue; returns the affected tool ids."""
        moved: list[str] = []
        with self._lock:
            for idx in sorted(self._latest.values()):
                entry = self._entries[idx]
                if (
                    entry.state is LifecycleState.APPROVED
                    and entry.recert_deadline is not None
                    and entry.recert_deadline < now
                ):
                    entry.state = LifecycleState.RECERTIFICATION_DUE
                    moved.append(entry.key)
                    self._record("recert_due", entry, {}, now)
        return moved

    # -- integrity --------------------------------------------------------

    def root(self) -> RegistryRoot:
        """Chained digest over all appended entries in insertion order. Any
        post-hoc mutation of stored entry content changes the root."""
        with self._lock:
            acc = GENESIS_ROOT
            for entry in self._entries:
                acc = sha256(acc + entry.entry_digest())
            return RegistryRoot(acc, len(self._entries))

    @property
    def recorded_root(self) -> RegistryRoot:
        return self._recorded_root

    def audit_registry(self) -> list[tuple[str, str]]:
        """Full-registry audit: verify every current entry's signature and
        digest. Returns (tool_id, failure) pairs; empty means clean."""
        problems: list[tuple[str, str]] = []
        for entry in self.entries():
            try:
                verify_manifest(entry.signed, self.trust_roots)
            except RegistryError as exc:
                problems.append((entry.key, f"{type(exc).__name__}: {exc}"))
        return problems

    def _record(self, event: str, entry: RegistryEntry, data: dict, now: float) -> None:
        self._recorded_root = self.root()
        if self._store is not None:
            self._store.append(
                {
                    "event": event,
                    "ts": now,
                    "tool_id": entry.key,
                    **data,
                    "root": self._recorded_root.hex,
                }
            )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


class RegistryStore:
    """Append-only JSONL event file. Replaying the events rebuilds the
    registry; each line records the chained root after the event."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: Mapping[str, Any]) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")

    def replay(self) -> Iterable[dict]:
        if not self.path.exists():
            return
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)


def load_registry(
    store: RegistryStore,
    trust_roots: TrustRoots,
    recert_period: float = DEFAULT_RECERT_PERIOD,
) -> ToolRegistry:
    registry = ToolRegistry(trust_roots, recert_period=recert_period)
    for event in store.replay():
        kind = event["event"]
        now = float(event.get("ts", 0.0))
        if kind == "submit":
            registry.submit(SignedManifest.from_dict(event["signed"]), now)
        elif kind == "approve":
            registry.approve(event["tool_id"], ReviewRecord.from_dict(event["review"]), now)
        elif kind == "quarantine":
            registry.quarantine(event["tool_id"], event.get("reason", ""), now)
        elif kind == "retire":
            registry.retire(event["tool_id"], now)
        elif kind == "recert_due":
            entry = registry.get(event["tool_id"])
            entry.state = LifecycleState.RECERTIFICATION_DUE
    registry._store = store  # attach after replay so replay does not re-append
    return registry

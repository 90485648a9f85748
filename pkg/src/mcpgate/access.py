"""Short-lived scoped grants, per-request authorization, and rate limiting.

Grants are self-contained signed records (header.payload.signature, base64url
segments) verified statelessly against the gateway's signing keys, plus a
server-side revocation set. A one-key overlap window survives rotation.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping

from .canonical import canonical_json_bytes
from .signing import SigningKey, verify_signature

SCOPE_RE = re.compile(r"^[a-z0-9_\-\.]+(:([a-z0-9_\-\.]+|\*)){1,2}$")

DEFAULT_GRANT_TTL = 300.0
MAX_GRANT_TTL = 900.0


class AccessError(Exception):
    pass


class EntitlementExceeded(AccessError):
    pass


class UnknownAudience(AccessError):
    pass


class InvalidScope(AccessError):
    pass


def parse_scope(scope: str) -> tuple[str, ...]:
    """Split and validate a scope string. `*` may stand only for a whole
    segment and never the first one."""
    if not isinstance(scope, str) or not SCOPE_RE.match(scope):
        raise InvalidScope(f"scope {scope!r} does not match the scope grammar")
    return tuple(scope.split(":"))


def scope_matches(granted: str, required: str) -> bool:
    """Segment-wise match; a `*` segment in the granted scope matches any
    single segment of the required scope."""
    try:
        g, r = parse_scope(granted), parse_scope(required)
    except InvalidScope:
        return False
    if len(g) != len(r):
        return False
    return all(gs == "*" or gs == rs for gs, rs in zip(g, r))


def any_scope_matches(granted: Iterable[str], required: str) -> bool:
    return any(scope_matches(g, required) for g in granted)


class DenyReason(Enum):
    TOKEN_EXPIRED = "TokenExpired"
    AUDIENCE_MISMATCH = "AudienceMismatch"
    SCOPE_MISSING = "ScopeMissing"
    REVOKED = "Revoked"
    BINDING_MISMATCH = "BindingMismatch"
    SIGNATURE_INVALID = "SignatureInvalid"
    THROTTLED = "Throttled"
    TOOL_QUARANTINED = "ToolQuarantined"
    TOOL_UNKNOWN = "ToolUnknown"


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: DenyReason | None = None

    def __post_init__(self):
        if self.allowed and self.reason is not None:
            raise ValueError("Allow carries no reason")
        if not self.allowed and self.reason is None:
            raise ValueError("Deny requires a reason")

    @classmethod
    def allow(cls) -> "Decision":
        return cls(True)

    @classmethod
    def deny(cls, reason: DenyReason) -> "Decision":
        return cls(False, reason)


@dataclass(frozen=True)
class AccessGrant:
    grant_id: str
    subject: str
    client_id: str
    scopes: tuple[str, ...]
    audience: str
    issued_at: float
    expires_at: float
    binding: str  # hex thumbprint of the session's key material
    key_id: str
    signature: bytes = b""

    def payload(self) -> dict[str, Any]:
        return {
            "grant_id": self.grant_id,
            "subject": self.subject,
            "client_id": self.client_id,
            "scopes": list(self.scopes),
            "audience": self.audience,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
            "binding": self.binding,
        }

    def signing_input(self) -> bytes:
        header = {"alg": "Ed25519", "kid": self.key_id, "typ": "mcpgate-grant"}
        return _b64(canonical_json_bytes(header)) + b"." + _b64(canonical_json_bytes(self.payload()))

    def encode(self) -> str:
        """Wire form: base64url(header).base64url(payload).base64url(sig)."""
        return (self.signing_input() + b"." + _b64(self.signature)).decode("ascii")

    @classmethod
    def decode(cls, token: str) -> "AccessGrant":
        try:
            header_b64, payload_b64, sig_b64 = token.split(".")
            header = json.loads(_unb64(header_b64))
            payload = json.loads(_unb64(payload_b64))
            return cls(
                grant_id=payload["grant_id"],
                subject=payload["subject"],
                client_id=payload["client_id"],
                scopes=tuple(payload["scopes"]),
                audience=payload["audience"],
                issued_at=float(payload["issued_at"]),
                expires_at=float(payload["expires_at"]),
                binding=payload["binding"],
                key_id=header["kid"],
                signature=_unb64(sig_b64),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise AccessError(f"malformed grant token: {exc}") from None


def _b64(data: bytes) -> bytes:
    return base64.urlsafe_b64encode(data).rstrip(b"=")


def _unb64(seg: str | bytes) -> bytes:
    if isinstance(seg, str):
        seg = seg.encode("ascii")
    return base64.urlsafe_b64decode(seg + b"=" * (-len(seg) % 4))


@dataclass(frozen=True)
class GrantPolicy:
    """Entitlements and lifetime limits for grant issuance."""

    entitlements: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    audiences: frozenset[str] = frozenset()
    default_ttl: float = DEFAULT_GRANT_TTL
    max_ttl: float = MAX_GRANT_TTL

    def entitled(self, subject: str, scope: str) -> bool:
        return any_scope_matches(self.entitlements.get(subject, ()), scope)


class GrantAuthority:
    """Issues, verifies, and revokes grants. Signing keys rotate with an
    overlap window of exactly one previous key."""

    def __init__(self, policy: GrantPolicy, signing_key: SigningKey | None = None):
        self.policy = policy
        self._key = signing_key or SigningKey.generate("gw-k0")
        self._previous_key: SigningKey | None = None
        self._key_serial = 0
        self._revoked: set[str] = set()
        self._issued: set[str] = set()
        self._grant_serial = 0
        self._lock = threading.Lock()

    # -- issuance ------------------------------------------------------

    def issue_grant(
        self,
        subject: str,
        client_id: str,
        requested_scopes: Iterable[str],
        audience: str,
        binding: str,
        now: float,
        requested_ttl: float | None = None,
    ) -> AccessGrant:
        scopes = tuple(sorted(set(requested_scopes)))
        for scope in scopes:
            parse_scope(scope)
            if not self.policy.entitled(subject, scope):
                raise EntitlementExceeded(f"{subject!r} is not entitled to {scope!r}")
        if audience not in self.policy.audiences:
            raise UnknownAudience(f"audience {audience!r} is not a registered server")
        ttl = min(
            requested_ttl if requested_ttl is not None else self.policy.default_ttl,
            self.policy.max_ttl,
        )
        with self._lock:
            self._grant_serial += 1
            grant_id = f"g{self._grant_serial:08d}"
            self._issued.add(grant_id)
            key = self._key
        grant = AccessGrant(
            grant_id=grant_id,
            subject=subject,
            client_id=client_id,
            scopes=scopes,
            audience=audience,
            issued_at=now,
            expires_at=now + ttl,
            binding=binding,
            key_id=key.key_id,
        )
        return replace(grant, signature=key.sign(grant.signing_input()))

    # -- verification --------------------------------------------------

    def _public_key_for(self, key_id: str) -> bytes | None:
        with self._lock:
            for key in (self._key, self._previous_key):
                if key is not None and key.key_id == key_id:
                    return key.public_bytes()
        return None

    def signature_valid(self, grant: AccessGrant) -> bool:
        public = self._public_key_for(grant.key_id)
        if public is None:
            return False
        return verify_signature(public, grant.signature, grant.signing_input())

    def authorize(
        self,
        grant: AccessGrant,
        invocation: tuple[str, str],
        session_binding: str,
        now: float,
    ) -> Decision:
        """Per-request authorization for a tool invocation. Total: every
        failure is a Deny verdict, never an exception."""
        server_id, tool_id = invocation
        return self.authorize_scope(grant, server_id, f"tool:{tool_id}:invoke", session_binding, now)

    def authorize_scope(
        self,
        grant: AccessGrant,
        server_id: str,
        required_scope: str,
        session_binding: str,
        now: float,
    ) -> Decision:
        # Checks run in a fixed order; the first failure is reported.
        if not self.signature_valid(grant):
            return Decision.deny(DenyReason.SIGNATURE_INVALID)
        if not now < grant.expires_at:
            return Decision.deny(DenyReason.TOKEN_EXPIRED)
        if grant.audience != server_id:
            return Decision.deny(DenyReason.AUDIENCE_MISMATCH)
        if not any_scope_matches(grant.scopes, required_scope):
            return Decision.deny(DenyReason.SCOPE_MISSING)
        with self._lock:
            revoked = grant.grant_id in self._revoked
        if revoked:
            return Decision.deny(DenyReason.REVOKED)
        if grant.binding != session_binding:
            return Decision.deny(DenyReason.BINDING_MISMATCH)
        return Decision.allow()

    # -- revocation and rotation ----------------------------------------

    def revoke(self, grant_id: str, now: float) -> bool:
        """Idempotent. Returns whether the id was ever issued here, so the
        caller can audit no-op revocations of unknown ids."""
        with self._lock:
            self._revoked.add(grant_id)
            return grant_id in self._issued

    def preload_revocations(self, grant_ids: Iterable[str]) -> None:
        """Seed the revocation set (e.g. replayed from the audit log)."""
        with self._lock:
            self._revoked.update(grant_ids)

    def rotate_signing_key(self, now: float) -> str:
        """Grants signed by the outgoing key stay valid until expiry; keys
        two rotations old stop verifying."""
        with self._lock:
            self._key_serial += 1
            self._previous_key = self._key
            self._key = SigningKey.generate(f"gw-k{self._key_serial}")
            return self._key.key_id


# ---------------------------------------------------------------------------
# Rate limiting
# ---------------------------------------------------------------------------


@dataclass
class RateBucket:
    capacity: float
    refill: float  # tokens per second
    level: float
    last_update: float


@dataclass(frozen=True)
class RateParams:
    capacity: float = 60.0
    refill: float = 1.0


class RateLimiter:
    """Token buckets keyed by (principal, endpoint). Buckets start full."""

    def __init__(
        self,
        limits: Mapping[str, RateParams] | None = None,
        default: RateParams = RateParams(),
    ):
        self._limits = dict(limits or {})
        self._default = default
        self._buckets: dict[tuple[str, str], RateBucket] = {}
        self._lock = threading.Lock()

    def params_for(self, endpoint: str) -> RateParams:
        return self._limits.get(endpoint, self._default)

    def check(self, principal: str, endpoint: str, now: float) -> Decision:
        key = (principal, endpoint)
        with self._lock:
            bucket = self._buckets.get(key)
            if bucket is None:
                params = self.params_for(endpoint)
                bucket = RateBucket(params.capacity, params.refill, params.capacity, now)
                self._buckets[key] = bucket
            elapsed = max(0.0, now - bucket.last_update)
            bucket.level = min(bucket.capacity, bucket.level + bucket.refill * elapsed)
            bucket.last_update = now
            if bucket.level >= 1.0:
                bucket.level -= 1.0
                return Decision.allow()
            return Decision.deny(DenyReason.THROTTLED)

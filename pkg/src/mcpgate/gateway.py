"""The proxy core: authenticated sessions, the fixed per-request enforcement
pipeline (parse -> validate -> normalize -> detect -> authorize -> rate ->
quarantine -> forward -> egress), upstream server registration with identity
proofs and namespacing, tool quarantine, and manifest intake scanning.

Fail-closed: an internal error in any stage denies the request, audits the
failure, and returns a scrubbed error body; the gateway never forwards on
internal failure and never drops a request silently.
"""

from __future__ import annotations

import json
import secrets
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping

from . import detection, egress
from .access import (
    AccessGrant,
    DenyReason,
    Decision,
    GrantAuthority,
    GrantPolicy,
    RateLimiter,
    any_scope_matches,
)
from .audit import AuditLog, EventKind, FileAuditStore, MemoryAuditStore
from .canonical import canonical_json_bytes
from .clock import SystemClock
from .config import GatewayConfig, PolicyConfig
from .detection import RuleSet, ToolBaseline, base_ruleset
from .protocol import (
    ConsistencyRule,
    FieldSpec,
    MalformedJson,
    McpEnvelope,
    Oversize,
    ProtocolViolation,
    SchemaRegistry,
    UnknownMethod,
    builtin_schema_registry,
    consistency_check,
    normalize_envelope,
    parse_envelope,
    serialize_envelope,
)
from .registry import (
    LifecycleState,
    RegistryStore,
    ReviewRecord,
    SignedManifest,
    ToolRegistry,
    TrustRoots,
    UnknownTool,
    load_registry,
)
from .signing import SigningKey, verify_signature

PIPELINE_STAGES = (
    "parse",
    "validate",
    "normalize",
    "detect",
    "authorize",
    "rate",
    "quarantine",
    "forward",
    "egress",
)

# JSON-RPC error codes used for client-visible failures.
ERR_PARSE = -32700
ERR_INVALID_REQUEST = -32600
ERR_METHOD_NOT_FOUND = -32601
ERR_INVALID_PARAMS = -32602
ERR_UNAUTHORIZED = -32001
ERR_THROTTLED = -32002
ERR_QUARANTINED = -32003
ERR_UPSTREAM = -32004
ERR_INTERNAL = -32005


def _namespaced(name: str) -> bool:
    server, sep, rest = name.partition(":")
    return bool(server) and bool(sep) and bool(rest)


#: Cross-field rules applied in the validate stage. Forwarded targets must
#: carry a server namespace so routing never guesses.
DEFAULT_CONSISTENCY_RULES = (
    ConsistencyRule(
        rule_id="tools-call-namespaced-name",
        method="tools/call",
        paths=("params.name",),
        predicate=_namespaced,
        detail="tools/call name must be server:tool",
    ),
    ConsistencyRule(
        rule_id="resources-read-namespaced-uri",
        method="resources/read",
        paths=("params.uri",),
        predicate=_namespaced,
        detail="resources/read uri must be server:uri",
    ),
    ConsistencyRule(
        rule_id="prompts-get-namespaced-name",
        method="prompts/get",
        paths=("params.name",),
        predicate=_namespaced,
        detail="prompts/get name must be server:prompt",
    ),
)


class GatewayError(Exception):
    pass


class AuthnFailed(GatewayError):
    pass


class GrantRejected(GatewayError):
    pass


class IdentityUnproven(GatewayError):
    pass


class UpstreamTimeout(GatewayError):
    pass


class UpstreamUnavailable(GatewayError):
    pass


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


@dataclass
class SessionContext:
    """Per-client session state. No operation may read or write another
    session's context; the gateway serializes each session's requests."""

    session_id: str
    client_id: str
    subject: str
    binding: str
    transport_attrs: Mapping[str, Any]
    created_at: float
    grants: list[AccessGrant] = field(default_factory=list)
    request_count: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def trace_root(self) -> str:
        return self.session_id

    def attach_grant(self, grant: AccessGrant) -> None:
        self.grants.append(grant)


def make_client_hello(
    client_id: str, subject: str, binding: str, key: SigningKey,
) -> dict[str, Any]:
    """Build the authentication frame a client presents at session open:
    identity fields plus a signature binding them to its registered key."""
    body = {"client_id": client_id, "subject": subject, "binding": binding}
    return {**body, "signature": key.sign(canonical_json_bytes(body)).hex()}


# ---------------------------------------------------------------------------
# Upstreams
# ---------------------------------------------------------------------------


class EchoUpstream:
    """In-process MCP server double: answers tools/call, resources/read and
    prompts/get by echoing. Holds an identity key so registration can run the
    real challenge/response proof. ``responder`` overrides the reply text."""

    def __init__(
        self,
        server_id: str,
        responder: Callable[[McpEnvelope], str] | None = None,
        delay: float = 0.0,
    ):
        self.server_id = server_id
        self.identity = SigningKey.generate(f"srv-{server_id}")
        self.responder = responder
        self.delay = delay

    def prove_identity(self, challenge: bytes) -> bytes:
        return self.identity.sign(challenge)

    def public_key(self) -> bytes:
        return self.identity.public_bytes()

    def send(self, data: bytes, timeout: float) -> bytes:
        if self.delay > timeout:
            raise UpstreamTimeout(f"upstream exceeded {timeout}s")
        envelope = parse_envelope(data)
        if self.responder is not None:
            text = self.responder(envelope)
        elif envelope.method == "tools/call":
            args = (envelope.params or {}).get("arguments") or {}
            text = json.dumps({"echo": args}, sort_keys=True)
        elif envelope.method == "resources/read":
            text = f"contents of {(envelope.params or {}).get('uri', '')}"
        else:
            text = f"{envelope.method} ok"
        result: dict[str, Any] = {"content": [{"type": "text", "text": text}]}
        if envelope.method == "resources/read":
            result = {"contents": [{"uri": (envelope.params or {}).get("uri", ""), "text": text}]}
        response = {"jsonrpc": "2.0", "id": envelope.id, "result": result}
        return json.dumps(response, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


class TcpUpstream:
    """Newline-delimited JSON-RPC over TCP, for `gateway run` deployments."""

    def __init__(self, server_id: str, host: str, port: int):
        self.server_id = server_id
        self.host = host
        self.port = port

    def send(self, data: bytes, timeout: float) -> bytes:
        import socket

        try:
            with socket.create_connection((self.host, self.port), timeout=timeout) as sock:
                sock.sendall(data + b"\n")
                sock.settimeout(timeout)
                buf = b""
                while not buf.endswith(b"\n"):
                    chunk = sock.recv(65536)
                    if not chunk:
                        break
                    buf += chunk
                return buf.rstrip(b"\n")
        except socket.timeout as exc:
            raise UpstreamTimeout(str(exc)) from None
        except OSError as exc:
            raise UpstreamUnavailable(str(exc)) from None


@dataclass
class UpstreamServer:
    server_id: str
    endpoint: str
    identity_key: bytes
    status: str  # "Active" | "Untrusted"
    transport: Any = None


# ---------------------------------------------------------------------------
# Pipeline bookkeeping
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    name: str
    ok: bool
    detail: str = ""
    elapsed: float = 0.0


@dataclass
class PipelineOutcome:
    trace_id: str
    stages: list[StageResult] = field(default_factory=list)
    verdict: str = "deny"  # "allow" | "deny" | "error"
    deny_reason: DenyReason | None = None

    def stage(self, name: str) -> StageResult | None:
        for result in self.stages:
            if result.name == name:
                return result
        return None


class _StageFailure(Exception):
    """Internal control flow: a stage produced a client-visible denial."""

    def __init__(self, code: int, message: str, verdict: str = "deny",
                 reason: DenyReason | None = None, detail: str = ""):
        super().__init__(message)
        self.code = code
        self.message = message
        self.verdict = verdict
        self.reason = reason
        self.detail = detail or message


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


class Gateway:
    def __init__(
        self,
        policy: PolicyConfig,
        *,
        clock=None,
        schemas: SchemaRegistry | None = None,
        rules: RuleSet | None = None,
        trust_roots: TrustRoots | None = None,
        registry: ToolRegistry | None = None,
        audit_log: AuditLog | None = None,
        grant_authority: GrantAuthority | None = None,
        rate_limiter: RateLimiter | None = None,
        egress_policy: egress.RedactionPolicy | None = None,
        consistency_rules: tuple[ConsistencyRule, ...] = DEFAULT_CONSISTENCY_RULES,
        max_message_bytes: int = 1 * 1024 * 1024,
        max_string_length: int = 10_000,
        upstream_timeout: float = 30.0,
        pipeline_budget: float = 35.0,
    ):
        self.policy = policy
        self.clock = clock or SystemClock()
        self.schemas = schemas or builtin_schema_registry()
        self.rules = rules or base_ruleset()
        self.trust_roots = trust_roots or TrustRoots()
        self.registry = registry or ToolRegistry(
            self.trust_roots, recert_period=policy.recert_period_days * 86400.0
        )
        self.audit = audit_log or AuditLog(MemoryAuditStore())
        self.grants = grant_authority or GrantAuthority(
            GrantPolicy(
                entitlements=dict(policy.entitlements),
                audiences=frozenset(),
                default_ttl=policy.grant_default_ttl,
                max_ttl=policy.grant_max_ttl,
            )
        )
        self.rate = rate_limiter or RateLimiter()
        self.egress_policy = egress_policy or egress.default_policy()
        self.consistency_rules = consistency_rules
        self.max_message_bytes = max_message_bytes
        self.max_string_length = max_string_length
        self.upstream_timeout = upstream_timeout
        self.pipeline_budget = pipeline_budget

        self.upstreams: dict[str, UpstreamServer] = {}
        self.baselines: dict[str, ToolBaseline] = {}
        self._clients = {c.client_id: c for c in policy.clients}
        self._sessions: dict[str, SessionContext] = {}
        self._session_serial = 0
        self._challenges: dict[str, bytes] = {}
        self._last_invocation: dict[str, float] = {}
        self._faults: dict[str, Exception] = {}
        self._lock = threading.Lock()

    # -- construction ---------------------------------------------------

    @classmethod
    def from_config(cls, config: GatewayConfig, clock=None) -> "Gateway":
        trust_roots = TrustRoots(
            {sid: bytes.fromhex(hexkey) for sid, hexkey in config.policy.trust_roots.items()}
        )
        recert = config.policy.recert_period_days * 86400.0
        if config.registry_store:
            registry = load_registry(RegistryStore(config.registry_store), trust_roots, recert)
        else:
            registry = ToolRegistry(trust_roots, recert_period=recert)
        store = MemoryAuditStore() if config.audit.store == "memory" else FileAuditStore(config.audit.store)
        signing_key = None
        if config.policy.gateway_key_file:
            from .signing import load_key

            signing_key = load_key(config.policy.gateway_key_file)
        gateway = cls(
            config.policy,
            clock=clock,
            schemas=builtin_schema_registry() if config.schemas == "builtin" else SchemaRegistry.load_path(config.schemas),
            rules=base_ruleset() if config.rules == "builtin" else RuleSet.load_path(config.rules),
            trust_roots=trust_roots,
            registry=registry,
            audit_log=AuditLog(store),
            grant_authority=GrantAuthority(
                GrantPolicy(
                    entitlements=dict(config.policy.entitlements),
                    audiences=frozenset(u.server_id for u in config.upstreams),
                    default_ttl=config.policy.grant_default_ttl,
                    max_ttl=config.policy.grant_max_ttl,
                ),
                signing_key=signing_key,
            ),
            rate_limiter=RateLimiter(config.limits.rate, config.limits.rate_default),
            egress_policy=config.egress,
            max_message_bytes=config.limits.max_message_bytes,
            max_string_length=config.limits.max_string_length,
            upstream_timeout=config.limits.upstream_timeout,
            pipeline_budget=config.limits.pipeline_budget,
        )
        # Revocations are made durable through the audit log; replay them so
        # a restarted gateway keeps denying revoked grants.
        gateway.grants.preload_revocations(
            str(record.payload.get("grant_id"))
            for record in gateway.audit.query(kind=EventKind.REVOCATION)
            if record.payload.get("grant_id")
        )
        for upstream in config.upstreams:
            if upstream.endpoint == "echo:":
                echo = EchoUpstream(upstream.server_id)
                challenge = gateway.issue_challenge(upstream.server_id)
                gateway.register_upstream(
                    upstream.server_id, "echo:", echo, echo.public_key(),
                    challenge, echo.prove_identity(challenge),
                )
            elif upstream.endpoint.startswith("tcp://"):
                host, _, port = upstream.endpoint[len("tcp://"):].partition(":")
                transport = TcpUpstream(upstream.server_id, host, int(port))
                # Pinned-key upstream: the configured key is the trust
                # decision; recorded in audit as a configuration change.
                gateway.upstreams[upstream.server_id] = UpstreamServer(
                    upstream.server_id, upstream.endpoint,
                    bytes.fromhex(upstream.identity_key) if upstream.identity_key else b"",
                    "Active", transport,
                )
                gateway.audit.append(
                    EventKind.CONFIG_CHANGE, "gateway",
                    {"upstream": upstream.server_id, "pinned": True},
                    ts=gateway.clock.now(),
                )
            else:
                raise GatewayError(f"unsupported upstream endpoint {upstream.endpoint!r}")
        return gateway

    # -- test hooks -------------------------------------------------------

    def inject_fault(self, stage: str, exc: Exception) -> None:
        """Force ``stage`` to raise on the next requests (fault testing)."""
        if stage not in PIPELINE_STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        self._faults[stage] = exc

    def clear_faults(self) -> None:
        self._faults.clear()

    # -- configuration --------------------------------------------------

    def reload_rules(self, rules: RuleSet) -> None:
        """Hot-swap the detection ruleset; scanning picks up the new set on
        the next request. Audited with both version digests."""
        old = self.rules.version_digest
        self.rules = rules
        self.audit.append(
            EventKind.CONFIG_CHANGE, "gateway",
            {"ruleset_before": old, "ruleset_after": rules.version_digest},
            ts=self.clock.now(),
        )

    def _check_fault(self, stage: str) -> None:
        exc = self._faults.get(stage)
        if exc is not None:
            raise exc

    # -- sessions ---------------------------------------------------------

    def open_session(
        self,
        client_hello: Mapping[str, Any],
        now: float,
        transport_attrs: Mapping[str, Any] | None = None,
    ) -> SessionContext:
        client_id = str(client_hello.get("client_id", ""))
        subject = str(client_hello.get("subject", ""))
        binding = str(client_hello.get("binding", ""))
        attrs = dict(transport_attrs or {})

        def fail(detail: str) -> None:
            self.audit.append(
                EventKind.AUTHN_FAILURE, client_id or "unknown",
                {"detail": detail}, ts=now,
            )
            raise AuthnFailed(detail)

        record = self._clients.get(client_id)
        if record is None:
            fail("unknown client")
        if record.subject != subject:
            fail("subject does not match the registered client")
        body = {"client_id": client_id, "subject": subject, "binding": binding}
        try:
            signature = bytes.fromhex(str(client_hello.get("signature", "")))
        except ValueError:
            signature = b""
        if not verify_signature(bytes.fromhex(record.public_key), signature, canonical_json_bytes(body)):
            fail("client proof does not verify")
        for rule in self.policy.session_context_rules:
            attr = rule.get("attr", "")
            allowed = rule.get("allowed", [])
            if attrs.get(attr) not in allowed:
                fail(f"context attribute {attr!r} not acceptable")

        with self._lock:
            self._session_serial += 1
            session = SessionContext(
                session_id=f"s{self._session_serial:06d}",
                client_id=client_id,
                subject=subject,
                binding=binding,
                transport_attrs=attrs,
                created_at=now,
            )
            self._sessions[session.session_id] = session
        self.audit.append(
            EventKind.AUTHN_SUCCESS, subject,
            {"client_id": client_id, "session_id": session.session_id, "trace_id": session.trace_root},
            ts=now,
        )
        return session

    def session(self, session_id: str) -> SessionContext:
        return self._sessions[session_id]

    # -- upstream registration ---------------------------------------------

    def issue_challenge(self, server_id: str) -> bytes:
        challenge = secrets.token_bytes(32)
        with self._lock:
            self._challenges[server_id] = challenge
        return challenge

    def register_upstream(
        self,
        server_id: str,
        endpoint: str,
        transport: Any,
        identity_key: bytes,
        challenge: bytes,
        signature: bytes,
    ) -> UpstreamServer:
        """Challenge/response identity proof. Challenges are single-use;
        failure records the server as Untrusted and makes it unusable."""
        with self._lock:
            expected = self._challenges.pop(server_id, None)
        ok = (
            expected is not None
            and expected == challenge
            and verify_signature(identity_key, signature, challenge)
        )
        server = UpstreamServer(
            server_id, endpoint, identity_key, "Active" if ok else "Untrusted",
            transport if ok else None,
        )
        self.upstreams[server_id] = server
        self.audit.append(
            EventKind.CONFIG_CHANGE, "gateway",
            {"upstream": server_id, "status": server.status}, ts=self.clock.now(),
        )
        if not ok:
            raise IdentityUnproven(f"identity proof for {server_id!r} failed")
        return server

    # -- registry intake -----------------------------------------------------

    def _sanitize_findings(self, findings: Iterable[detection.Finding]) -> list[dict]:
        """Finding excerpts are logged; redact them first so scanned text can
        never smuggle sensitive values into the audit trail."""
        out = []
        for finding in findings:
            doc = finding.to_dict()
            doc["excerpt"] = egress.redact(doc["excerpt"], self.egress_policy)[0]
            out.append(doc)
        return out

    def scan_signed_manifest(self, signed: SignedManifest) -> tuple[list[detection.Finding], float]:
        manifest = signed.manifest
        findings = detection.scan_manifest(manifest, self.rules)
        try:
            findings += detection.check_permission_alignment(manifest, self.policy.category_scopes)
        except detection.UnknownCategory:
            findings += [
                detection.Finding(
                    rule_id="policy.unknown_category",
                    path="category",
                    span=(0, len(manifest.category)),
                    weight=detection.SEVERITY_WEIGHTS["medium"],
                    category=detection.ThreatCategory.INSECURE_CONFIGURATION,
                    layer="L6",
                    excerpt=manifest.category,
                )
            ]
        findings += detection.heuristic_findings(manifest)
        return findings, detection.risk_score(findings)

    def submit_tool(self, signed: SignedManifest, now: float):
        """Manifest-bearing intake: inline detection scan, registry append,
        and automatic quarantine above the configured risk threshold."""
        findings, risk = self.scan_signed_manifest(signed)
        entry = self.registry.submit(signed, now)
        key = entry.key
        self.audit.append(
            EventKind.TOOL_REGISTERED, signed.signer_id,
            {"tool": key, "version": signed.manifest.version, "risk": risk}, ts=now,
        )
        if findings:
            self.audit.append(
                EventKind.DETECTION_FINDING, signed.signer_id,
                {
                    "tool": key,
                    "findings": self._sanitize_findings(findings),
                    "risk": risk,
                    "ruleset": self.rules.version_digest,
                },
                ts=now,
            )
        if risk >= self.policy.auto_quarantine_risk:
            self.quarantine_tool(key, f"intake scan risk {risk:.2f}", now)
        return entry, findings, risk

    def approve_tool(self, tool_id: str, reviewer: str, now: float):
        """Approval requires a fresh scan attached as the review record."""
        entry = self.registry.get(tool_id)
        findings, risk = self.scan_signed_manifest(entry.signed)
        review = ReviewRecord(
            reviewer=reviewer,
            findings_digest=detection.findings_digest(findings),
            risk_score=risk,
        )
        entry = self.registry.approve(entry.key, review, now)
        self.audit.append(
            EventKind.TOOL_APPROVED, reviewer,
            {"tool": entry.key, "risk": risk, "recert_deadline": entry.recert_deadline},
            ts=now,
        )
        return entry

    def quarantine_tool(self, tool_id: str, reason: str, now: float) -> None:
        entry = self.registry.quarantine(tool_id, reason, now)  # raises UnknownTool
        self.audit.append(
            EventKind.TOOL_QUARANTINED, "gateway",
            {"tool": entry.key, "reason": reason}, ts=now,
        )

    def audit_registry_integrity(self, now: float) -> list[tuple[str, str]]:
        """Verify every registry entry; tampered or untrusted entries are
        reported, audited as findings, and quarantined."""
        problems = self.registry.audit_registry()
        for key, failure in problems:
            self.audit.append(
                EventKind.DETECTION_FINDING, "gateway",
                {
                    "tool": key,
                    "findings": [{
                        "rule_id": "integrity.manifest_verification",
                        "path": "manifest",
                        "category": detection.ThreatCategory.C2_UPDATE_COMPROMISE.value,
                        "layer": "L4",
                        "detail": failure,
                    }],
                    "ruleset": self.rules.version_digest,
                },
                ts=now,
            )
            self.quarantine_tool(key, f"integrity failure: {failure}", now)
        return problems

    # -- grants ----------------------------------------------------------

    def issue_grant(
        self,
        subject: str,
        client_id: str,
        scopes: Iterable[str],
        audience: str,
        binding: str,
        now: float,
        ttl: float | None = None,
    ) -> AccessGrant:
        return self.grants.issue_grant(subject, client_id, scopes, audience, binding, now, ttl)

    def revoke_grant(self, grant_id: str, now: float) -> bool:
        known = self.grants.revoke(grant_id, now)
        self.audit.append(
            EventKind.REVOCATION, "gateway",
            {"grant_id": grant_id, "known": known, "noop": not known}, ts=now,
        )
        return known

    def attach_grant(self, session: SessionContext, token: str) -> AccessGrant:
        """Attach a wire-form grant a client presents in-band. Ownership is
        checked here; validity is re-checked by authorize on every request."""
        from .access import AccessError

        try:
            grant = AccessGrant.decode(token)
        except AccessError as exc:
            raise GrantRejected(str(exc)) from None
        if grant.subject != session.subject or grant.client_id != session.client_id:
            raise GrantRejected("grant was issued to a different principal")
        session.attach_grant(grant)
        return grant

    # -- discovery ---------------------------------------------------------

    def discover_capabilities(self, session: SessionContext, server_filter: str | None = None) -> list[dict]:
        """Namespaced tool list filtered to approved (or recert-due) entries
        whose invoke scope the session's subject is entitled to."""
        tools = []
        for entry in self.registry.entries():
            if entry.state not in (LifecycleState.APPROVED, LifecycleState.RECERTIFICATION_DUE):
                continue
            manifest = entry.signed.manifest
            if server_filter and manifest.server_id != server_filter:
                continue
            entitled = self.grants.policy.entitlements.get(session.subject, ())
            if not any_scope_matches(entitled, f"tool:{manifest.tool_id}:invoke"):
                continue
            tools.append(
                {
                    "name": entry.key,
                    "description": manifest.description,
                    "inputSchema": {
                        "type": "object",
                        "properties": {k: dict(v) for k, v in manifest.parameters.items()},
                    },
                }
            )
        return tools

    # -- request pipeline ---------------------------------------------------

    def handle_request(
        self, session: SessionContext, data: bytes, now: float
    ) -> tuple[bytes, PipelineOutcome]:
        with session.lock:  # per-session serialization, arrival order
            session.request_count += 1
            trace_id = f"{session.trace_root}.{session.request_count}"
            outcome = PipelineOutcome(trace_id=trace_id)
            started = time.perf_counter()
            try:
                response = self._run_pipeline(session, data, now, trace_id, outcome, started)
                outcome.verdict = "allow"
                return response, outcome
            except _StageFailure as failure:
                outcome.verdict = failure.verdict
                outcome.deny_reason = failure.reason
                return self._error_response(data, failure.code, failure.message), outcome

    def _stage(
        self,
        outcome: PipelineOutcome,
        session: SessionContext,
        trace_id: str,
        now: float,
        name: str,
        fn: Callable[[], Any],
    ) -> Any:
        """Run one stage: fault hooks, timing, audit, fail-closed wrapping."""
        t0 = time.perf_counter()
        try:
            self._check_fault(name)
            value = fn()
        except _StageFailure as failure:
            elapsed = time.perf_counter() - t0
            outcome.stages.append(StageResult(name, False, failure.detail, elapsed))
            self.audit.append(
                EventKind.PIPELINE_STAGE, session.subject,
                {"trace_id": trace_id, "session_id": session.session_id,
                 "stage": name, "ok": False, "detail": failure.detail},
                ts=now,
            )
            raise
        except Exception as exc:  # internal failure: deny, audit, scrub
            elapsed = time.perf_counter() - t0
            detail = f"{type(exc).__name__}: {egress.scrub_disclosure(str(exc))}"
            outcome.stages.append(StageResult(name, False, detail, elapsed))
            self.audit.append(
                EventKind.PIPELINE_STAGE, session.subject,
                {"trace_id": trace_id, "session_id": session.session_id,
                 "stage": name, "ok": False, "detail": detail, "internal": True},
                ts=now,
            )
            raise _StageFailure(
                ERR_INTERNAL, "internal gateway error", verdict="error", detail=detail,
            ) from None
        elapsed = time.perf_counter() - t0
        outcome.stages.append(StageResult(name, True, "", elapsed))
        self.audit.append(
            EventKind.PIPELINE_STAGE, session.subject,
            {"trace_id": trace_id, "session_id": session.session_id, "stage": name, "ok": True},
            ts=now,
        )
        return value

    def _run_pipeline(
        self,
        session: SessionContext,
        data: bytes,
        now: float,
        trace_id: str,
        outcome: PipelineOutcome,
        started: float,
    ) -> bytes:
        # parse ----------------------------------------------------------
        def do_parse() -> McpEnvelope:
            try:
                return parse_envelope(data, self.max_message_bytes)
            except Oversize as exc:
                raise _StageFailure(ERR_INVALID_REQUEST, f"frame too large: {exc}")
            except MalformedJson as exc:
                raise _StageFailure(ERR_PARSE, f"parse error: {exc}")
            except ProtocolViolation as exc:
                raise _StageFailure(ERR_INVALID_REQUEST, f"protocol violation: {exc}")

        envelope = self._stage(outcome, session, trace_id, now, "parse", do_parse)
        method = envelope.method or "response"

        # validate ---------------------------------------------------------
        def do_validate() -> McpEnvelope:
            try:
                schema = self.schemas.get(envelope.schema_key())
            except UnknownMethod as exc:
                raise _StageFailure(ERR_METHOD_NOT_FOUND, str(exc))
            if envelope.method == "tools/call":
                schema = self._graft_tool_arguments(schema, envelope)
            from .protocol import validate as validate_op

            report = validate_op(envelope, schema, self.max_string_length)
            report = report.merged(consistency_check(envelope, self.consistency_rules))
            if not report.ok:
                summary = "; ".join(f"{v.path}: {v.kind.value}" for v in report.violations[:8])
                raise _StageFailure(ERR_INVALID_PARAMS, f"validation failed: {summary}")
            return schema

        schema = self._stage(outcome, session, trace_id, now, "validate", do_validate)

        # normalize --------------------------------------------------------
        envelope = self._stage(
            outcome, session, trace_id, now, "normalize",
            lambda: normalize_envelope(envelope, schema),
        )

        # detect: argument pattern rules only at invocation time ------------
        def do_detect():
            findings = []
            if envelope.method == "tools/call":
                args = (envelope.params or {}).get("arguments") or {}
                for key, value in args.items():
                    if isinstance(value, str):
                        findings.extend(
                            detection.scan_text(value, self.rules, path=f"arguments.{key}")
                        )
            if findings:
                self.audit.append(
                    EventKind.DETECTION_FINDING, session.subject,
                    {"trace_id": trace_id, "session_id": session.session_id,
                     "tool": self._target_name(envelope),
                     "findings": self._sanitize_findings(findings),
                     "ruleset": self.rules.version_digest},
                    ts=now,
                )
            return findings

        self._stage(outcome, session, trace_id, now, "detect", do_detect)

        # authorize ----------------------------------------------------------
        def do_authorize():
            required = self._required_scope(envelope)
            if required is None:
                return None  # handshake methods carry no grant requirement
            server_id, scope = required
            decision, grant = self._evaluate_grants(session, server_id, scope, now)
            if decision.allowed:
                self.audit.append(
                    EventKind.AUTHZ_ALLOW, session.subject,
                    {"trace_id": trace_id, "session_id": session.session_id,
                     "server_id": server_id, "scope": scope,
                     "grant_id": grant.grant_id if grant else None},
                    ts=now,
                )
                return grant
            self.audit.append(
                EventKind.AUTHZ_DENY, session.subject,
                {"trace_id": trace_id, "session_id": session.session_id,
                 "server_id": server_id, "scope": scope,
                 "reason": decision.reason.value},
                ts=now,
            )
            raise _StageFailure(
                ERR_UNAUTHORIZED, f"authorization denied: {decision.reason.value}",
                reason=decision.reason,
            )

        self._stage(outcome, session, trace_id, now, "authorize", do_authorize)

        # rate ---------------------------------------------------------------
        def do_rate():
            decision = self.rate.check(session.subject, method, now)
            if not decision.allowed:
                self.audit.append(
                    EventKind.RATE_THROTTLED, session.subject,
                    {"trace_id": trace_id, "session_id": session.session_id, "endpoint": method},
                    ts=now,
                )
                raise _StageFailure(
                    ERR_THROTTLED, "rate limit exceeded", reason=DenyReason.THROTTLED,
                )

        self._stage(outcome, session, trace_id, now, "rate", do_rate)

        # quarantine check -----------------------------------------------------
        def do_quarantine():
            if envelope.method != "tools/call":
                return None
            name = self._target_name(envelope)
            try:
                entry = self.registry.get(name)
            except UnknownTool:
                raise _StageFailure(
                    ERR_UNAUTHORIZED, f"unknown tool {name!r}", reason=DenyReason.TOOL_UNKNOWN,
                )
            if entry.state is LifecycleState.QUARANTINED:
                self.audit.append(
                    EventKind.AUTHZ_DENY, session.subject,
                    {"trace_id": trace_id, "session_id": session.session_id,
                     "tool": entry.key, "reason": DenyReason.TOOL_QUARANTINED.value},
                    ts=now,
                )
                raise _StageFailure(
                    ERR_QUARANTINED, f"tool {name!r} is quarantined",
                    reason=DenyReason.TOOL_QUARANTINED,
                )
            if entry.state not in (LifecycleState.APPROVED, LifecycleState.RECERTIFICATION_DUE):
                raise _StageFailure(
                    ERR_UNAUTHORIZED, f"tool {name!r} is not approved",
                    reason=DenyReason.TOOL_UNKNOWN,
                )
            if entry.state is LifecycleState.RECERTIFICATION_DUE and self.policy.block_recert_due:
                raise _StageFailure(
                    ERR_QUARANTINED, f"tool {name!r} is overdue for recertification",
                    reason=DenyReason.TOOL_QUARANTINED,
                )
            return entry

        entry = self._stage(outcome, session, trace_id, now, "quarantine", do_quarantine)

        # local methods answer here; forwarded methods continue ------------
        if envelope.method == "initialize":
            self._stage(outcome, session, trace_id, now, "forward", lambda: None)
            result = {
                "protocolVersion": (envelope.params or {}).get("protocolVersion", "2025-03-26"),
                "capabilities": {"tools": {"listChanged": False}},
                "serverInfo": {"name": "mcpgate", "version": "0.1.0"},
            }
            return self._finish_local(outcome, session, trace_id, now, envelope, result)
        if envelope.method == "tools/list":
            self._stage(outcome, session, trace_id, now, "forward", lambda: None)
            result = {"tools": self.discover_capabilities(session)}
            return self._finish_local(outcome, session, trace_id, now, envelope, result)

        # forward ---------------------------------------------------------
        def do_forward() -> bytes:
            server_id, downstream = self._denamespace(envelope)
            server = self.upstreams.get(server_id)
            if server is None or server.status != "Active" or server.transport is None:
                raise _StageFailure(
                    ERR_UPSTREAM, f"upstream {server_id!r} is not available", verdict="error",
                )
            if envelope.method == "tools/call" and entry is not None:
                args = (downstream.params or {}).get("arguments") or {}
                sanitized = {
                    k: egress.redact(v, self.egress_policy)[0] if isinstance(v, str) else v
                    for k, v in args.items()
                }
                self.audit.append(
                    EventKind.TOOL_INVOKED, session.subject,
                    {"trace_id": trace_id, "session_id": session.session_id,
                     "tool": entry.key, "params": sanitized,
                     "recert_due": entry.state is LifecycleState.RECERTIFICATION_DUE},
                    ts=now,
                )
            try:
                return server.transport.send(serialize_envelope(downstream), self.upstream_timeout)
            except UpstreamTimeout:
                raise _StageFailure(ERR_UPSTREAM, "upstream timed out", verdict="error")
            except UpstreamUnavailable:
                raise _StageFailure(ERR_UPSTREAM, "upstream unavailable", verdict="error")

        upstream_bytes = self._stage(outcome, session, trace_id, now, "forward", do_forward)

        # egress -------------------------------------------------------------
        def do_egress() -> bytes:
            if time.perf_counter() - started > self.pipeline_budget:
                raise _StageFailure(ERR_INTERNAL, "pipeline budget exceeded", verdict="error")
            return self._filter_response(session, trace_id, envelope, entry, upstream_bytes, now)

        return self._stage(outcome, session, trace_id, now, "egress", do_egress)

    # -- pipeline helpers ---------------------------------------------------

    def _graft_tool_arguments(self, schema, envelope: McpEnvelope):
        """Strict argument validation: the tool's declared parameter schema
        becomes the arguments schema, so undeclared arguments are unknown
        fields (parameter smuggling is rejected, not forwarded)."""
        name = self._target_name(envelope)
        try:
            entry = self.registry.get(name)
        except UnknownTool:
            return schema
        specs = []
        for pname, pspec in entry.signed.manifest.parameters.items():
            pspec = pspec if isinstance(pspec, Mapping) else {}
            specs.append(
                FieldSpec(
                    name=pname,
                    type=str(pspec.get("type", "string")),
                    required=bool(pspec.get("required", False)),
                    max_length=pspec.get("max_length"),
                )
            )
        return schema.with_fields({"arguments": tuple(specs)})

    def _target_name(self, envelope: McpEnvelope) -> str:
        params = envelope.params or {}
        if envelope.method == "tools/call":
            return str(params.get("name", ""))
        if envelope.method == "resources/read":
            return str(params.get("uri", ""))
        if envelope.method == "prompts/get":
            return str(params.get("name", ""))
        return ""

    def _required_scope(self, envelope: McpEnvelope) -> tuple[str, str] | None:
        """(server_id, required scope) for methods that need a grant."""
        if envelope.method in ("initialize", "tools/list"):
            return None
        name = self._target_name(envelope)
        server_id, _, rest = name.partition(":")
        if envelope.method == "tools/call":
            return server_id, f"tool:{rest}:invoke" if rest else "tool:?:invoke"
        if envelope.method == "resources/read":
            return server_id, "resources:read"
        if envelope.method == "prompts/get":
            return server_id, "prompts:get"
        return None

    def _evaluate_grants(
        self, session: SessionContext, server_id: str, scope: str, now: float
    ) -> tuple[Decision, AccessGrant | None]:
        """Try every grant attached to the session; on full denial report the
        reason from the grant that progressed furthest through the checks."""
        rank = {
            DenyReason.SIGNATURE_INVALID: 0,
            DenyReason.TOKEN_EXPIRED: 1,
            DenyReason.AUDIENCE_MISMATCH: 2,
            DenyReason.SCOPE_MISSING: 3,
            DenyReason.REVOKED: 4,
            DenyReason.BINDING_MISMATCH: 5,
        }
        best: Decision | None = None
        for grant in session.grants:
            decision = self.grants.authorize_scope(grant, server_id, scope, session.binding, now)
            if decision.allowed:
                return decision, grant
            if best is None or rank.get(decision.reason, 0) > rank.get(best.reason, 0):
                best = decision
        return best or Decision.deny(DenyReason.SCOPE_MISSING), None

    def _denamespace(self, envelope: McpEnvelope) -> tuple[str, McpEnvelope]:
        params = dict(envelope.params or {})
        name = self._target_name(envelope)
        server_id, _, bare = name.partition(":")
        if envelope.method == "tools/call":
            params["name"] = bare
        elif envelope.method == "resources/read":
            params["uri"] = bare
        elif envelope.method == "prompts/get":
            params["name"] = bare
        return server_id, replace(envelope, params=params)

    def _finish_local(
        self, outcome, session, trace_id: str, now: float, envelope: McpEnvelope, result: dict
    ) -> bytes:
        response = {"jsonrpc": "2.0", "id": envelope.id, "result": result}
        raw = json.dumps(response, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

        def do_egress() -> bytes:
            return self._filter_response(session, trace_id, envelope, None, raw, now)

        return self._stage(outcome, session, trace_id, now, "egress", do_egress)

    def _filter_response(
        self,
        session: SessionContext,
        trace_id: str,
        request: McpEnvelope,
        entry,
        upstream_bytes: bytes,
        now: float,
    ) -> bytes:
        try:
            body = json.loads(upstream_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise _StageFailure(ERR_UPSTREAM, "upstream returned a malformed frame", verdict="error")

        counts: dict[str, int] = {}

        def filter_strings(value):
            if isinstance(value, str):
                redacted, report = egress.redact(value, self.egress_policy)
                for det, n in report.counts.items():
                    counts[det] = counts.get(det, 0) + n
                return redacted
            if isinstance(value, dict):
                return {k: filter_strings(v) for k, v in value.items()}
            if isinstance(value, list):
                return [filter_strings(v) for v in value]
            return value

        if "result" in body:
            body["result"] = filter_strings(body["result"])
        if isinstance(body.get("error"), dict) and isinstance(body["error"].get("message"), str):
            body["error"]["message"] = egress.scrub_disclosure(
                filter_strings(body["error"]["message"])
            )
        body["id"] = request.id

        size = len(upstream_bytes)
        anomaly = None
        if entry is not None:
            baseline = self.baselines.setdefault(
                entry.key, ToolBaseline(tool_id=entry.key)
            )
            anomaly = detection.assess(baseline, "response_size_bytes", float(size))
            self._observe_tool(baseline, entry.key, request, size, now)
            if anomaly.anomalous:
                self.audit.append(
                    EventKind.ANOMALY_ALERT, session.subject,
                    {"trace_id": trace_id, "session_id": session.session_id,
                     "tool": entry.key, "metric": anomaly.metric,
                     "observed": anomaly.observed, "z_score": anomaly.z_score},
                    ts=now,
                )
        size_alert = egress.check_size(size, self.egress_policy, anomaly)

        total = sum(counts.values())
        self.audit.append(
            EventKind.RESPONSE_FILTERED, session.subject,
            {"trace_id": trace_id, "session_id": session.session_id,
             "counts": counts, "total_redactions": total,
             "original_size": size, "size_alert": size_alert},
            ts=now,
        )
        if self.egress_policy.block_mode and (total or size_alert):
            raise _StageFailure(
                ERR_UPSTREAM, "response blocked by egress policy", verdict="deny",
            )
        return json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    def _observe_tool(
        self, baseline: ToolBaseline, key: str, request: McpEnvelope, size: int, now: float
    ) -> None:
        detection.observe(baseline, "response_size_bytes", float(size))
        args = (request.params or {}).get("arguments") or {}
        detection.observe(baseline, "distinct_argument_keys", float(len(args)))
        detection.observe(baseline, "error_rate", 0.0)
        last = self._last_invocation.get(key)
        if last is not None and now > last:
            detection.observe(baseline, "invocation_rate_per_min", 60.0 / (now - last))
        self._last_invocation[key] = now

    def _error_response(self, data: bytes, code: int, message: str) -> bytes:
        """JSON-RPC error body; the message always passes disclosure scrub."""
        msg_id = None
        try:
            obj = json.loads(data.decode("utf-8"))
            if isinstance(obj, dict):
                candidate = obj.get("id")
                if isinstance(candidate, (int, str)) and not isinstance(candidate, bool):
                    msg_id = candidate
        except (UnicodeDecodeError, json.JSONDecodeError):
            pass
        body = {
            "jsonrpc": "2.0",
            "id": msg_id,
            "error": {"code": code, "message": egress.scrub_disclosure(message)},
        }
        return json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

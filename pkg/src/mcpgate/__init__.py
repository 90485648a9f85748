"""mcpgate: a policy-enforcing security gateway for MCP traffic.

Mediates all client-to-server MCP messages behind a fixed enforcement
pipeline: strict protocol validation, signed tool registry checks, poisoning
detection, scoped short-lived grants, rate limiting, egress redaction, and a
tamper-evident audit chain. A threat harness replays adversarial traffic for
every supported threat category against a live instance.
"""

__version__ = "0.1.0"

from .access import AccessGrant, Decision, DenyReason, GrantAuthority, GrantPolicy
from .audit import AuditLog, AuditRecord, EventKind, verify_chain
from .detection import DetectionRule, Finding, RuleSet, ThreatCategory, risk_score
from .egress import RedactionPolicy, redact, scrub_disclosure
from .gateway import Gateway, SessionContext, make_client_hello
from .protocol import McpEnvelope, SchemaRegistry, parse_envelope, validate
from .registry import SignedManifest, ToolManifest, ToolRegistry, TrustRoots

__all__ = [
    "AccessGrant",
    "AuditLog",
    "AuditRecord",
    "Decision",
    "DenyReason",
    "DetectionRule",
    "EventKind",
    "Finding",
    "Gateway",
    "GrantAuthority",
    "GrantPolicy",
    "McpEnvelope",
    "RedactionPolicy",
    "RuleSet",
    "SchemaRegistry",
    "SessionContext",
    "SignedManifest",
    "ThreatCategory",
    "ToolManifest",
    "ToolRegistry",
    "TrustRoots",
    "make_client_hello",
    "parse_envelope",
    "redact",
    "risk_score",
    "scrub_disclosure",
    "validate",
    "verify_chain",
    "__version__",
]

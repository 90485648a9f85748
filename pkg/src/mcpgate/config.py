"""Gateway configuration: YAML file with sections
{listeners, upstreams, policy, rules, schemas, egress, limits, audit}.

Bad configuration raises ConfigError, which the CLI maps to exit code 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .access import RateParams
from .egress import Detector, RedactionPolicy, default_detectors

DEFAULT_CATEGORY_SCOPES = {
    "file-read": ("fs",),
    "file-write": ("fs",),
    "network": ("network", "http"),
    "compute": ("compute",),
    "messaging": ("msg",),
    "search": ("search",),
    "database": ("db",),
    "monitoring": ("metrics",),
}


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ListenerConfig:
    kind: str  # "tcp" (newline-delimited) or "http" (single-body POST)
    host: str = "127.0.0.1"
    port: int = 8765
    transport_attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class UpstreamConfig:
    server_id: str
    endpoint: str  # "echo:" for the in-process double, or "tcp://host:port"
    identity_key: str = ""  # hex public key; empty means register at runtime


@dataclass(frozen=True)
class ClientConfig:
    client_id: str
    public_key: str  # hex
    subject: str


@dataclass(frozen=True)
class PolicyConfig:
    clients: tuple[ClientConfig, ...] = ()
    entitlements: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    grant_default_ttl: float = 300.0
    grant_max_ttl: float = 900.0
    recert_period_days: float = 90.0
    block_recert_due: bool = False
    auto_quarantine_risk: float = 0.5
    category_scopes: Mapping[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_CATEGORY_SCOPES)
    )
    session_context_rules: tuple[Mapping[str, Any], ...] = ()
    trust_roots: Mapping[str, str] = field(default_factory=dict)  # signer -> hex key
    gateway_key_file: str = ""


@dataclass(frozen=True)
class LimitsConfig:
    max_message_bytes: int = 1 * 1024 * 1024
    max_string_length: int = 10_000
    upstream_timeout: float = 30.0
    pipeline_budget: float = 35.0
    rate: Mapping[str, RateParams] = field(default_factory=dict)
    rate_default: RateParams = RateParams(capacity=120, refill=2.0)


@dataclass(frozen=True)
class AuditConfig:
    store: str = "memory"  # "memory" or a file path
    retention_days: int = 365  # documented knob; enforcement is out of scope


@dataclass(frozen=True)
class GatewayConfig:
    listeners: tuple[ListenerConfig, ...] = ()
    upstreams: tuple[UpstreamConfig, ...] = ()
    policy: PolicyConfig = PolicyConfig()
    rules: str = "builtin"  # "builtin" or a rule-file path
    schemas: str = "builtin"
    egress: RedactionPolicy = field(default_factory=lambda: RedactionPolicy(default_detectors()))
    limits: LimitsConfig = LimitsConfig()
    audit: AuditConfig = AuditConfig()
    registry_store: str = ""  # JSONL path; empty keeps the registry in memory


def _require(mapping: Mapping, key: str, section: str) -> Any:
    if key not in mapping:
        raise ConfigError(f"section {section!r} is missing required key {key!r}")
    return mapping[key]


def _egress_from(node: Mapping[str, Any] | None) -> RedactionPolicy:
    node = node or {}
    detectors_node = node.get("detectors", "default")
    if detectors_node == "default" or detectors_node is None:
        detectors = default_detectors()
    else:
        detectors = tuple(
            Detector(
                detector_id=_require(d, "detector_id", "egress.detectors"),
                kind=d.get("kind", "regex"),
                pattern=_require(d, "pattern", "egress.detectors"),
                label=_require(d, "label", "egress.detectors"),
                entropy_threshold=float(d.get("entropy_threshold", 4.0)),
                min_digits=int(d.get("min_digits", 0)),
            )
            for d in detectors_node
        )
    try:
        return RedactionPolicy(
            detectors=detectors,
            size_alert_bytes=int(node.get("size_alert_bytes", 1 * 1024 * 1024)),
            scrub_stack_traces=bool(node.get("scrub_stack_traces", True)),
            block_mode=bool(node.get("block_mode", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"egress section: {exc}") from None


def from_dict(doc: Mapping[str, Any]) -> GatewayConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("configuration root must be a mapping")
    try:
        listeners = tuple(
            ListenerConfig(
                kind=_require(n, "kind", "listeners"),
                host=n.get("host", "127.0.0.1"),
                port=int(n.get("port", 8765)),
                transport_attrs=dict(n.get("transport_attrs") or {}),
            )
            for n in doc.get("listeners") or []
        )
        upstreams = tuple(
            UpstreamConfig(
                server_id=_require(n, "server_id", "upstreams"),
                endpoint=_require(n, "endpoint", "upstreams"),
                identity_key=n.get("identity_key", ""),
            )
            for n in doc.get("upstreams") or []
        )
        pol = doc.get("policy") or {}
        policy = PolicyConfig(
            clients=tuple(
                ClientConfig(
                    client_id=_require(c, "client_id", "policy.clients"),
                    public_key=_require(c, "public_key", "policy.clients"),
                    subject=_require(c, "subject", "policy.clients"),
                )
                for c in pol.get("clients") or []
            ),
            entitlements={
                subject: tuple(scopes) for subject, scopes in (pol.get("entitlements") or {}).items()
            },
            grant_default_ttl=float(pol.get("grant_default_ttl", 300.0)),
            grant_max_ttl=float(pol.get("grant_max_ttl", 900.0)),
            recert_period_days=float(pol.get("recert_period_days", 90.0)),
            block_recert_due=bool(pol.get("block_recert_due", False)),
            auto_quarantine_risk=float(pol.get("auto_quarantine_risk", 0.5)),
            category_scopes={
                cat: tuple(prefixes)
                for cat, prefixes in (pol.get("category_scopes") or DEFAULT_CATEGORY_SCOPES).items()
            },
            session_context_rules=tuple(pol.get("session_context_rules") or ()),
            trust_roots=dict(pol.get("trust_roots") or {}),
            gateway_key_file=pol.get("gateway_key_file", ""),
        )
        limits_node = doc.get("limits") or {}
        rate_node = dict(limits_node.get("rate") or {})
        default_rate = rate_node.pop("default", None)
        limits = LimitsConfig(
            max_message_bytes=int(limits_node.get("max_message_bytes", 1 * 1024 * 1024)),
            max_string_length=int(limits_node.get("max_string_length", 10_000)),
            upstream_timeout=float(limits_node.get("upstream_timeout", 30.0)),
            pipeline_budget=float(limits_node.get("pipeline_budget", 35.0)),
            rate={
                endpoint: RateParams(float(p["capacity"]), float(p["refill"]))
                for endpoint, p in rate_node.items()
            },
            rate_default=(
                RateParams(float(default_rate["capacity"]), float(default_rate["refill"]))
                if default_rate
                else RateParams(capacity=120, refill=2.0)
            ),
        )
        audit_node = doc.get("audit") or {}
        audit = AuditConfig(
            store=audit_node.get("store", "memory"),
            retention_days=int(audit_node.get("retention_days", 365)),
        )
        return GatewayConfig(
            listeners=listeners,
            upstreams=upstreams,
            policy=policy,
            rules=doc.get("rules", "builtin"),
            schemas=doc.get("schemas", "builtin"),
            egress=_egress_from(doc.get("egress")),
            limits=limits,
            audit=audit,
            registry_store=doc.get("registry_store", ""),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def load_config(path: str | Path) -> GatewayConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"configuration file {p} does not exist")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"configuration is not valid YAML: {exc}") from None
    return from_dict(doc or {})

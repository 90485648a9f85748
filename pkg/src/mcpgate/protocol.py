"""MCP ingress protocol layer: JSON-RPC 2.0 parsing, strict schema
validation, Unicode normalization, and cross-field consistency checks.

Validation is reject-by-default: unknown methods, unknown fields at any
nesting depth, and type mismatches all fail. Schemas are data (see
``SchemaRegistry.load``), so the supported method set grows without code
changes.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterable, Mapping

import yaml

DEFAULT_MAX_MESSAGE_BYTES = 1 * 1024 * 1024
DEFAULT_MAX_STRING_LENGTH = 10_000

SUPPORTED_METHODS = (
    "initialize",
    "tools/list",
    "tools/call",
    "resources/read",
    "prompts/get",
)

#: Schema-registry key used for server responses, which carry no method.
RESPONSE_KEY = "response"

_TOP_LEVEL_KEYS = frozenset({"jsonrpc", "id", "method", "params", "result", "error"})
_ERROR_KEYS = frozenset({"code", "message", "data"})


class ProtocolError(Exception):
    """Base class for ingress protocol failures."""


class MalformedJson(ProtocolError):
    pass


class ProtocolViolation(ProtocolError):
    pass


class Oversize(ProtocolError):
    pass


class UnknownMethod(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# Envelope
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McpEnvelope:
    """A parsed MCP frame. Fields mirror the wire form exactly; no coercion."""

    version: str
    method: str | None
    id: int | str | None
    params: Any
    raw_size: int
    result: Any = None
    error: Any = None

    @property
    def is_response(self) -> bool:
        return self.method is None

    @property
    def is_notification(self) -> bool:
        return self.method is not None and self.id is None

    def schema_key(self) -> str:
        return self.method if self.method is not None else RESPONSE_KEY


def parse_envelope(
    data: bytes,
    max_size: int = DEFAULT_MAX_MESSAGE_BYTES,
    methods: Iterable[str] = SUPPORTED_METHODS,
) -> McpEnvelope:
    """Parse one complete wire frame into an envelope.

    Raises Oversize, MalformedJson, or ProtocolViolation. Size is checked
    before any parsing so oversize frames never reach the JSON decoder.
    """
    raw_size = len(data)
    if raw_size > max_size:
        raise Oversize(f"frame is {raw_size} bytes, limit {max_size}")
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedJson(str(exc)) from None
    if not isinstance(obj, dict):
        raise MalformedJson("top-level value must be a JSON object")

    unknown = set(obj) - _TOP_LEVEL_KEYS
    if unknown:
        raise ProtocolViolation(f"unknown top-level members: {sorted(unknown)}")
    version = obj.get("jsonrpc")
    if version != "2.0":
        raise ProtocolViolation("jsonrpc member must be exactly \"2.0\"")

    msg_id = obj.get("id")
    if msg_id is not None and not isinstance(msg_id, (int, str)):
        raise ProtocolViolation("id must be an integer or string")
    if isinstance(msg_id, bool):
        raise ProtocolViolation("id must be an integer or string")

    method = obj.get("method")
    if method is not None:
        # Request or notification.
        if not isinstance(method, str):
            raise ProtocolViolation("method must be a string")
        if "result" in obj or "error" in obj:
            raise ProtocolViolation("request must not carry result or error")
        if method not in set(methods):
            raise ProtocolViolation(f"method {method!r} is not supported")
        params = obj.get("params")
        if params is not None and not isinstance(params, (dict, list)):
            raise ProtocolViolation("params must be a structured value")
        return McpEnvelope(version, method, msg_id, params, raw_size)

    # Response: id plus exactly one of result / error.
    if "id" not in obj:
        raise ProtocolViolation("frame has neither method nor id")
    has_result = "result" in obj
    has_error = "error" in obj
    if has_result == has_error:
        raise ProtocolViolation("response must carry exactly one of result or error")
    if has_error:
        err = obj["error"]
        if not isinstance(err, dict) or not _ERROR_KEYS.issuperset(err) or "code" not in err:
            raise ProtocolViolation("error member must be {code, message[, data]}")
    return McpEnvelope(
        version, None, msg_id, None, raw_size,
        result=obj.get("result"), error=obj.get("error"),
    )


def serialize_envelope(envelope: McpEnvelope) -> bytes:
    """Inverse of parse_envelope: parse(serialize(e)) == e up to raw_size."""
    obj: dict[str, Any] = {"jsonrpc": envelope.version}
    if envelope.method is not None:
        if envelope.id is not None:
            obj["id"] = envelope.id
        obj["method"] = envelope.method
        if envelope.params is not None:
            obj["params"] = envelope.params
    else:
        obj["id"] = envelope.id
        if envelope.error is not None:
            obj["error"] = envelope.error
        else:
            obj["result"] = envelope.result
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------

FIELD_TYPES = ("string", "integer", "number", "boolean", "object", "array", "any")


class ViolationKind(Enum):
    UNKNOWN_FIELD = "UnknownField"
    TYPE_MISMATCH = "TypeMismatch"
    LENGTH_EXCEEDED = "LengthExceeded"
    RANGE_VIOLATION = "RangeViolation"
    MISSING_REQUIRED = "MissingRequired"
    ENUM_VIOLATION = "EnumViolation"
    INCONSISTENT = "Inconsistent"


@dataclass(frozen=True)
class Violation:
    path: str
    kind: ViolationKind
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def merged(self, other: "ValidationReport") -> "ValidationReport":
        return ValidationReport(self.violations + other.violations)


@dataclass(frozen=True)
class FieldSpec:
    """One declared field. ``fields`` nests child specs for objects; ``item``
    constrains array elements. Length limits double as item-count limits."""

    name: str
    type: str = "string"
    required: bool = False
    min_length: int | None = None
    max_length: int | None = None
    minimum: float | None = None
    maximum: float | None = None
    enum: tuple[Any, ...] | None = None
    case_insensitive: bool = False
    fields: tuple["FieldSpec", ...] = ()
    item: "FieldSpec | None" = None

    def __post_init__(self):
        if self.type not in FIELD_TYPES:
            raise ValueError(f"unknown field type {self.type!r}")
        for limit in (self.min_length, self.max_length):
            if limit is not None and limit < 0:
                raise ValueError("length limits must be non-negative and finite")

    def child(self, name: str) -> "FieldSpec | None":
        for spec in self.fields:
            if spec.name == name:
                return spec
        return None


@dataclass(frozen=True)
class MessageSchema:
    """Constraints for one method's params tree."""

    method: str
    fields: tuple[FieldSpec, ...] = ()
    params_required: bool = False

    def child(self, name: str) -> FieldSpec | None:
        for spec in self.fields:
            if spec.name == name:
                return spec
        return None

    def with_fields(self, extra: Mapping[str, tuple[FieldSpec, ...]]) -> "MessageSchema":
        """Return a copy where named object fields gain the given children.

        Used by the gateway to graft a tool's declared argument schema onto
        the generic tools/call schema before validating an invocation.
        """
        new_fields = []
        for spec in self.fields:
            if spec.name in extra:
                spec = replace(spec, fields=spec.fields + tuple(extra[spec.name]))
            new_fields.append(spec)
        return replace(self, fields=tuple(new_fields))


_TYPE_CHECKS: dict[str, Callable[[Any], bool]] = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "any": lambda v: True,
}


def validate(
    envelope: McpEnvelope,
    schema: MessageSchema,
    max_string_length: int = DEFAULT_MAX_STRING_LENGTH,
) -> ValidationReport:
    """Check an envelope's params against a schema, recursively.

    Report-only: the envelope is never mutated. Every violation found is
    listed; unknown fields are reported at the shallowest undeclared path.
    """
    violations: list[Violation] = []
    params = envelope.params
    if params is None:
        if envelope.is_response:
            return ValidationReport()
        if schema.params_required or any(f.required for f in schema.fields):
            violations.append(Violation("params", ViolationKind.MISSING_REQUIRED, "params object absent"))
        return ValidationReport(tuple(violations))
    if not isinstance(params, dict):
        return ValidationReport(
            (Violation("params", ViolationKind.TYPE_MISMATCH, "params must be an object"),)
        )
    _validate_object(params, schema.fields, "params", violations, max_string_length)
    return ValidationReport(tuple(violations))


def _validate_object(
    obj: dict,
    specs: tuple[FieldSpec, ...],
    path: str,
    out: list[Violation],
    max_string_length: int,
) -> None:
    declared = {s.name: s for s in specs}
    for key, value in obj.items():
        spec = declared.get(key)
        if spec is None:
            out.append(Violation(f"{path}.{key}", ViolationKind.UNKNOWN_FIELD, "field not declared in schema"))
            continue
        _validate_value(value, spec, f"{path}.{key}", out, max_string_length)
    for spec in specs:
        if spec.required and spec.name not in obj:
            out.append(Violation(f"{path}.{spec.name}", ViolationKind.MISSING_REQUIRED, "required field absent"))


def _validate_value(
    value: Any,
    spec: FieldSpec,
    path: str,
    out: list[Violation],
    max_string_length: int,
) -> None:
    if spec.type == "any":
        return
    if not _TYPE_CHECKS[spec.type](value):
        out.append(Violation(path, ViolationKind.TYPE_MISMATCH, f"expected {spec.type}, got {type(value).__name__}"))
        return
    if spec.type == "string":
        cap = spec.max_length if spec.max_length is not None else max_string_length
        if len(value) > cap:
            out.append(Violation(path, ViolationKind.LENGTH_EXCEEDED, f"string length {len(value)} exceeds {cap}"))
        if spec.min_length is not None and len(value) < spec.min_length:
            out.append(Violation(path, ViolationKind.LENGTH_EXCEEDED, f"string length {len(value)} below minimum {spec.min_length}"))
        if spec.enum is not None and value not in spec.enum:
            out.append(Violation(path, ViolationKind.ENUM_VIOLATION, f"value not in allowlist"))
    elif spec.type in ("integer", "number"):
        if spec.minimum is not None and value < spec.minimum:
            out.append(Violation(path, ViolationKind.RANGE_VIOLATION, f"{value} below minimum {spec.minimum}"))
        if spec.maximum is not None and value > spec.maximum:
            out.append(Violation(path, ViolationKind.RANGE_VIOLATION, f"{value} above maximum {spec.maximum}"))
        if spec.enum is not None and value not in spec.enum:
            out.append(Violation(path, ViolationKind.ENUM_VIOLATION, "value not in allowlist"))
    elif spec.type == "object":
        _validate_object(value, spec.fields, path, out, max_string_length)
    elif spec.type == "array":
        if spec.max_length is not None and len(value) > spec.max_length:
            out.append(Violation(path, ViolationKind.LENGTH_EXCEEDED, f"{len(value)} items exceed {spec.max_length}"))
        if spec.min_length is not None and len(value) < spec.min_length:
            out.append(Violation(path, ViolationKind.LENGTH_EXCEEDED, f"{len(value)} items below minimum {spec.min_length}"))
        item = spec.item or FieldSpec(name="item", type="any")
        for i, element in enumerate(value):
            _validate_value(element, item, f"{path}.{i}", out, max_string_length)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def _strip_invisible(text: str) -> str:
    # Unicode Cf (format) characters: zero-width spaces/joiners, BOM,
    # directional overrides. Common obfuscation vehicles inside keywords.
    return "".join(ch for ch in text if unicodedata.category(ch) != "Cf")


def normalize(text: str, case_fold: bool = False, strip_invisible: bool = True) -> str:
    """Canonicalize text: NFC, optional case folding, invisible-char removal.

    Idempotent: normalize(normalize(x)) == normalize(x) for all arguments.
    """
    if strip_invisible:
        text = _strip_invisible(text)
    text = unicodedata.normalize("NFC", text)
    if case_fold:
        text = unicodedata.normalize("NFC", text.casefold())
    return text


def normalize_envelope(envelope: McpEnvelope, schema: MessageSchema) -> McpEnvelope:
    """Return a copy whose string params are normalized. Case folding is
    applied only to fields the schema marks case-insensitive."""
    if not isinstance(envelope.params, dict):
        return envelope

    def walk(value: Any, specs: tuple[FieldSpec, ...]) -> Any:
        if not isinstance(value, dict):
            return value
        declared = {s.name: s for s in specs}
        out = {}
        for key, val in value.items():
            spec = declared.get(key)
            if isinstance(val, str):
                out[key] = normalize(val, case_fold=bool(spec and spec.case_insensitive))
            elif isinstance(val, dict):
                out[key] = walk(val, spec.fields if spec else ())
            elif isinstance(val, list):
                item = spec.item if spec else None
                out[key] = [
                    normalize(v, case_fold=bool(item and item.case_insensitive))
                    if isinstance(v, str)
                    else walk(v, item.fields if item else ())
                    for v in val
                ]
            else:
                out[key] = val
        return out

    return replace(envelope, params=walk(envelope.params, schema.fields))


# ---------------------------------------------------------------------------
# Cross-field consistency
# ---------------------------------------------------------------------------

_ABSENT = object()


def resolve_path(envelope: McpEnvelope, path: str) -> Any:
    """Fetch a dotted field path from an envelope; _ABSENT when missing."""
    head, *rest = path.split(".")
    node: Any
    if head == "method":
        node = envelope.method
    elif head == "id":
        node = envelope.id
    elif head == "params":
        node = envelope.params
    elif head == "result":
        node = envelope.result
    else:
        return _ABSENT
    for seg in rest:
        if isinstance(node, dict):
            if seg not in node:
                return _ABSENT
            node = node[seg]
        elif isinstance(node, list) and seg.isdigit() and int(seg) < len(node):
            node = node[int(seg)]
        else:
            return _ABSENT
    return node


@dataclass(frozen=True)
class ConsistencyRule:
    """Predicate over field paths. Skipped when any referenced path is
    absent or when the rule names a different method (documented skip
    semantics: rules constrain values that are present, never presence)."""

    rule_id: str
    paths: tuple[str, ...]
    predicate: Callable[..., bool]
    method: str | None = None
    detail: str = ""


def consistency_check(
    envelope: McpEnvelope, rules: Iterable[ConsistencyRule]
) -> ValidationReport:
    violations: list[Violation] = []
    for rule in rules:
        if rule.method is not None and envelope.method != rule.method:
            continue
        values = [resolve_path(envelope, p) for p in rule.paths]
        if any(v is _ABSENT for v in values):
            continue
        if not rule.predicate(*values):
            violations.append(
                Violation(rule.paths[0], ViolationKind.INCONSISTENT, rule.detail or rule.rule_id)
            )
    return ValidationReport(tuple(violations))


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


class SchemaRegistry:
    """Read-mostly map of method name to MessageSchema. Mutated only at
    configuration load under exclusive access."""

    def __init__(self, schemas: Iterable[MessageSchema] = ()):
        self._schemas: dict[str, MessageSchema] = {s.method: s for s in schemas}

    def register(self, schema: MessageSchema) -> None:
        self._schemas[schema.method] = schema

    def get(self, method: str) -> MessageSchema:
        try:
            return self._schemas[method]
        except KeyError:
            raise UnknownMethod(f"no schema registered for method {method!r}") from None

    def methods(self) -> tuple[str, ...]:
        return tuple(self._schemas)

    def validate_envelope(
        self, envelope: McpEnvelope, max_string_length: int = DEFAULT_MAX_STRING_LENGTH
    ) -> ValidationReport:
        schema = self.get(envelope.schema_key())
        return validate(envelope, schema, max_string_length)

    @classmethod
    def load(cls, text: str) -> "SchemaRegistry":
        """Parse the schema file format: a YAML mapping of method name to
        {params_required, fields}, where each field entry mirrors FieldSpec."""
        doc = yaml.safe_load(text) or {}
        registry = cls()
        for method, body in doc.items():
            body = body or {}
            fields = tuple(
                _field_from_node(name, node) for name, node in (body.get("fields") or {}).items()
            )
            registry.register(
                MessageSchema(
                    method=method,
                    fields=fields,
                    params_required=bool(body.get("params_required", False)),
                )
            )
        return registry

    @classmethod
    def load_path(cls, path) -> "SchemaRegistry":
        from pathlib import Path

        return cls.load(Path(path).read_text())


def _field_from_node(name: str, node: Mapping | None) -> FieldSpec:
    node = node or {}
    children = tuple(
        _field_from_node(child, spec) for child, spec in (node.get("fields") or {}).items()
    )
    item = node.get("item")
    return FieldSpec(
        name=name,
        type=node.get("type", "string"),
        required=bool(node.get("required", False)),
        min_length=node.get("min_length"),
        max_length=node.get("max_length"),
        minimum=node.get("minimum"),
        maximum=node.get("maximum"),
        enum=tuple(node["enum"]) if node.get("enum") is not None else None,
        case_insensitive=bool(node.get("case_insensitive", False)),
        fields=children,
        item=_field_from_node("item", item) if item is not None else None,
    )


def builtin_schema_registry() -> SchemaRegistry:
    """Registry for the supported MCP subset, loaded from packaged data."""
    from importlib import resources

    text = resources.files("mcpgate").joinpath("data/schemas/mcp.yaml").read_text()
    return SchemaRegistry.load(text)

"""Tool-poisoning detection: regex rule scanning over manifest text,
permission-alignment heuristics, risk aggregation, and streaming behavioral
baselines (Welford) with z-score anomaly assessment.

Rules are data (YAML, one record per rule) tagged with a threat category and
a MAESTRO layer; the loaded ruleset carries a version digest so audit events
can cite exactly which rules were active.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

import yaml

from .canonical import digest_of
from .protocol import normalize
from .registry import ToolManifest

DEFAULT_Z_THRESHOLD = 3.0
DEFAULT_WARMUP = 20
MAX_EXCERPT = 256

SEVERITY_WEIGHTS = {"low": 0.2, "medium": 0.5, "high": 0.8, "critical": 0.95}

BASELINE_METRICS = (
    "invocation_rate_per_min",
    "response_size_bytes",
    "error_rate",
    "distinct_argument_keys",
)


class DetectionError(Exception):
    pass


class UnsafePattern(DetectionError):
    """Pattern rejected at load: nested unbounded quantifiers can backtrack
    catastrophically, violating the linear-time scanning contract."""


class UnknownCategory(DetectionError):
    pass


class ThreatCategory(Enum):
    TOOL_POISONING = "ToolPoisoning"
    DATA_EXFILTRATION = "DataExfiltration"
    C2_UPDATE_COMPROMISE = "C2UpdateCompromise"
    IDENTITY_SUBVERSION = "IdentitySubversion"
    DOS = "DoS"
    INSECURE_CONFIGURATION = "InsecureConfiguration"


MAESTRO_LAYERS = ("L1", "L2", "L3", "L4", "L5", "L6", "L7")


class RuleTarget(Enum):
    DESCRIPTION = "description"
    PARAMETER_NAMES = "parameter_names"
    PARAMETER_DESCRIPTIONS = "parameter_descriptions"
    RESPONSE_TEXT = "response_text"


def _assert_linear(pattern: str) -> None:
    """Reject regexes whose parse tree nests an unbounded repeat inside
    another unbounded repeat (the classic catastrophic-backtracking shape)."""
    try:
        from re import _parser as sre_parse  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - older interpreters
        import sre_parse  # type: ignore[no-redef]

    try:
        tree = sre_parse.parse(pattern)
    except re.error as exc:
        raise UnsafePattern(f"pattern does not compile: {exc}") from None

    def unbounded(node) -> bool:
        found = False
        for op, arg in node:
            name = str(op)
            if name in ("MAX_REPEAT", "MIN_REPEAT"):
                _lo, hi, sub = arg
                if hi >= sre_parse.MAXREPEAT - 1:
                    if unbounded(sub):
                        raise UnsafePattern(
                            f"nested unbounded quantifiers in pattern {pattern!r}"
                        )
                    found = True
                else:
                    found = unbounded(sub) or found
            elif name == "SUBPATTERN":
                found = unbounded(arg[3]) or found
            elif name in ("BRANCH",):
                for branch in arg[1]:
                    found = unbounded(branch) or found
            elif name in ("ASSERT", "ASSERT_NOT"):
                found = unbounded(arg[1]) or found
        return found

    unbounded(tree)


@dataclass(frozen=True)
class DetectionRule:
    rule_id: str
    target: RuleTarget
    pattern: str
    severity: str  # low | medium | high | critical
    category: ThreatCategory
    layer: str
    note: str = ""

    def __post_init__(self):
        if self.severity not in SEVERITY_WEIGHTS:
            raise DetectionError(f"unknown severity {self.severity!r}")
        if self.layer not in MAESTRO_LAYERS:
            raise DetectionError(f"unknown layer {self.layer!r}")
        _assert_linear(self.pattern)

    @property
    def weight(self) -> float:
        return SEVERITY_WEIGHTS[self.severity]

    def compiled(self) -> re.Pattern:
        return re.compile(self.pattern, re.IGNORECASE)


@dataclass(frozen=True)
class Finding:
    rule_id: str
    path: str
    span: tuple[int, int]
    weight: float
    category: ThreatCategory
    layer: str
    excerpt: str

    def __post_init__(self):
        if len(self.excerpt) > MAX_EXCERPT:
            object.__setattr__(self, "excerpt", self.excerpt[:MAX_EXCERPT])

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "path": self.path,
            "span": list(self.span),
            "weight": self.weight,
            "category": self.category.value,
            "layer": self.layer,
            "excerpt": self.excerpt,
        }


class RuleSet:
    """Compiled detection rules plus a version digest over their canonical
    form. Hot-reloadable: build a new RuleSet and swap the reference."""

    def __init__(self, rules: Iterable[DetectionRule]):
        self.rules = tuple(rules)
        self._compiled = [(rule, rule.compiled()) for rule in self.rules]
        self.version_digest = digest_of(
            [
                {
                    "rule_id": r.rule_id,
                    "target": r.target.value,
                    "pattern": r.pattern,
                    "severity": r.severity,
                    "category": r.category.value,
                    "layer": r.layer,
                }
                for r in self.rules
            ]
        ).hex()

    def __len__(self) -> int:
        return len(self.rules)

    def for_target(self, target: RuleTarget) -> list[tuple[DetectionRule, re.Pattern]]:
        return [(r, p) for r, p in self._compiled if r.target is target]

    @classmethod
    def load(cls, text: str) -> "RuleSet":
        doc = yaml.safe_load(text) or []
        rules = []
        for node in doc:
            rules.append(
                DetectionRule(
                    rule_id=node["rule_id"],
                    target=RuleTarget(node.get("target", "description")),
                    pattern=node["pattern"],
                    severity=node["severity"],
                    category=ThreatCategory(node["category"]),
                    layer=node["layer"],
                    note=node.get("note", ""),
                )
            )
        return cls(rules)

    @classmethod
    def load_path(cls, path) -> "RuleSet":
        from pathlib import Path

        return cls.load(Path(path).read_text())


def base_ruleset() -> RuleSet:
    """The ruleset shipped with the package."""
    from importlib import resources

    text = resources.files("mcpgate").joinpath("data/rules/base.yaml").read_text()
    return RuleSet.load(text)


def load_corpus(name: str) -> list[ToolManifest]:
    """Load a shipped scan corpus ("malicious" or "benign"): one manifest
    per YAML file, in filename order."""
    from importlib import resources

    directory = resources.files("mcpgate").joinpath(f"data/corpus/{name}")
    manifests = []
    for entry in sorted(directory.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".yaml"):
            manifests.append(ToolManifest.from_dict(yaml.safe_load(entry.read_text())))
    return manifests


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------


def _scan_field(
    text: str,
    path: str,
    pairs: list[tuple[DetectionRule, re.Pattern]],
    out: list[Finding],
) -> None:
    # Normalization first: NFC plus invisible-character stripping defeats
    # zero-width obfuscation inside keywords before the plain rules run.
    cleaned = normalize(text)
    for rule, compiled in pairs:
        for match in compiled.finditer(cleaned):
            out.append(
                Finding(
                    rule_id=rule.rule_id,
                    path=path,
                    span=match.span(),
                    weight=rule.weight,
                    category=rule.category,
                    layer=rule.layer,
                    excerpt=match.group(0),
                )
            )


def scan_manifest(manifest: ToolManifest, rules: RuleSet) -> list[Finding]:
    """Run every rule against its target fields; one Finding per match.
    Read-only: neither the manifest nor the ruleset is modified."""
    findings: list[Finding] = []
    _scan_field(manifest.description, "description", rules.for_target(RuleTarget.DESCRIPTION), findings)
    name_rules = rules.for_target(RuleTarget.PARAMETER_NAMES)
    desc_rules = rules.for_target(RuleTarget.PARAMETER_DESCRIPTIONS)
    for name, spec in manifest.parameters.items():
        _scan_field(name, f"parameters.{name}", name_rules, findings)
        param_desc = str(spec.get("description", "")) if isinstance(spec, Mapping) else ""
        if param_desc:
            _scan_field(param_desc, f"parameters.{name}.description", desc_rules, findings)
    return findings


def scan_text(text: str, rules: RuleSet, path: str = "response") -> list[Finding]:
    """Scan free-form runtime text (tool responses, argument values) with the
    response-text rules."""
    findings: list[Finding] = []
    _scan_field(text, path, rules.for_target(RuleTarget.RESPONSE_TEXT), findings)
    return findings


def check_permission_alignment(
    manifest: ToolManifest, category_scope_map: Mapping[str, Iterable[str]]
) -> list[Finding]:
    """Cross-reference requested scopes against the tool's declared category.
    Every scope whose first segment is not allowed for the category yields a
    Medium ToolPoisoning finding at layer L3."""
    if manifest.category not in category_scope_map:
        raise UnknownCategory(f"category {manifest.category!r} has no scope policy")
    allowed = set(category_scope_map[manifest.category])
    findings = []
    for scope in manifest.requested_scopes:
        prefix = scope.split(":", 1)[0]
        if prefix not in allowed:
            findings.append(
                Finding(
                    rule_id="policy.permission_alignment",
                    path="requested_scopes",
                    span=(0, len(scope)),
                    weight=SEVERITY_WEIGHTS["medium"],
                    category=ThreatCategory.TOOL_POISONING,
                    layer="L3",
                    excerpt=scope,
                )
            )
    return findings


_URL_RE = re.compile(r"https?://", re.IGNORECASE)


def heuristic_findings(
    manifest: ToolManifest,
    max_description_chars: int = 2000,
    flag_urls: bool = True,
) -> list[Finding]:
    """Structural heuristics beyond pattern rules: outlier description length
    and embedded URLs (a common exfiltration staging sign)."""
    findings: list[Finding] = []
    desc = manifest.description
    if len(desc) > max_description_chars:
        findings.append(
            Finding(
                rule_id="heuristic.description_length",
                path="description",
                span=(0, len(desc)),
                weight=SEVERITY_WEIGHTS["low"],
                category=ThreatCategory.TOOL_POISONING,
                layer="L3",
                excerpt=f"description is {len(desc)} chars",
            )
        )
    if flag_urls:
        match = _URL_RE.search(normalize(desc))
        if match:
            findings.append(
                Finding(
                    rule_id="heuristic.url_in_description",
                    path="description",
                    span=match.span(),
                    weight=SEVERITY_WEIGHTS["low"],
                    category=ThreatCategory.DATA_EXFILTRATION,
                    layer="L2",
                    excerpt=match.group(0),
                )
            )
    return findings


def risk_score(findings: Iterable[Finding]) -> float:
    """Aggregate finding weights: 1 - prod(1 - w). Empty input scores 0;
    adding a finding never lowers the score."""
    score = 1.0
    for finding in findings:
        score *= 1.0 - finding.weight
    return 1.0 - score


def findings_digest(findings: Iterable[Finding]) -> str:
    return digest_of([f.to_dict() for f in findings]).hex()


# ---------------------------------------------------------------------------
# Behavioral baselining
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    """Welford accumulator: numerically stable single-pass mean/variance."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, value: float) -> None:
        self.n += 1
        delta = value - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (value - self.mean)

    @property
    def variance(self) -> float | None:
        """Sample variance; undefined below two observations."""
        if self.n < 2:
            return None
        return self.m2 / (self.n - 1)

    @property
    def stddev(self) -> float | None:
        var = self.variance
        return math.sqrt(var) if var is not None else None


@dataclass
class ToolBaseline:
    """Per-tool running statistics for the monitored runtime metrics."""

    tool_id: str
    stats: dict[str, RunningStats] = field(default_factory=dict)

    def metric(self, name: str) -> RunningStats:
        if name not in self.stats:
            self.stats[name] = RunningStats()
        return self.stats[name]


@dataclass(frozen=True)
class AnomalyReport:
    tool_id: str
    metric: str
    observed: float
    z_score: float
    anomalous: bool


def observe(baseline: ToolBaseline, metric: str, value: float) -> ToolBaseline:
    if not math.isfinite(value):
        raise ValueError("observed value must be finite")
    baseline.metric(metric).update(value)
    return baseline


def assess(
    baseline: ToolBaseline,
    metric: str,
    value: float,
    threshold: float = DEFAULT_Z_THRESHOLD,
    warmup: int = DEFAULT_WARMUP,
) -> AnomalyReport:
    """Standardized-deviation check. Alert-free during warmup and on
    zero-variance baselines; no division blow-ups."""
    stats = baseline.metric(metric)
    sd = stats.stddev
    if stats.n < warmup or sd is None or sd == 0.0:
        return AnomalyReport(baseline.tool_id, metric, value, 0.0, False)
    z = (value - stats.mean) / sd
    return AnomalyReport(baseline.tool_id, metric, value, z, abs(z) > threshold)

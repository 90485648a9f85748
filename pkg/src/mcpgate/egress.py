"""Response filtering before anything reaches the client: sensitive-data
redaction (Luhn-gated PANs, SSNs, emails, entropy-gated secrets), response
size alerts, and internal-disclosure scrubbing of error text.

Redaction applies detectors left-to-right, non-overlapping, longest match
first, and is idempotent: replacement labels never re-trigger a detector.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

DEFAULT_SIZE_ALERT_BYTES = 1 * 1024 * 1024
DEFAULT_ENTROPY_THRESHOLD = 4.0  # bits per character
MIN_ENTROPY_WINDOW = 16

_LABEL_RE = re.compile(r"^\[REDACTED:[A-Z0-9_]+\]$")

DETECTOR_KINDS = ("regex", "regex+checksum", "regex+entropy")


@dataclass(frozen=True)
class Detector:
    detector_id: str
    kind: str
    pattern: str
    label: str
    entropy_threshold: float = DEFAULT_ENTROPY_THRESHOLD
    min_digits: int = 0

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if not _LABEL_RE.match(self.label):
            raise ValueError("replacement labels must look like [REDACTED:<TYPE>]")


@dataclass(frozen=True)
class RedactionPolicy:
    detectors: tuple[Detector, ...]
    size_alert_bytes: int = DEFAULT_SIZE_ALERT_BYTES
    scrub_stack_traces: bool = True
    block_mode: bool = False  # report-and-forward by default


@dataclass
class RedactionReport:
    counts: dict[str, int] = field(default_factory=dict)
    size_alert: bool = False
    original_size: int = 0
    final_size: int = 0

    @property
    def total_redactions(self) -> int:
        return sum(self.counts.values())


# ---------------------------------------------------------------------------
# Checksums and entropy
# ---------------------------------------------------------------------------


def luhn_valid(digits: str) -> bool:
    """Luhn checksum over a digit string (no separators)."""
    if not digits.isdigit() or len(digits) < 2:
        return False
    total = 0
    for i, ch in enumerate(reversed(digits)):
        d = ord(ch) - 48
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def shannon_entropy(text: str) -> float:
    """Bits per character of the empirical character distribution."""
    if not text:
        return 0.0
    counts = Counter(text)
    n = len(text)
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


_B64ISH_RE = re.compile(r"^[A-Za-z0-9+/=_\-]+$")
_HEXISH_RE = re.compile(r"^[0-9a-fA-F]+$")


def _secret_like_charset(token: str) -> bool:
    return bool(_B64ISH_RE.match(token) or _HEXISH_RE.match(token))


def entropy_flag(
    token: str,
    window: int = 32,
    threshold: float = DEFAULT_ENTROPY_THRESHOLD,
) -> bool:
    """True iff some window of the token has character-distribution entropy
    at or above the threshold and the token's charset is base64/hex-like."""
    if window < MIN_ENTROPY_WINDOW:
        raise ValueError(f"window must be at least {MIN_ENTROPY_WINDOW}")
    if not token or not _secret_like_charset(token):
        return False
    if len(token) <= window:
        return shannon_entropy(token) >= threshold
    return any(
        shannon_entropy(token[i : i + window]) >= threshold
        for i in range(0, len(token) - window + 1)
    )


# ---------------------------------------------------------------------------
# Default detector set
# ---------------------------------------------------------------------------

PAN_CANDIDATE = r"(?<![\d-])(?:\d[ -]?){12,18}\d(?![\d-])"
SSN_PATTERN = r"(?<!\d)(?!000|666|9\d\d)\d{3}-(?!00)\d{2}-(?!0000)\d{4}(?!\d)"
EMAIL_PATTERN = r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,}"
# '=' only as trailing base64 padding, so key=VALUE prefixes stay intact.
SECRET_CANDIDATE = r"(?<![A-Za-z0-9+/_\-])[A-Za-z0-9+/_\-]{24,}={0,2}(?![A-Za-z0-9+/=_\-])"


def default_detectors() -> tuple[Detector, ...]:
    return (
        Detector("pan", "regex+checksum", PAN_CANDIDATE, "[REDACTED:PAN]"),
        Detector("ssn", "regex", SSN_PATTERN, "[REDACTED:SSN]"),
        Detector("email", "regex", EMAIL_PATTERN, "[REDACTED:EMAIL]"),
        Detector(
            "secret",
            "regex+entropy",
            SECRET_CANDIDATE,
            "[REDACTED:SECRET]",
            min_digits=2,
        ),
    )


def default_policy(**overrides) -> RedactionPolicy:
    return RedactionPolicy(detectors=default_detectors(), **overrides)


# ---------------------------------------------------------------------------
# Redaction
# ---------------------------------------------------------------------------


def _candidate_valid(detector: Detector, matched: str) -> bool:
    if detector.kind == "regex":
        return True
    if detector.kind == "regex+checksum":
        digits = re.sub(r"[ -]", "", matched)
        return 13 <= len(digits) <= 19 and luhn_valid(digits)
    # regex+entropy: secret-like token gated on entropy and digit content.
    if sum(ch.isdigit() for ch in matched) < detector.min_digits:
        return False
    return entropy_flag(matched, threshold=detector.entropy_threshold)


def redact(text: str, policy: RedactionPolicy) -> tuple[str, RedactionReport]:
    """Replace every detector match with its label. Matches are resolved
    left-to-right and never overlap; the longer match wins ties."""
    spans: list[tuple[int, int, Detector]] = []
    for detector in policy.detectors:
        for match in re.finditer(detector.pattern, text):
            if _candidate_valid(detector, match.group(0)):
                spans.append((match.start(), match.end(), detector))
    spans.sort(key=lambda s: (s[0], -(s[1] - s[0])))

    report = RedactionReport(original_size=len(text.encode("utf-8")))
    pieces: list[str] = []
    cursor = 0
    for start, end, detector in spans:
        if start < cursor:
            # Overlaps an already-replaced region: absorb the tail so no
            # fragment of a sensitive candidate survives the rewrite.
            cursor = max(cursor, end)
            continue
        pieces.append(text[cursor:start])
        pieces.append(detector.label)
        report.counts[detector.detector_id] = report.counts.get(detector.detector_id, 0) + 1
        cursor = end
    pieces.append(text[cursor:])
    redacted = "".join(pieces)
    report.final_size = len(redacted.encode("utf-8"))
    report.size_alert = report.original_size > policy.size_alert_bytes
    return redacted, report


def check_size(size: int, policy: RedactionPolicy, anomaly=None) -> bool:
    """Size alert: strict static threshold, or the per-tool statistical
    check flagged the response-size metric."""
    if size > policy.size_alert_bytes:
        return True
    return bool(anomaly is not None and getattr(anomaly, "anomalous", False))


# ---------------------------------------------------------------------------
# Information-disclosure scrubbing
# ---------------------------------------------------------------------------

_FRAME_PATTERNS = (
    re.compile(r"^\s*File \".*\", line \d+"),                     # CPython frames
    re.compile(r"^\s+at [\w$.<>\[\]/\\\-]+\(.*\)\s*$"),           # JVM: at sym(file:line)
    re.compile(r"^\s+at (\S+ )?\(?[^()\s]+:\d+(:\d+)?\)?\s*$"),   # Node frames
    re.compile(r"^Traceback \(most recent call last\):"),
    re.compile(r"^thread '.*' panicked at"),
    re.compile(r"^(stack backtrace:|goroutine \d+|panic:)"),
)

_ABS_PATH_RE = re.compile(r"(?<![\w:/])(?:/[A-Za-z0-9_][A-Za-z0-9_.\-]*){2,}|[A-Za-z]:\\[^\s:\"]+")


def scrub_disclosure(error_text: str) -> str:
    """Replace stack frames and absolute filesystem paths with [INTERNAL].
    Consecutive frame lines collapse into one block; everything else is
    preserved verbatim."""
    out: list[str] = []
    prev_internal = False
    for line in error_text.splitlines():
        is_frame = any(p.match(line) for p in _FRAME_PATTERNS)
        # Indented continuation of a frame (e.g. the source line CPython
        # prints under each File line) belongs to the same block.
        if not is_frame and prev_internal and line[:1] in (" ", "\t") and line.strip():
            is_frame = True
        if is_frame:
            if not prev_internal:
                out.append("[INTERNAL]")
            prev_internal = True
            continue
        prev_internal = False
        out.append(_ABS_PATH_RE.sub("[INTERNAL]", line))
    scrubbed = "\n".join(out)
    if error_text.endswith("\n") and scrubbed:
        scrubbed += "\n"
    return scrubbed

"""Deterministic serialization shared by signing, digests, and the audit chain.

Canonical form: JSON with lexicographically sorted keys, no insignificant
whitespace, all strings NFC-normalized, UTF-8 encoded. Equal values always
produce equal bytes, so signatures and digests are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import unicodedata
from typing import Any


def nfc(value: Any) -> Any:
    """Recursively NFC-normalize every string in a JSON-like value."""
    if isinstance(value, str):
        return unicodedata.normalize("NFC", value)
    if isinstance(value, dict):
        return {nfc(k): nfc(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [nfc(v) for v in value]
    return value


def canonical_json_bytes(value: Any) -> bytes:
    return json.dumps(
        nfc(value),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_of(value: Any) -> bytes:
    """256-bit digest of the canonical form of a JSON-like value."""
    return sha256(canonical_json_bytes(value))

"""Ed25519 signing helpers used for manifests, grants, and identity proofs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


@dataclass(frozen=True)
class SigningKey:
    key_id: str
    _private: Ed25519PrivateKey = field(repr=False)

    @classmethod
    def generate(cls, key_id: str) -> "SigningKey":
        return cls(key_id, Ed25519PrivateKey.generate())

    @classmethod
    def from_seed(cls, key_id: str, seed: bytes) -> "SigningKey":
        if len(seed) != 32:
            raise ValueError("seed must be exactly 32 bytes")
        return cls(key_id, Ed25519PrivateKey.from_private_bytes(seed))

    def sign(self, data: bytes) -> bytes:
        return self._private.sign(data)

    def public_bytes(self) -> bytes:
        from cryptography.hazmat.primitives import serialization

        return self._private.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    def seed_bytes(self) -> bytes:
        from cryptography.hazmat.primitives import serialization

        return self._private.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )


def verify_signature(public: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, data)
        return True
    except (InvalidSignature, ValueError):
        return False


def save_key(key: SigningKey, path: str | Path) -> None:
    """Write a key file: JSON with key_id, hex seed, and hex public key."""
    record = {
        "key_id": key.key_id,
        "secret": key.seed_bytes().hex(),
        "public": key.public_bytes().hex(),
    }
    p = Path(path)
    p.write_text(json.dumps(record, indent=2) + "\n")
    try:
        os.chmod(p, 0o600)
    except OSError:
        pass


def load_key(path: str | Path) -> SigningKey:
    record = json.loads(Path(path).read_text())
    return SigningKey.from_seed(record["key_id"], bytes.fromhex(record["secret"]))


def load_public_key(path: str | Path) -> tuple[str, bytes]:
    record = json.loads(Path(path).read_text())
    return record["key_id"], bytes.fromhex(record["public"])

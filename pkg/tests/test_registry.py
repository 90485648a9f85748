import random

import pytest

from conftest import make_manifest
from mcpgate.registry import (
    DigestMismatch,
    InvalidManifest,
    LifecycleState,
    MissingReview,
    NotSubmitted,
    RegistryStore,
    ReviewRecord,
    SignatureInvalid,
    SignedManifest,
    ToolRegistry,
    TrustRoots,
    UnknownSigner,
    UnknownTool,
    UntrustedSigner,
    VerificationFailed,
    canonical_bytes,
    load_registry,
    sign_manifest,
    verify_manifest,
)
from mcpgate.signing import SigningKey

REVIEW = ReviewRecord(reviewer="sec", findings_digest="ab" * 32)


@pytest.fixture
def roots(signer):
    return TrustRoots({signer.key_id: signer.public_bytes()})


@pytest.fixture
def registry(signer, roots):
    return ToolRegistry(roots, recert_period=90 * 86400.0)


class TestCanonicalBytes:
    def test_field_order_irrelevant(self, manifest):
        reordered = make_manifest(
            parameters=dict(reversed(list(manifest.parameters.items())))
        )
        assert canonical_bytes(manifest) == canonical_bytes(reordered)

    def test_scope_difference_changes_bytes(self, manifest):
        other = make_manifest(requested_scopes=("network:http.post",))
        assert canonical_bytes(manifest) != canonical_bytes(other)

    def test_nfd_and_nfc_descriptions_agree(self):
        nfd = make_manifest(description="café")
        nfc = make_manifest(description="café")
        assert canonical_bytes(nfd) == canonical_bytes(nfc)

    def test_manifest_invariants(self):
        with pytest.raises(InvalidManifest):
            make_manifest(tool_id="Bad Tool!")
        with pytest.raises(InvalidManifest):
            make_manifest(requested_scopes=())
        with pytest.raises(InvalidManifest):
            make_manifest(requested_scopes=("NOT A SCOPE",))


class TestSignVerify:
    def test_sign_then_verify(self, manifest, signer, roots):
        signed = sign_manifest(manifest, signer, roots)
        verify_manifest(signed, roots)  # no raise

    def test_unknown_signer_at_sign_time(self, manifest, roots):
        outsider = SigningKey.generate("outsider")
        with pytest.raises(UnknownSigner):
            sign_manifest(manifest, outsider, roots)

    def test_rotated_out_signer(self, manifest, signer, roots):
        signed = sign_manifest(manifest, signer, roots)
        roots.remove(signer.key_id)
        with pytest.raises(UntrustedSigner):
            verify_manifest(signed, roots)

    def test_resign_is_deterministic(self, manifest, signer, roots):
        a = sign_manifest(manifest, signer, roots)
        b = sign_manifest(manifest, signer, roots)
        assert a.digest == b.digest
        verify_manifest(b, roots)

    def test_single_bit_flip_fails(self, manifest, signer, roots):
        signed = sign_manifest(manifest, signer, roots)
        data = bytearray(canonical_bytes(manifest))
        rng = random.Random(7)
        for _ in range(64):
            i = rng.randrange(len(data) * 8)
            flipped = bytearray(data)
            flipped[i // 8] ^= 1 << (i % 8)
            with pytest.raises((DigestMismatch, SignatureInvalid)):
                verify_manifest(signed, roots, canonical=bytes(flipped))

    def test_tampered_manifest_digest_mismatch(self, manifest, signer, roots):
        signed = sign_manifest(manifest, signer, roots)
        tampered = SignedManifest(
            manifest=make_manifest(description="changed"),
            signer_id=signed.signer_id,
            signature=signed.signature,
            digest=signed.digest,
        )
        with pytest.raises(DigestMismatch):
            verify_manifest(tampered, roots)

    def test_wire_round_trip(self, manifest, signer, roots):
        signed = sign_manifest(manifest, signer, roots)
        again = SignedManifest.from_dict(signed.to_dict())
        assert again == signed
        verify_manifest(again, roots)


class TestLifecycle:
    def test_submit_then_approve(self, registry, manifest, signer, roots):
        signed = sign_manifest(manifest, signer, roots)
        entry = registry.submit(signed, now=100.0)
        assert entry.state is LifecycleState.SUBMITTED
        approved = registry.approve(entry.key, REVIEW, now=200.0)
        assert approved.state is LifecycleState.APPROVED
        assert approved.recert_deadline == 200.0 + 90 * 86400.0

    def test_approve_requires_review(self, registry, manifest, signer, roots):
        signed = sign_manifest(manifest, signer, roots)
        entry = registry.submit(signed)
        with pytest.raises(MissingReview):
            registry.approve(entry.key, None, now=1.0)
        with pytest.raises(MissingReview):
            registry.approve(entry.key, ReviewRecord("sec", findings_digest=""), now=1.0)

    def test_approve_unsigned_fails_verification(self, registry, manifest, roots):
        rogue = SigningKey.generate("rogue")
        from mcpgate.canonical import sha256

        data = canonical_bytes(manifest)
        fake = SignedManifest(manifest, rogue.key_id, rogue.sign(data), sha256(data))
        entry = registry.submit(fake)
        with pytest.raises(VerificationFailed):
            registry.approve(entry.key, REVIEW, now=1.0)

    def test_second_approve_not_submitted(self, registry, manifest, signer, roots):
        entry = registry.submit(sign_manifest(manifest, signer, roots))
        registry.approve(entry.key, REVIEW, now=1.0)
        with pytest.raises(NotSubmitted):
            registry.approve(entry.key, REVIEW, now=2.0)

    def test_quarantine_any_state_and_idempotent(self, registry, manifest, signer, roots):
        entry = registry.submit(sign_manifest(manifest, signer, roots))
        registry.quarantine(entry.key, "suspicious", now=1.0)
        again = registry.quarantine(entry.key, "suspicious", now=2.0)
        assert again.state is LifecycleState.QUARANTINED
        with pytest.raises(NotSubmitted):
            registry.approve(entry.key, REVIEW, now=3.0)

    def test_quarantine_unknown_tool(self, registry):
        with pytest.raises(UnknownTool):
            registry.quarantine("alpha:nope", "x", now=1.0)

    def test_recertification_tick(self, registry, signer, roots):
        period = registry.recert_period
        early = registry.submit(sign_manifest(make_manifest(tool_id="early"), signer, roots))
        late = registry.submit(sign_manifest(make_manifest(tool_id="late"), signer, roots))
        registry.approve(early.key, REVIEW, now=0.0)
        registry.approve(late.key, REVIEW, now=10.0)
        assert registry.tick_recertification(now=period - 1.0) == []
        moved = registry.tick_recertification(now=period + 1.0)
        assert moved == ["alpha:early"]
        assert registry.get("alpha:early").state is LifecycleState.RECERTIFICATION_DUE
        assert registry.get("alpha:late").state is LifecycleState.APPROVED
        # overdue tools stay invocable (audit-flagged by the gateway)
        assert registry.invocable("alpha:early")

    def test_empty_registry_tick(self, registry):
        assert registry.tick_recertification(now=1e9) == []

    def test_namespaced_lookup(self, registry, signer, roots):
        registry.submit(sign_manifest(make_manifest(tool_id="search", server_id="alpha"), signer, roots))
        registry.submit(sign_manifest(make_manifest(tool_id="search", server_id="beta"), signer, roots))
        assert registry.get("alpha:search").signed.manifest.server_id == "alpha"
        assert registry.get("beta:search").signed.manifest.server_id == "beta"
        with pytest.raises(UnknownTool):
            registry.get("search")  # ambiguous bare id


class TestRoot:
    def test_empty_root_constant(self, registry):
        import hashlib

        assert registry.root().entries_digest == hashlib.sha256(b"").digest()
        assert registry.root().count == 0

    def test_append_changes_root(self, registry, manifest, signer, roots):
        before = registry.root()
        registry.submit(sign_manifest(manifest, signer, roots))
        after = registry.root()
        assert before != after and after.count == 1

    def test_mutation_changes_root(self, registry, manifest, signer, roots):
        entry = registry.submit(sign_manifest(manifest, signer, roots))
        recorded = registry.recorded_root
        assert registry.root() == recorded
        object.__setattr__(entry.signed.manifest, "description", "tampered")
        assert registry.root() != recorded

    def test_order_sensitivity(self, signer, roots):
        a = sign_manifest(make_manifest(tool_id="a"), signer, roots)
        b = sign_manifest(make_manifest(tool_id="b"), signer, roots)
        r1 = ToolRegistry(roots)
        r1.submit(a), r1.submit(b)
        r2 = ToolRegistry(roots)
        r2.submit(b), r2.submit(a)
        assert r1.root() != r2.root()

    def test_audit_registry_reports_tamper(self, registry, manifest, signer, roots):
        entry = registry.submit(sign_manifest(manifest, signer, roots))
        assert registry.audit_registry() == []
        object.__setattr__(entry.signed.manifest, "description", "tampered")
        problems = registry.audit_registry()
        assert problems and problems[0][0] == entry.key


class TestStore:
    def test_replay_restores_state(self, tmp_path, signer, roots):
        store = RegistryStore(tmp_path / "registry.jsonl")
        registry = ToolRegistry(roots, store=store)
        entry = registry.submit(sign_manifest(make_manifest(), signer, roots), now=5.0)
        registry.approve(entry.key, REVIEW, now=6.0)
        registry.quarantine(entry.key, "drill", now=7.0)

        replayed = load_registry(store, roots)
        again = replayed.get(entry.key)
        assert again.state is LifecycleState.QUARANTINED
        assert again.review == REVIEW
        assert replayed.root() == registry.root()

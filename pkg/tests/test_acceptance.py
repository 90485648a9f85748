"""Acceptance criteria, one test per criterion, at the stated tolerances.

Run with `pytest tests/test_acceptance.py -s` to see one PASS line per
criterion; any failure is a hard test failure.
"""

import json
import math
import random
import time

import numpy as np
import pytest

from conftest import make_manifest
from mcpgate.access import (
    AccessGrant,
    DenyReason,
    GrantAuthority,
    GrantPolicy,
    RateLimiter,
    RateParams,
)
from mcpgate.audit import EventKind
from mcpgate.detection import (
    ToolBaseline,
    assess,
    base_ruleset,
    load_corpus,
    observe,
    risk_score,
    scan_manifest,
)
from mcpgate.egress import default_policy, luhn_valid, redact, scrub_disclosure
from mcpgate.gateway import PIPELINE_STAGES
from mcpgate.harness import (
    conforming_envelope,
    inject_unknown_field,
    reference_environment,
    run_all,
    secret_token,
    valid_pan,
)
from mcpgate.protocol import builtin_schema_registry, parse_envelope, validate
from mcpgate.registry import RegistryError, TrustRoots, canonical_bytes, sign_manifest, verify_manifest
from mcpgate.signing import SigningKey

from test_access import bucket_oracle
from test_audit import FIELDS, build_log, mutate
from test_gateway import call_bytes, grant_for, open_session, register_tool


def report(n: int, text: str) -> None:
    print(f"\nPASS criterion {n}: {text}")


def test_criterion_1_unknown_field_rejection():
    registry = builtin_schema_registry()
    methods = [m for m in registry.methods() if m != "response"]
    rng = random.Random(1001)
    started = time.perf_counter()

    rejected = 0
    for i in range(10_000):
        schema = registry.get(methods[i % len(methods)])
        obj = conforming_envelope(schema, rng)
        inject_unknown_field(obj, rng)
        envelope = parse_envelope(json.dumps(obj).encode())
        if not validate(envelope, schema).ok:
            rejected += 1
    accepted = 0
    for i in range(1_000):
        schema = registry.get(methods[i % len(methods)])
        obj = conforming_envelope(schema, rng)
        envelope = parse_envelope(json.dumps(obj).encode())
        if validate(envelope, schema).ok:
            accepted += 1
    elapsed = time.perf_counter() - started

    assert rejected == 10_000, f"only {rejected}/10000 foreign-field envelopes rejected"
    assert accepted == 1_000, f"only {accepted}/1000 conforming envelopes accepted"
    assert elapsed < 10.0, f"took {elapsed:.2f}s"
    report(1, f"10000/10000 rejected, 1000/1000 accepted in {elapsed:.2f}s")


def test_criterion_2_manifest_integrity_bit_flips():
    signer = SigningKey.generate("authority-1")
    roots = TrustRoots({signer.key_id: signer.public_bytes()})
    signed = sign_manifest(make_manifest(), signer, roots)
    data = canonical_bytes(signed.manifest)
    rng = random.Random(1002)
    started = time.perf_counter()
    failures = 0
    for _ in range(1_000):
        bit = rng.randrange(len(data) * 8)
        flipped = bytearray(data)
        flipped[bit // 8] ^= 1 << (bit % 8)
        try:
            verify_manifest(signed, roots, canonical=bytes(flipped))
        except RegistryError:
            failures += 1
    elapsed = time.perf_counter() - started
    assert failures == 1_000, f"{1000 - failures} flipped manifests verified"
    assert elapsed < 5.0, f"took {elapsed:.2f}s"
    report(2, f"1000/1000 single-bit flips rejected in {elapsed:.2f}s")


def test_criterion_3_poisoning_corpus():
    rules = base_ruleset()
    malicious = load_corpus("malicious")
    benign = load_corpus("benign")
    assert len(malicious) >= 20 and len(benign) >= 50
    flagged = 0
    for manifest in malicious:
        findings = scan_manifest(manifest, rules)
        if findings and risk_score(findings) >= 0.5:
            flagged += 1
    benign_findings = sum(len(scan_manifest(m, rules)) for m in benign)
    assert flagged == len(malicious), f"{flagged}/{len(malicious)} malicious flagged"
    assert benign_findings == 0, f"{benign_findings} benign findings"
    report(3, f"{flagged}/{len(malicious)} malicious flagged at risk>=0.5; "
              f"0 findings over {len(benign)} benign")


def test_criterion_4_authorization_decision_table():
    BINDING = "ab" * 32
    policy = GrantPolicy(
        entitlements={"alice": ("tool:search:invoke", "resources:read")},
        audiences=frozenset({"alpha", "beta"}),
    )

    # Expected Decision per the fixed check order:
    # signature -> expiry -> audience -> scope -> revocation -> binding.
    table = {
        ("valid", "before"): None,
        ("valid", "after"): DenyReason.REVOKED,
        ("expired", "before"): DenyReason.TOKEN_EXPIRED,
        ("expired", "after"): DenyReason.TOKEN_EXPIRED,
        ("wrong-audience", "before"): DenyReason.AUDIENCE_MISMATCH,
        ("wrong-audience", "after"): DenyReason.AUDIENCE_MISMATCH,
        ("revoked", "before"): DenyReason.REVOKED,
        ("revoked", "after"): DenyReason.REVOKED,
        ("wrong-binding", "before"): DenyReason.BINDING_MISMATCH,
        ("wrong-binding", "after"): DenyReason.REVOKED,
        ("missing-scope", "before"): DenyReason.SCOPE_MISSING,
        ("missing-scope", "after"): DenyReason.SCOPE_MISSING,
        ("stale-key", "before"): DenyReason.SIGNATURE_INVALID,
        ("stale-key", "after"): DenyReason.SIGNATURE_INVALID,
    }

    checked = 0
    for (variant, phase), expected in table.items():
        authority = GrantAuthority(policy)
        now = 1000.0
        scopes = ("resources:read",) if variant == "missing-scope" else ("tool:search:invoke",)
        audience = "beta" if variant == "wrong-audience" else "alpha"
        grant = authority.issue_grant("alice", "cli", scopes, audience, BINDING, now)
        session_binding = "cd" * 32 if variant == "wrong-binding" else BINDING
        if variant == "expired":
            now += 400.0  # past the 300 s default ttl
        if variant == "revoked":
            authority.revoke(grant.grant_id, now)
        if variant == "stale-key":
            authority.rotate_signing_key(now)
            authority.rotate_signing_key(now)
        if phase == "after":
            authority.revoke(grant.grant_id, now)
        decision = authority.authorize(grant, ("alpha", "search"), session_binding, now + 1.0)
        if expected is None:
            assert decision.allowed, f"{variant}/{phase}: expected Allow, got {decision.reason}"
        else:
            assert not decision.allowed and decision.reason is expected, (
                f"{variant}/{phase}: expected {expected}, got {decision.reason}"
            )
        checked += 1
    report(4, f"all {checked} (variant, revocation-phase) cells match the decision table")


def test_criterion_5_rate_limit_conservation_and_dos():
    rng = random.Random(1005)
    for trial in range(200):
        capacity = rng.randint(1, 25)
        refill = rng.choice([0.25, 0.5, 1.0, 2.0, 5.0])
        t = 0.0
        schedule = []
        for _ in range(rng.randint(1, 150)):
            t += rng.choice([0.0, 0.005, 0.02, 0.1, 0.7, 3.0])
            schedule.append(round(t, 6))
        limiter = RateLimiter(default=RateParams(capacity, refill))
        got = [limiter.check("u", "ep", at).allowed for at in schedule]
        expected = bucket_oracle(capacity, refill, schedule)
        assert got == expected, f"trial {trial} diverged from the oracle"
        horizon = schedule[-1] - schedule[0]
        assert sum(got) <= capacity + math.ceil(refill * horizon)

    # DoS scenario: B=10, r=5/s, 100 requests across one second.
    limiter = RateLimiter(default=RateParams(10, 5.0))
    throttled = 0
    for i in range(100):
        if not limiter.check("attacker", "tools/call", i * 0.01).allowed:
            throttled += 1
    assert throttled >= 85, f"only {throttled} throttled"
    report(5, f"200 schedules exact-match the oracle; DoS burst throttled {throttled}/100")


def test_criterion_6_redaction_exactness():
    policy = default_policy()
    rng = random.Random(1006)
    filler = ("status", "report", "ready", "cache", "warm", "green", "nominal")
    total_planted = 0
    for _ in range(100):
        planted = []
        for _ in range(rng.randint(0, 5)):
            kind = rng.choice(("pan", "ssn", "secret"))
            if kind == "pan":
                planted.append(valid_pan(rng))
            elif kind == "ssn":
                planted.append(
                    f"{rng.randint(100, 599)}-{rng.randint(10, 99)}-{rng.randint(1000, 9999)}"
                )
            else:
                planted.append(secret_token(rng))
        pieces = []
        for value in planted:
            pieces.append(" ".join(rng.choice(filler) for _ in range(rng.randint(2, 5))))
            pieces.append(value)
        pieces.append("end")
        text = " ".join(pieces)
        redacted, rep = redact(text, policy)
        assert rep.total_redactions == len(planted), text
        for value in planted:
            assert value not in redacted
        twice, rep2 = redact(redacted, policy)
        assert twice == redacted and rep2.total_redactions == 0
        total_planted += len(planted)

    # Luhn-invalid 16-digit strings are never PAN-redacted.
    for _ in range(200):
        digits = "".join(str(rng.randint(0, 9)) for _ in range(16))
        if luhn_valid(digits):
            continue
        out, rep = redact(f"num {digits} end", policy)
        assert digits in out and rep.counts.get("pan", 0) == 0
    report(6, f"exactly {total_planted} planted values redacted across 100 responses; "
              "idempotent; Luhn-invalid untouched")


def test_criterion_7_audit_tamper_evidence():
    rng = random.Random(1007)
    from mcpgate.audit import verify_chain

    for trial in range(500):
        n = rng.randint(1, 50)
        log = build_log(n, rng)
        assert log.verify().ok
        idx = rng.randrange(n)
        field = rng.choice(FIELDS)
        log.store._records[idx] = mutate(log.store._records[idx], field, rng)
        result = verify_chain(log.store)
        assert not result.ok, f"trial {trial}: mutation of {field} at {idx} missed"
        assert result.broken_at <= idx, f"trial {trial}: broke at {result.broken_at} > {idx}"
    report(7, "500/500 single-field mutations detected at or before the mutated index")


def test_criterion_8_pipeline_ordering_and_fail_closed():
    # Randomized traffic: ToolInvoked never precedes AuthzAllow per trace.
    env = reference_environment()
    session = open_session(env)
    register_tool(env, make_manifest(parameters={"text": {"type": "string"}}))
    register_tool(env, make_manifest(tool_id="aux.tool"))
    grant_for(env, session, ttl=900.0)
    rng = random.Random(1008)
    for i in range(120):
        roll = rng.random()
        if roll < 0.5:
            data = call_bytes(arguments={"text": f"m{i}"}, msg_id=i)
        elif roll < 0.65:
            data = call_bytes(tool="alpha:aux.tool", msg_id=i)
        elif roll < 0.8:
            data = call_bytes(debug_shell="x", msg_id=i)
        else:
            data = b'{"jsonrpc":"2.0","id":%d,"method":"tools/list"}' % i
        response, outcome = env.gateway.handle_request(session, data, env.clock.now())
        if outcome.verdict != "allow":
            text = response.decode()
            assert scrub_disclosure(text) == text, f"unscrubbed failure body: {text}"
        if rng.random() < 0.3:
            env.clock.advance(1.0)
    traces: dict[str, list] = {}
    for record in env.gateway.audit.records():
        trace = record.payload.get("trace_id")
        if trace:
            traces.setdefault(trace, []).append(record)
    invocations = 0
    for trace, records in traces.items():
        invoked = [i for i, r in enumerate(records) if r.kind is EventKind.TOOL_INVOKED]
        if not invoked:
            continue
        invocations += 1
        allowed = [i for i, r in enumerate(records) if r.kind is EventKind.AUTHZ_ALLOW]
        assert allowed and min(allowed) < min(invoked), f"forward before allow in {trace}"
    assert invocations > 10

    # Fault injection: every stage fault is denied, audited, and scrubbed.
    faulty_stages = [s for s in PIPELINE_STAGES if s != "quarantine"]
    for stage in faulty_stages:
        env2 = reference_environment()
        s2 = open_session(env2)
        register_tool(env2)
        grant_for(env2, s2)
        env2.gateway.inject_fault(
            stage, RuntimeError('fault at /opt/gw/internal.py, File "/opt/gw/x.py", line 9')
        )
        response, outcome = env2.gateway.handle_request(s2, call_bytes(), env2.clock.now())
        env2.gateway.clear_faults()
        assert outcome.verdict == "error", stage
        text = response.decode()
        assert scrub_disclosure(text) == text, f"unscrubbed body for {stage}: {text}"
        assert "/opt" not in text
        stage_fails = [
            r for r in env2.gateway.audit.query(kind=EventKind.PIPELINE_STAGE)
            if not r.payload.get("ok") and r.payload.get("stage") == stage
        ]
        assert stage_fails, f"fault in {stage} not audited"
    report(8, f"no forward-before-allow across {invocations} invoking traces; "
              f"{len(faulty_stages)}/{len(faulty_stages)} injected faults denied+audited+scrubbed")


def test_criterion_9_session_isolation_differential():
    def s1_workload():
        out = []
        for i in range(10):
            out.append(call_bytes(arguments={"city": f"c{i}"}, msg_id=i))
            out.append(b'{"jsonrpc":"2.0","id":%d,"method":"tools/list"}' % (100 + i))
        out.append(call_bytes(debug_shell="x", msg_id=999))  # one deterministic deny
        return out

    def s2_workload():
        return [call_bytes(tool="alpha:aux.tool", arguments={"city": "zz"}, msg_id=50 + i)
                for i in range(21)]

    def prepare(env):
        register_tool(env)  # alpha:get_weather for S1
        register_tool(env, make_manifest(tool_id="aux.tool"))  # S2's tool
        s1 = open_session(env, client="cli-a")
        grant_for(env, s1, ttl=900.0)
        return s1

    def outcomes_alone():
        env = reference_environment()
        s1 = prepare(env)
        result = []
        for data in s1_workload():
            response, outcome = env.gateway.handle_request(s1, data, env.clock.now())
            result.append((outcome.verdict, response))
            env.clock.advance(0.5)
        return result

    def outcomes_interleaved():
        env = reference_environment()
        s1 = prepare(env)
        s2 = open_session(env, client="cli-b")
        grant_for(env, s2, ttl=900.0)
        result = []
        w2 = s2_workload()
        for i, data in enumerate(s1_workload()):
            response, outcome = env.gateway.handle_request(s1, data, env.clock.now())
            result.append((outcome.verdict, response))
            env.gateway.handle_request(s2, w2[i], env.clock.now())  # interleave
            env.clock.advance(0.5)
        return result

    alone = outcomes_alone()
    interleaved = outcomes_interleaved()
    assert alone == interleaved, "S1 outcomes changed under interleaving"

    # The harness concurrency mode must agree.
    from mcpgate.harness import isolation_differential

    h_alone, h_interleaved = isolation_differential(seed=0)
    assert h_alone == h_interleaved
    report(9, f"{len(alone)} S1 outcomes byte-identical alone vs interleaved "
              f"(+{len(h_alone)} via harness concurrency mode)")


def test_criterion_10_table_coverage_end_to_end():
    from click.testing import CliRunner
    from mcpgate.cli import main

    started = time.perf_counter()
    result = CliRunner().invoke(main, ["harness", "run", "--all", "--seed", "0"])
    elapsed = time.perf_counter() - started
    assert result.exit_code == 0, result.output
    assert "overall: PASS" in result.output
    assert "benign false positives: 0" in result.output
    assert elapsed < 180.0, f"took {elapsed:.1f}s"
    report(10, f"harness --all exit 0 with every expectation met in {elapsed:.1f}s")


def test_criterion_11_welford_matches_two_pass():
    rng = random.Random(1011)
    for trial in range(100):
        n = rng.randint(2, 10_000)
        mu = rng.uniform(-1e6, 1e6)
        sigma = 10 ** rng.uniform(-3, 5)
        values = [rng.gauss(mu, sigma) for _ in range(n)]
        baseline = ToolBaseline("t")
        for v in values:
            observe(baseline, "m", v)
        stats = baseline.metric("m")
        assert stats.mean == pytest.approx(np.mean(values), rel=1e-9, abs=1e-12)
        assert stats.variance == pytest.approx(np.var(values, ddof=1), rel=1e-9, abs=1e-12)
        # z-scores match the direct formula over the baseline statistics
        probe = values[0]
        z = assess(baseline, "m", probe, warmup=2).z_score
        if stats.stddev and stats.stddev > 0:
            assert z == (probe - stats.mean) / stats.stddev
    report(11, "100/100 streams match the two-pass oracle within 1e-9; "
               "z-scores equal the direct formula")

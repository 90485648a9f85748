"""Admin command line.

Exit codes: 0 ok, 1 configuration error, 2 runtime fatal, 3 verification
failure (broken audit chain, failed manifest verification, or unmet harness
expectations).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from .audit import EventKind, FileAuditStore, verify_chain
from .clock import SystemClock
from .config import ConfigError, load_config
from .gateway import Gateway
from .harness import (
    BENIGN_KIND,
    CATEGORIES,
    HarnessRunner,
    Scenario,
    correlate,
    generate,
    reference_environment,
    run_all,
)
from .registry import ToolManifest, sign_manifest
from .signing import SigningKey, load_key, save_key

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FATAL = 2
EXIT_VERIFY = 3


def _load_gateway(config_path: str) -> Gateway:
    try:
        config = load_config(config_path)
        return Gateway.from_config(config, clock=SystemClock())
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)


@click.group()
def main():
    """mcpgate: a security gateway for MCP traffic."""


# -- gateway ---------------------------------------------------------------


@main.group()
def gateway():
    """Run the proxy."""


@gateway.command("run")
@click.option("--config", "config_path", required=True, type=click.Path())
def gateway_run(config_path: str):
    """Serve the configured listeners until interrupted."""
    from .serve import run_forever

    gw = _load_gateway(config_path)
    try:
        config = load_config(config_path)
        click.echo(f"listening on {len(config.listeners)} listener(s)")
        run_forever(gw, config)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - fatal path
        click.echo(f"fatal: {exc}", err=True)
        sys.exit(EXIT_FATAL)


# -- keys --------------------------------------------------------------------


@main.group()
def key():
    """Key management helpers."""


@key.command("generate")
@click.option("--key-id", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def key_generate(key_id: str, out_path: str):
    """Generate an Ed25519 key file (prints the public key)."""
    signing_key = SigningKey.generate(key_id)
    save_key(signing_key, out_path)
    click.echo(signing_key.public_bytes().hex())


# -- tools --------------------------------------------------------------------


@main.group()
def tool():
    """Registry lifecycle: sign, submit, approve, quarantine, verify."""


@tool.command("sign")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--key", "key_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def tool_sign(config_path: str, manifest_path: str, key_path: str, out_path: str):
    gw = _load_gateway(config_path)
    try:
        manifest = ToolManifest.from_dict(yaml.safe_load(Path(manifest_path).read_text()))
        signed = sign_manifest(manifest, load_key(key_path), gw.trust_roots)
    except Exception as exc:
        click.echo(f"signing failed: {exc}", err=True)
        sys.exit(EXIT_VERIFY)
    Path(out_path).write_text(json.dumps(signed.to_dict(), indent=2) + "\n")
    click.echo(f"signed {manifest.tool_id} digest {signed.digest.hex()[:16]}")


@tool.command("submit")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--signed", "signed_path", required=True, type=click.Path())
def tool_submit(config_path: str, signed_path: str):
    from .registry import SignedManifest

    gw = _load_gateway(config_path)
    signed = SignedManifest.from_dict(json.loads(Path(signed_path).read_text()))
    entry, findings, risk = gw.submit_tool(signed, gw.clock.now())
    click.echo(f"submitted {entry.key} state={entry.state.value} risk={risk:.2f} findings={len(findings)}")


@tool.command("approve")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--tool", "tool_id", required=True)
@click.option("--reviewer", required=True)
def tool_approve(config_path: str, tool_id: str, reviewer: str):
    gw = _load_gateway(config_path)
    try:
        entry = gw.approve_tool(tool_id, reviewer, gw.clock.now())
    except Exception as exc:
        click.echo(f"approval failed: {exc}", err=True)
        sys.exit(EXIT_VERIFY)
    click.echo(f"approved {entry.key}; recertification due at {entry.recert_deadline}")


@tool.command("quarantine")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--tool", "tool_id", required=True)
@click.option("--reason", default="operator action")
def tool_quarantine(config_path: str, tool_id: str, reason: str):
    gw = _load_gateway(config_path)
    try:
        gw.quarantine_tool(tool_id, reason, gw.clock.now())
    except Exception as exc:
        click.echo(f"quarantine failed: {exc}", err=True)
        sys.exit(EXIT_FATAL)
    click.echo(f"quarantined {tool_id}")


@tool.command("verify")
@click.option("--config", "config_path", required=True, type=click.Path())
def tool_verify(config_path: str):
    """Full-registry integrity audit: signatures, digests, chained root."""
    gw = _load_gateway(config_path)
    problems = gw.audit_registry_integrity(gw.clock.now())
    root = gw.registry.root()
    click.echo(f"entries={root.count} root={root.hex[:16]}")
    if problems:
        for key_, failure in problems:
            click.echo(f"FAIL {key_}: {failure}", err=True)
        sys.exit(EXIT_VERIFY)
    click.echo("registry verification ok")


# -- grants --------------------------------------------------------------------


@main.group()
def grant():
    """Issue and revoke scoped access grants."""


@grant.command("issue")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--subject", required=True)
@click.option("--client", "client_id", required=True)
@click.option("--scope", "scopes", multiple=True, required=True)
@click.option("--audience", required=True)
@click.option("--binding", required=True, help="hex thumbprint of the session key material")
@click.option("--ttl", type=float, default=None)
def grant_issue(config_path, subject, client_id, scopes, audience, binding, ttl):
    gw = _load_gateway(config_path)
    try:
        issued = gw.issue_grant(subject, client_id, list(scopes), audience, binding,
                                gw.clock.now(), ttl)
    except Exception as exc:
        click.echo(f"issuance refused: {exc}", err=True)
        sys.exit(EXIT_VERIFY)
    click.echo(issued.encode())


@grant.command("revoke")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--grant-id", required=True)
def grant_revoke(config_path: str, grant_id: str):
    gw = _load_gateway(config_path)
    known = gw.revoke_grant(grant_id, gw.clock.now())
    click.echo(f"revoked {grant_id}" + ("" if known else " (unknown id; recorded as no-op)"))


# -- audit --------------------------------------------------------------------


@main.group()
def audit():
    """Tamper-evident log operations."""


@audit.command("verify")
@click.option("--config", "config_path", required=True, type=click.Path())
def audit_verify(config_path: str):
    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if config.audit.store == "memory":
        click.echo("audit store is in-memory; nothing to verify", err=True)
        sys.exit(EXIT_CONFIG)
    result = verify_chain(FileAuditStore(config.audit.store))
    if result.ok:
        click.echo("audit chain ok")
        return
    click.echo(f"audit chain broken at seq {result.broken_at}", err=True)
    sys.exit(EXIT_VERIFY)


@audit.command("query")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--kind", default=None)
@click.option("--principal", default=None)
@click.option("--since", type=float, default=None)
@click.option("--until", type=float, default=None)
@click.option("--correlate", "run_correlation", is_flag=True,
              help="also run the shipped correlation rules")
def audit_query(config_path, kind, principal, since, until, run_correlation):
    from .audit import AuditLog

    try:
        config = load_config(config_path)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if config.audit.store == "memory":
        click.echo("audit store is in-memory; nothing to query", err=True)
        sys.exit(EXIT_CONFIG)
    log = AuditLog(FileAuditStore(config.audit.store))
    kind_enum = EventKind(kind) if kind else None
    for record in log.query(kind=kind_enum, principal=principal, start=since, end=until):
        click.echo(json.dumps(record.to_dict(), sort_keys=True))
    if run_correlation:
        for alert in correlate(log):
            click.echo(f"ALERT {alert.rule_id} group={alert.group} seqs={list(alert.seqs)}")


# -- harness --------------------------------------------------------------------


@main.group()
def harness():
    """Replay threat scenarios against a fresh gateway instance."""


@harness.command("run")
@click.option("--scenario", "kind", default=None,
              type=click.Choice(CATEGORIES + (BENIGN_KIND,)))
@click.option("--seed", type=int, default=0)
@click.option("--all", "run_everything", is_flag=True)
@click.option("--isolation", "run_isolation", is_flag=True,
              help="concurrency mode: interleave two sessions and compare outcomes")
@click.option("--report-dir", type=click.Path(), default=None)
@click.option("--save", "save_path", type=click.Path(), default=None,
              help="write the generated scenario to a YAML file")
@click.option("--replay", "replay_path", type=click.Path(), default=None,
              help="run a previously saved scenario file")
def harness_run(kind, seed, run_everything, run_isolation, report_dir, save_path, replay_path):
    if run_isolation:
        from .harness import isolation_differential

        alone, interleaved = isolation_differential(seed)
        identical = alone == interleaved
        click.echo(
            f"isolation differential: {len(alone)} outcomes "
            + ("byte-identical" if identical else "DIVERGED")
        )
        if not identical:
            sys.exit(EXIT_VERIFY)
        return
    if run_everything:
        report = run_all(seed=seed)
        click.echo(report.to_text())
        if report_dir:
            from .report import write_report

            for path in write_report(report, report_dir):
                click.echo(f"wrote {path}")
        if not report.all_met:
            sys.exit(EXIT_VERIFY)
        return
    if replay_path:
        scenario = Scenario.from_yaml(Path(replay_path).read_text())
    elif kind:
        scenario = generate(kind, seed)
    else:
        click.echo("pass --scenario, --all, or --replay", err=True)
        sys.exit(EXIT_CONFIG)
    if save_path:
        Path(save_path).write_text(scenario.to_yaml())
        click.echo(f"wrote {save_path}")
    runner = HarnessRunner(reference_environment())
    result = runner.run(scenario)
    click.echo(
        f"{scenario.kind}: {result.expectations_met}/{result.expectations_total} expectations met"
    )
    for failure in result.failures:
        click.echo(f"  MISS {failure}", err=True)
    if result.expectations_met != result.expectations_total:
        sys.exit(EXIT_VERIFY)


if __name__ == "__main__":
    main()

import json
import socket

import pytest
import yaml
from click.testing import CliRunner

from conftest import make_manifest
from mcpgate.cli import main
from mcpgate.config import from_dict
from mcpgate.gateway import make_client_hello
from mcpgate.harness import reference_environment
from mcpgate.registry import sign_manifest
from mcpgate.serve import start_listeners
from mcpgate.signing import SigningKey, save_key


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def served_env():
    env = reference_environment()
    config = from_dict({
        "listeners": [
            {"kind": "tcp", "host": "127.0.0.1", "port": free_port(),
             "transport_attrs": {"tls_version_claim": "1.3"}},
            {"kind": "http", "host": "127.0.0.1", "port": free_port()},
        ],
    })
    servers = start_listeners(env.gateway, config)
    # prepare a callable tool and a wildcard grant for alice
    signed = sign_manifest(make_manifest(), env.signer, env.gateway.trust_roots)
    entry, _, _ = env.gateway.submit_tool(signed, env.clock.now())
    env.gateway.approve_tool(entry.key, "sec", env.clock.now())
    yield env, config
    for server in servers:
        server.shutdown()


def hello_frame(env, client="cli-a"):
    record = next(c for c in env.gateway.policy.clients if c.client_id == client)
    return make_client_hello(client, record.subject, env.bindings[client],
                             env.client_keys[client])


class TestTcpListener:
    def test_session_grant_and_call_in_band(self, served_env):
        env, config = served_env
        listener = config.listeners[0]
        with socket.create_connection((listener.host, listener.port), timeout=5) as sock:
            fh = sock.makefile("rwb")
            fh.write(json.dumps(hello_frame(env)).encode() + b"\n")
            fh.flush()
            greeting = json.loads(fh.readline())
            assert greeting["ok"] is True
            session = env.gateway.session(greeting["session_id"])
            token = env.gateway.issue_grant(
                "alice", "cli-a", ["tool:*:invoke"], "alpha",
                session.binding, env.clock.now(),
            ).encode()
            fh.write(json.dumps({"gateway": "attach_grant", "token": token}).encode() + b"\n")
            fh.flush()
            attach = json.loads(fh.readline())
            assert attach["ok"] is True
            call = {"jsonrpc": "2.0", "id": 1, "method": "tools/call",
                    "params": {"name": "alpha:get_weather", "arguments": {"city": "Oslo"}}}
            fh.write(json.dumps(call).encode() + b"\n")
            fh.flush()
            body = json.loads(fh.readline())
            assert body["id"] == 1 and "result" in body

    def test_foreign_grant_rejected_at_attach(self, served_env):
        env, config = served_env
        listener = config.listeners[0]
        with socket.create_connection((listener.host, listener.port), timeout=5) as sock:
            fh = sock.makefile("rwb")
            fh.write(json.dumps(hello_frame(env)).encode() + b"\n")
            fh.flush()
            greeting = json.loads(fh.readline())
            token = env.gateway.issue_grant(
                "bob", "cli-b", ["tool:*:invoke"], "alpha", "bb" * 32, env.clock.now()
            ).encode()
            fh.write(json.dumps({"gateway": "attach_grant", "token": token}).encode() + b"\n")
            fh.flush()
            attach = json.loads(fh.readline())
            assert attach["ok"] is False

    def test_bad_hello_rejected(self, served_env):
        env, config = served_env
        listener = config.listeners[0]
        with socket.create_connection((listener.host, listener.port), timeout=5) as sock:
            fh = sock.makefile("rwb")
            fh.write(json.dumps({"client_id": "cli-a", "subject": "alice",
                                 "binding": "aa" * 32, "signature": "00"}).encode() + b"\n")
            fh.flush()
            reply = json.loads(fh.readline())
            assert reply["ok"] is False


class TestHttpListener:
    def test_session_and_call(self, served_env):
        import urllib.request

        env, config = served_env
        listener = config.listeners[1]
        base = f"http://{listener.host}:{listener.port}"
        req = urllib.request.Request(
            base + "/session", data=json.dumps(hello_frame(env)).encode(),
            headers={"Content-Type": "application/json"}, method="POST",
        )
        with urllib.request.urlopen(req, timeout=5) as resp:
            session_id = json.loads(resp.read())["session_id"]
        session = env.gateway.session(session_id)
        token = env.gateway.issue_grant("alice", "cli-a", ["tool:*:invoke"], "alpha",
                                        session.binding, env.clock.now()).encode()
        req = urllib.request.Request(
            base + "/grant", data=json.dumps({"token": token}).encode(),
            headers={"X-Mcpgate-Session": session_id}, method="POST",
        )
        with urllib.request.urlopen(req, timeout=5) as resp:
            assert "grant_id" in json.loads(resp.read())
        call = {"jsonrpc": "2.0", "id": 5, "method": "tools/call",
                "params": {"name": "alpha:get_weather", "arguments": {"city": "Rio"}}}
        req = urllib.request.Request(
            base + "/mcp", data=json.dumps(call).encode(),
            headers={"X-Mcpgate-Session": session_id}, method="POST",
        )
        with urllib.request.urlopen(req, timeout=5) as resp:
            body = json.loads(resp.read())
        assert body["id"] == 5 and "result" in body


@pytest.fixture
def cli_config(tmp_path):
    signer = SigningKey.generate("authority-1")
    gateway_key = SigningKey.generate("gw-root")
    save_key(signer, tmp_path / "signer.key")
    save_key(gateway_key, tmp_path / "gateway.key")
    config = {
        "upstreams": [{"server_id": "alpha", "endpoint": "echo:"}],
        "policy": {
            "entitlements": {"alice": ["tool:*:invoke"]},
            "trust_roots": {"authority-1": signer.public_bytes().hex()},
            "gateway_key_file": str(tmp_path / "gateway.key"),
        },
        "audit": {"store": str(tmp_path / "audit.jsonl")},
        "registry_store": str(tmp_path / "registry.jsonl"),
    }
    path = tmp_path / "gateway.yaml"
    path.write_text(yaml.safe_dump(config))
    manifest_path = tmp_path / "manifest.yaml"
    manifest_path.write_text(yaml.safe_dump(make_manifest().to_dict()))
    return path, manifest_path, tmp_path


class TestCli:
    def run(self, *args, expect=0):
        result = CliRunner().invoke(main, list(args))
        assert result.exit_code == expect, result.output
        return result

    def test_tool_lifecycle_and_audit(self, cli_config):
        config, manifest_path, tmp = cli_config
        signed_path = tmp / "signed.json"
        self.run("tool", "sign", "--config", str(config), "--manifest", str(manifest_path),
                 "--key", str(tmp / "signer.key"), "--out", str(signed_path))
        assert signed_path.exists()
        self.run("tool", "submit", "--config", str(config), "--signed", str(signed_path))
        self.run("tool", "approve", "--config", str(config),
                 "--tool", "alpha:get_weather", "--reviewer", "sec")
        result = self.run("tool", "verify", "--config", str(config))
        assert "registry verification ok" in result.output
        self.run("tool", "quarantine", "--config", str(config), "--tool", "alpha:get_weather")
        self.run("audit", "verify", "--config", str(config))
        result = self.run("audit", "query", "--config", str(config), "--kind", "ToolQuarantined")
        assert "ToolQuarantined" in result.output

    def test_audit_verify_detects_tamper(self, cli_config):
        config, manifest_path, tmp = cli_config
        signed_path = tmp / "signed.json"
        self.run("tool", "sign", "--config", str(config), "--manifest", str(manifest_path),
                 "--key", str(tmp / "signer.key"), "--out", str(signed_path))
        self.run("tool", "submit", "--config", str(config), "--signed", str(signed_path))
        audit_path = tmp / "audit.jsonl"
        lines = audit_path.read_text().splitlines()
        lines[0] = lines[0].replace('"principal": "', '"principal": "x')
        audit_path.write_text("\n".join(lines) + "\n")
        self.run("audit", "verify", "--config", str(config), expect=3)

    def test_grant_issue_and_revoke(self, cli_config):
        config, _, tmp = cli_config
        result = self.run("grant", "issue", "--config", str(config), "--subject", "alice",
                          "--client", "cli-a", "--scope", "tool:*:invoke",
                          "--audience", "alpha", "--binding", "aa" * 32)
        token = result.output.strip().splitlines()[-1]
        assert token.count(".") == 2
        from mcpgate.access import AccessGrant

        grant = AccessGrant.decode(token)
        self.run("grant", "revoke", "--config", str(config), "--grant-id", grant.grant_id)
        result = self.run("audit", "query", "--config", str(config), "--kind", "Revocation")
        assert grant.grant_id in result.output

    def test_grant_issue_refused_outside_entitlements(self, cli_config):
        config, _, _ = cli_config
        self.run("grant", "issue", "--config", str(config), "--subject", "mallory",
                 "--client", "cli-a", "--scope", "tool:*:invoke",
                 "--audience", "alpha", "--binding", "aa" * 32, expect=3)

    def test_config_error_exit_code(self, tmp_path):
        self.run("tool", "verify", "--config", str(tmp_path / "missing.yaml"), expect=1)
        bad = tmp_path / "bad.yaml"
        bad.write_text("listeners: [{port: 1}]")
        self.run("tool", "verify", "--config", str(bad), expect=1)

    def test_key_generate(self, tmp_path):
        result = self.run("key", "generate", "--key-id", "k1",
                          "--out", str(tmp_path / "k1.key"))
        assert len(result.output.strip()) == 64

    def test_harness_single_scenario(self):
        result = self.run("harness", "run", "--scenario", "DoS", "--seed", "5")
        assert "1/1 expectations met" in result.output

    def test_harness_save_and_replay(self, tmp_path):
        saved = tmp_path / "scenario.yaml"
        self.run("harness", "run", "--scenario", "IdentitySubversion", "--seed", "5",
                 "--save", str(saved))
        assert saved.exists()
        result = self.run("harness", "run", "--replay", str(saved))
        assert "expectations met" in result.output

    def test_harness_all_with_report(self, tmp_path):
        out = tmp_path / "report"
        result = self.run("harness", "run", "--all", "--seed", "1",
                          "--report-dir", str(out))
        assert "overall: PASS" in result.output
        assert (out / "report.csv").exists()
        assert (out / "detection_rates.png").exists()
        assert (out / "audit_events.png").exists()

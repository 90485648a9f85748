"""Network front ends for `gateway run`: newline-delimited JSON-RPC over TCP
and single-body JSON-RPC over HTTP POST.

Both framings share one session handshake: the client first presents its
authentication frame (see gateway.make_client_hello); afterwards each MCP
frame is pushed through the enforcement pipeline.
"""

from __future__ import annotations

import json
import socketserver
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .config import GatewayConfig, ListenerConfig
from .gateway import AuthnFailed, Gateway, GrantRejected


def _hello_error(message: str) -> bytes:
    return json.dumps({"ok": False, "error": message}).encode("utf-8") + b"\n"


def _control_frame(frame: bytes) -> dict | None:
    """Gateway control frames carry a top-level "gateway" member, which no
    JSON-RPC frame may have. Anything else is MCP traffic."""
    try:
        obj = json.loads(frame)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return None
    if isinstance(obj, dict) and "gateway" in obj:
        return obj
    return None


class _TcpHandler(socketserver.StreamRequestHandler):
    def handle(self):
        gateway: Gateway = self.server.gateway  # type: ignore[attr-defined]
        listener: ListenerConfig = self.server.listener  # type: ignore[attr-defined]
        hello_line = self.rfile.readline()
        if not hello_line.strip():
            return
        try:
            hello = json.loads(hello_line)
            session = gateway.open_session(
                hello, gateway.clock.now(), transport_attrs=listener.transport_attrs
            )
        except AuthnFailed as exc:
            self.wfile.write(_hello_error(str(exc)))
            return
        except (json.JSONDecodeError, UnicodeDecodeError):
            self.wfile.write(_hello_error("malformed hello"))
            return
        self.wfile.write(
            json.dumps({"ok": True, "session_id": session.session_id}).encode("utf-8") + b"\n"
        )
        for line in self.rfile:
            frame = line.rstrip(b"\r\n")
            if not frame:
                continue
            control = _control_frame(frame)
            if control is not None:
                if control.get("gateway") == "attach_grant":
                    try:
                        grant = gateway.attach_grant(session, str(control.get("token", "")))
                        reply = {"ok": True, "grant_id": grant.grant_id}
                    except GrantRejected as exc:
                        reply = {"ok": False, "error": str(exc)}
                else:
                    reply = {"ok": False, "error": "unknown control frame"}
                self.wfile.write(json.dumps(reply).encode("utf-8") + b"\n")
                continue
            response, _outcome = gateway.handle_request(session, frame, gateway.clock.now())
            self.wfile.write(response + b"\n")


class GatewayTcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, gateway: Gateway, listener: ListenerConfig):
        super().__init__((listener.host, listener.port), _TcpHandler)
        self.gateway = gateway
        self.listener = listener


class _HttpHandler(BaseHTTPRequestHandler):
    def log_message(self, fmt, *args):  # keep serving quiet; audit log has it
        pass

    def _reply(self, status: int, body: bytes) -> None:
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        gateway: Gateway = self.server.gateway  # type: ignore[attr-defined]
        listener: ListenerConfig = self.server.listener  # type: ignore[attr-defined]
        length = int(self.headers.get("Content-Length", "0"))
        body = self.rfile.read(length)
        if self.path == "/session":
            try:
                hello = json.loads(body)
                session = gateway.open_session(
                    hello, gateway.clock.now(), transport_attrs=listener.transport_attrs
                )
            except AuthnFailed as exc:
                self._reply(401, json.dumps({"error": str(exc)}).encode())
                return
            except (json.JSONDecodeError, UnicodeDecodeError):
                self._reply(400, json.dumps({"error": "malformed hello"}).encode())
                return
            self._reply(200, json.dumps({"session_id": session.session_id}).encode())
            return
        if self.path == "/grant":
            session_id = self.headers.get("X-Mcpgate-Session", "")
            try:
                session = gateway.session(session_id)
            except KeyError:
                self._reply(401, json.dumps({"error": "unknown session"}).encode())
                return
            try:
                token = json.loads(body).get("token", "")
                grant = gateway.attach_grant(session, str(token))
            except GrantRejected as exc:
                self._reply(403, json.dumps({"error": str(exc)}).encode())
                return
            except (json.JSONDecodeError, UnicodeDecodeError, AttributeError):
                self._reply(400, json.dumps({"error": "malformed body"}).encode())
                return
            self._reply(200, json.dumps({"grant_id": grant.grant_id}).encode())
            return
        if self.path == "/mcp":
            session_id = self.headers.get("X-Mcpgate-Session", "")
            try:
                session = gateway.session(session_id)
            except KeyError:
                self._reply(401, json.dumps({"error": "unknown session"}).encode())
                return
            response, _outcome = gateway.handle_request(session, body, gateway.clock.now())
            self._reply(200, response)
            return
        self._reply(404, json.dumps({"error": "unknown path"}).encode())


class GatewayHttpServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, gateway: Gateway, listener: ListenerConfig):
        super().__init__((listener.host, listener.port), _HttpHandler)
        self.gateway = gateway
        self.listener = listener


def start_listeners(gateway: Gateway, config: GatewayConfig) -> list:
    """Start every configured listener on a daemon thread; returns the
    server objects (call .shutdown() to stop)."""
    servers = []
    for listener in config.listeners:
        if listener.kind == "tcp":
            server = GatewayTcpServer(gateway, listener)
        elif listener.kind == "http":
            server = GatewayHttpServer(gateway, listener)
        else:
            raise ValueError(f"unknown listener kind {listener.kind!r}")
        threading.Thread(target=server.serve_forever, daemon=True).start()
        servers.append(server)
    return servers


def run_forever(gateway: Gateway, config: GatewayConfig) -> None:
    servers = start_listeners(gateway, config)
    if not servers:
        raise ValueError("no listeners configured")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        for server in servers:
            server.shutdown()

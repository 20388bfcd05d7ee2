"""Minimal JSON-over-HTTP/1.1 service and client helpers (stdlib only)."""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
from collections.abc import Callable
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any
from urllib.parse import urlsplit

logger = logging.getLogger(__name__)

# handler(body) -> (status, payload); payload is a str of JSON text or a JSON value
Route = Callable[[Any], "tuple[int, Any]"]


class BindError(OSError):
    pass


class BadRequest(Exception):
    """Raised by a route handler to produce a 400 response."""


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128


def _make_handler(routes: dict[tuple[str, str], Route]):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        disable_nagle_algorithm = True

        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _dispatch(self, method: str) -> None:
            path = urlsplit(self.path).path
            route = routes.get((method, path))
            if route is None:
                known = any(p == path for _, p in routes)
                self._send(405 if known else 404, {"error": "method not allowed" if known else "not found"})
                return
            body = None
            length = int(self.headers.get("Content-Length") or 0)
            if length:
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw)
                except (UnicodeDecodeError, json.JSONDecodeError):
                    self._send(400, {"error": "malformed JSON body"})
                    return
            try:
                status, payload = route(body)
            except BadRequest as exc:
                status, payload = 400, {"error": str(exc)}
            except Exception as exc:  # noqa: BLE001 - a handler bug must not kill the service
                logger.exception("handler for %s %s failed", method, path)
                status, payload = 500, {"error": f"{type(exc).__name__}: {exc}"}
            self._send(status, payload)

        def _send(self, status: int, payload: Any) -> None:
            text = payload if isinstance(payload, str) else json.dumps(payload)
            data = text.encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._dispatch("GET")

        def do_POST(self):
            self._dispatch("POST")

        def do_PUT(self):
            self._dispatch("PUT")

    return Handler


@dataclass
class ServiceHandle:
    """A running HTTP service; :meth:`stop` shuts it down independently of any other."""

    name: str
    server: ThreadingHTTPServer
    thread: threading.Thread

    @property
    def host(self) -> str:
        return self.server.server_address[0]

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def running(self) -> bool:
        return self.thread.is_alive()

    def stop(self) -> None:
        if self.thread.is_alive():
            self.server.shutdown()
            self.thread.join()
        self.server.server_close()

    def wait(self) -> None:
        self.thread.join()


def start_service(name: str, host: str, port: int, routes: dict[tuple[str, str], Route]) -> ServiceHandle:
    try:
        server = _Server((host, port), _make_handler(routes))
    except OSError as exc:
        raise BindError(exc.errno, f"{name}: cannot bind {host}:{port}: {exc.strerror}") from exc
    thread = threading.Thread(target=server.serve_forever, args=(0.05,), name=f"{name}-{port}", daemon=True)
    thread.start()
    logger.info("%s listening on %s:%d", name, *server.server_address[:2])
    return ServiceHandle(name, server, thread)


def split_address(address: str) -> tuple[str, int]:
    if "://" in address:
        parts = urlsplit(address)
        return parts.hostname or "127.0.0.1", parts.port or 80
    host, _, port = address.rpartition(":")
    return host or "127.0.0.1", int(port)


def request_json(
    address: str, method: str, path: str, body: Any = None, timeout: float = 5.0
) -> tuple[int, Any]:
    """One HTTP exchange. Returns (status, parsed body or raw text).

    Transport errors (refused, reset, timeout) propagate as OSError /
    socket.timeout so callers can tell them apart from HTTP failures.
    """
    host, port = split_address(address)
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        headers = {"Connection": "close"}
        data = None
        if body is not None:
            data = json.dumps(body).encode("utf-8")
            headers["Content-Type"] = "application/json"
        conn.request(method, path, body=data, headers=headers)
        resp = conn.getresponse()
        raw = resp.read()
        try:
            parsed = json.loads(raw) if raw else None
        except (UnicodeDecodeError, json.JSONDecodeError):
            parsed = raw.decode("utf-8", "replace")
        return resp.status, parsed
    finally:
        conn.close()


TransportError = (OSError, socket.timeout, http.client.HTTPException)

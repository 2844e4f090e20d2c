"""Small stdlib HTTP helpers shared by the issuer and gateway services."""

from __future__ import annotations

import json
import socket
import threading
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping

from . import errors
from .errors import CaptokError, IssuerUnavailable, ProtocolError


def error_from_code(code: str, detail: str = "") -> CaptokError:
    """Rebuild a typed error from its wire code."""
    for obj in vars(errors).values():
        if isinstance(obj, type) and issubclass(obj, CaptokError) and obj.__dict__.get("code") == code:
            if obj is errors.EscalationError:
                return errors.EscalationError(detail, detail)
            return obj(detail)
    return CaptokError(detail, code=code)


class JSONHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "captok"

    def log_message(self, format: str, *args: Any) -> None:  # noqa: A002
        pass

    def read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def read_form(self) -> dict[str, str]:
        ctype = (self.headers.get("Content-Type") or "").split(";")[0].strip()
        if ctype != "application/x-www-form-urlencoded":
            raise ProtocolError("expected application/x-www-form-urlencoded body")
        try:
            pairs = urllib.parse.parse_qsl(self.read_body().decode("utf-8"), strict_parsing=False)
        except UnicodeDecodeError as exc:
            raise ProtocolError("body is not UTF-8") from exc
        return dict(pairs)

    def send_bytes(self, status: int, body: bytes, content_type: str = "application/octet-stream") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if self.command != "HEAD":
            self.wfile.write(body)

    def send_json(self, status: int, doc: Any) -> None:
        self.send_bytes(status, json.dumps(doc).encode(), "application/json")


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, name="captok-http", daemon=True)
    thread.start()
    return thread


def server_url(server: ThreadingHTTPServer) -> str:
    host, port = server.server_address[:2]
    return f"http://{host}:{port}"


def request(
    method: str,
    url: str,
    *,
    form: Mapping[str, str] | None = None,
    body: bytes | None = None,
    headers: Mapping[str, str] | None = None,
    timeout: float = 10.0,
) -> tuple[int, bytes]:
    """Plain request returning ``(status, body)``; connection failures raise IssuerUnavailable."""
    hdrs = dict(headers or {})
    if form is not None:
        body = urllib.parse.urlencode(form).encode()
        hdrs["Content-Type"] = "application/x-www-form-urlencoded"
    req = urllib.request.Request(url, data=body, method=method, headers=hdrs)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read()
    except (urllib.error.URLError, socket.timeout, ConnectionError) as exc:
        raise IssuerUnavailable(f"{url}: {exc}") from exc


def json_call(method: str, url: str, **kwargs: Any) -> Any:
    status, data = request(method, url, **kwargs)
    try:
        doc = json.loads(data or b"null")
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"{url} returned non-JSON ({status})") from exc
    if status >= 400:
        if isinstance(doc, dict) and "error" in doc:
            raise error_from_code(doc["error"], doc.get("detail") or doc.get("error_description", ""))
        raise ProtocolError(f"{url} returned {status}")
    return doc

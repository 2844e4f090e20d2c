"""Bearer-authenticated data gateway.

Requests are authorized offline: the token is verified against a cached copy
of the issuer's key set and its scopes are re-rooted onto the gateway mount.
``GET`` maps to ``read`` and ``PUT`` to ``write``.  The issuer is contacted
only to (re)fetch keys, unless introspection mode is switched on explicitly.

Bearer tokens need a confidential channel in production; this server speaks
plain HTTP and is meant for desk-scale use behind TLS termination.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field
from functools import partial
from http.server import ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping
from urllib.parse import unquote

from ._http import JSONHandler
from .authz import acl_from_token, permits
from .clock import Clock, SystemClock
from .errors import CaptokError, KeyFetchError, PathError, TokenError
from .paths import normalize_path, segments
from .tokens import (
    ANY_AUDIENCE,
    DEFAULT_SKEW,
    KeySet,
    TokenClaims,
    coerce_scope,
    verify_token,
)

log = logging.getLogger(__name__)

METHOD_OPS = {"GET": "read", "PUT": "write"}


@dataclass
class GatewayConfig:
    document_root: Path
    issuer: str
    audience: str
    host: str = "127.0.0.1"
    port: int = 0
    mount_prefix: str = "/"
    key_refetch_interval: float = 3600.0
    strict_audience: bool = True
    enforce_origin: bool = False
    skew: float = DEFAULT_SKEW
    fail_closed: bool = False
    introspection: bool = False
    audit_log: Path | None = None
    key_cache_path: Path | None = None
    audit_include_token: bool = False

    def __post_init__(self) -> None:
        self.document_root = Path(self.document_root)
        if not self.document_root.is_dir():
            raise ValueError(f"document root {self.document_root} is not a directory")
        if self.strict_audience and not self.audience:
            raise ValueError("strict audience checking needs a non-empty audience")
        self.mount_prefix = normalize_path(self.mount_prefix)
        if self.audit_log is not None:
            self.audit_log = Path(self.audit_log)
        if self.key_cache_path is not None:
            self.key_cache_path = Path(self.key_cache_path)


# -- key cache ----------------------------------------------------------------


class KeyCache:
    """Issuer key set held in memory (and optionally on disk).

    Reads never block: :meth:`snapshot` returns whatever was fetched last.
    Refetches happen on :meth:`refresh`, driven by a background thread in
    real-time deployments or explicitly by simulations.
    """

    def __init__(
        self,
        fetch: Callable[[], KeySet],
        *,
        clock: Clock | None = None,
        interval: float = 3600.0,
        cache_path: Path | None = None,
    ) -> None:
        self._fetch = fetch
        self.clock = clock or SystemClock()
        self.interval = interval
        self.cache_path = Path(cache_path) if cache_path is not None else None
        self._keys: KeySet | None = None
        self.fetched_at: float | None = None
        self.fetch_count = 0
        self.fetch_failures = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _fetch_now(self) -> KeySet:
        self.fetch_count += 1
        keys = self._fetch()
        self._keys, self.fetched_at = keys, self.clock.now()
        if self.cache_path is not None:
            tmp = self.cache_path.with_suffix(".tmp")
            tmp.write_text(json.dumps({"fetched_at": self.fetched_at, **keys.to_json()}))
            os.replace(tmp, self.cache_path)
        return keys

    def warm(self) -> KeySet:
        """Initial fetch; fall back to the on-disk cache when the issuer is down."""
        try:
            return self._fetch_now()
        except (CaptokError, OSError) as exc:
            self.fetch_failures += 1
            if self.cache_path is not None and self.cache_path.exists():
                doc = json.loads(self.cache_path.read_text())
                self._keys = KeySet.from_json(doc)
                self.fetched_at = float(doc.get("fetched_at", 0.0))
                log.warning("issuer unreachable at startup; using cached keys from %s", self.cache_path)
                return self._keys
            raise KeyFetchError(f"cannot fetch issuer keys and no cache: {exc}") from exc

    def refresh(self) -> bool:
        try:
            self._fetch_now()
            return True
        except (CaptokError, OSError) as exc:
            self.fetch_failures += 1
            log.warning("key refetch failed, keeping cached keys: %s", exc)
            return False

    def snapshot(self) -> KeySet:
        if self._keys is None:
            raise KeyFetchError("key cache is empty")
        return self._keys

    def is_stale(self, now: float | None = None) -> bool:
        if self.fetched_at is None:
            return True
        now = self.clock.now() if now is None else now
        return now - self.fetched_at > self.interval

    def start(self) -> None:
        if self._thread is not None:
            return

        def loop() -> None:
            while not self._stop.wait(self.interval):
                self.refresh()

        self._thread = threading.Thread(target=loop, name="captok-keys", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()


# -- decisions ----------------------------------------------------------------


@dataclass(frozen=True)
class Decision:
    allowed: bool
    status: int
    code: str | None = None
    op: str | None = None
    path: str | None = None
    claims: TokenClaims | None = None
    detail: str = ""


def _bearer(value: str | None) -> str | None:
    """Extract the token from an ``Authorization`` value or pass a raw token through."""
    if value is None:
        return None
    value = value.strip()
    if value[:7].lower() == "bearer ":
        value = value[7:].strip()
    return value or None


class AccessPolicy:
    """Offline decision procedure shared by the gateway and execute-side caches."""

    def __init__(
        self,
        *,
        issuer: str,
        audience: str,
        keys: Callable[[], KeySet],
        mount_prefix: str = "/",
        strict_audience: bool = True,
        enforce_origin: bool = False,
        skew: float = DEFAULT_SKEW,
        clock: Clock | None = None,
        introspect: Callable[[str], Mapping[str, Any]] | None = None,
    ) -> None:
        self.issuer = issuer
        self.audience = audience
        self.keys = keys
        self.mount_prefix = normalize_path(mount_prefix)
        self.strict_audience = strict_audience
        self.enforce_origin = enforce_origin
        self.skew = skew
        self.clock = clock or SystemClock()
        self.introspect = introspect

    @classmethod
    def from_config(cls, config: GatewayConfig, keys: Callable[[], KeySet], **kwargs: Any) -> AccessPolicy:
        return cls(
            issuer=config.issuer,
            audience=config.audience,
            keys=keys,
            mount_prefix=config.mount_prefix,
            strict_audience=config.strict_audience,
            enforce_origin=config.enforce_origin,
            skew=config.skew,
            **kwargs,
        )

    def _verify(self, token: str, now: float) -> TokenClaims:
        if self.introspect is not None:
            report = self.introspect(token)
            if not report.get("active"):
                raise TokenError("issuer reports token inactive", code="inactive")
            if report.get("iss", self.issuer) != self.issuer:
                raise TokenError("issuer mismatch", code="issuer_mismatch")
            aud = report.get("aud")
            if aud != self.audience and (self.strict_audience or aud != ANY_AUDIENCE):
                raise TokenError(f"audience {aud!r}", code="audience_mismatch")
            return TokenClaims(
                iss=report.get("iss", self.issuer),
                sub=report.get("sub", ""),
                aud=aud,
                exp=int(report.get("exp", 0)),
                nbf=int(report.get("nbf", 0)),
                iat=int(report.get("iat", 0)),
                jti=report.get("jti", ""),
                scope=tuple(coerce_scope(report.get("scope", ""))),
                origin=report.get("origin"),
            )
        verified = verify_token(
            token,
            self.keys(),
            self.issuer,
            self.audience,
            now,
            self.skew,
            allow_any_audience=not self.strict_audience,
        )
        return verified.claims

    def decide(
        self,
        method: str,
        raw_path: str,
        bearer: str | None,
        client_id: str | None = None,
        now: float | None = None,
    ) -> Decision:
        now = self.clock.now() if now is None else now
        op = METHOD_OPS.get(method.upper())
        if op is None:
            return Decision(False, 405, "method_not_allowed", detail=method)
        try:
            path = normalize_path(raw_path)
        except PathError as exc:
            return Decision(False, 400, exc.code, op=op, detail=exc.detail)
        token = _bearer(bearer)
        if token is None:
            return Decision(False, 401, "missing_token", op=op, path=path)
        try:
            claims = self._verify(token, now)
        except CaptokError as exc:
            return Decision(False, 401, exc.code, op=op, path=path, detail=exc.detail)
        if self.enforce_origin and claims.origin is not None and claims.origin != client_id:
            return Decision(False, 403, "origin_mismatch", op=op, path=path, claims=claims)
        acl = acl_from_token(claims, self.mount_prefix)
        if not permits(acl.entries, op, path):
            return Decision(False, 403, "insufficient_scope", op=op, path=path, claims=claims)
        return Decision(True, 200, None, op=op, path=path, claims=claims)


# -- audit --------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRecord:
    timestamp: float
    jti: str | None
    sub: str | None
    op: str | None
    path: str | None
    decision: str
    status: int
    error: str | None = None
    client: str | None = None
    method: str | None = None
    raw_path: str | None = None
    token: str | None = field(default=None, repr=False)

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        if doc["token"] is None:
            del doc["token"]
        return doc


class AuditLog:
    """Append-only JSON-lines audit trail; appends are serialized."""

    def __init__(self, path: Path | None = None, keep: bool = True) -> None:
        self.path = Path(path) if path is not None else None
        self.keep = keep
        self.records: list[AuditRecord] = []
        self._lock = threading.Lock()

    def append(self, record: AuditRecord) -> None:
        with self._lock:
            if self.keep:
                self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json()) + "\n")

    @staticmethod
    def read(path: Path) -> list[AuditRecord]:
        out = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.append(AuditRecord(**json.loads(line)))
        return out


def replay_decision(record: AuditRecord, policy: AccessPolicy) -> str:
    """Re-derive allow/deny for a logged request with the offline policy."""
    if record.method is None or record.raw_path is None:
        raise ValueError("record lacks the request line needed for replay")
    decision = policy.decide(record.method, record.raw_path, record.token, record.client, now=record.timestamp)
    return "allow" if decision.allowed else "deny"


def replay_audit(records: Iterable[AuditRecord], policy: AccessPolicy) -> list[tuple[AuditRecord, str]]:
    """Return every record whose replayed verdict differs from the logged one.

    Availability refusals (stale keys under fail-closed) are not token
    decisions and are skipped.
    """
    return [
        (r, v) for r in records
        if r.error != "key_cache_stale" and (v := replay_decision(r, policy)) != r.decision
    ]


# -- gateway ------------------------------------------------------------------


@dataclass(frozen=True)
class GatewayResponse:
    status: int
    body: bytes = b""
    content_type: str = "application/json"
    error: str | None = None

    def json(self) -> Any:
        return json.loads(self.body)


def _error(status: int, code: str, detail: str = "") -> GatewayResponse:
    body = json.dumps({"error": code, "detail": detail or code}).encode()
    return GatewayResponse(status, body, "application/json", code)


class DataGateway:
    def __init__(
        self,
        config: GatewayConfig,
        keys: KeyCache,
        *,
        clock: Clock | None = None,
        introspect: Callable[[str], Mapping[str, Any]] | None = None,
        audit: AuditLog | None = None,
    ) -> None:
        self.config = config
        self.keys = keys
        self.clock = clock or SystemClock()
        self.introspections = 0
        self._introspect = introspect
        if config.introspection and introspect is None:
            raise ValueError("introspection mode needs an introspection callable")
        self.policy = AccessPolicy.from_config(
            config,
            keys.snapshot,
            clock=self.clock,
            introspect=self._counted_introspect if config.introspection else None,
        )
        self.audit = audit if audit is not None else AuditLog(config.audit_log)
        self.root = config.document_root.resolve()
        self._stale_warned_at: float | None = None

    @property
    def issuer_calls(self) -> int:
        return self.keys.fetch_count + self.introspections

    def _counted_introspect(self, token: str) -> Mapping[str, Any]:
        self.introspections += 1
        return self._introspect(token)  # type: ignore[misc]

    def _local(self, path: str) -> Path:
        target = self.root.joinpath(*segments(path)) if path != "/" else self.root
        resolved = target.resolve()
        if resolved != self.root and self.root not in resolved.parents:
            raise PathError(f"{path} escapes the document root")
        return target

    def _stale_check(self, now: float) -> GatewayResponse | None:
        if self.config.introspection or not self.keys.is_stale(now):
            return None
        if self.config.fail_closed:
            return _error(503, "key_cache_stale", "issuer keys are stale and fail-closed is set")
        if self._stale_warned_at is None or now - self._stale_warned_at > self.keys.interval:
            log.warning("serving with stale issuer keys (fetched at %s)", self.keys.fetched_at)
            self._stale_warned_at = now
        return None

    def handle_request(
        self,
        method: str,
        path: str,
        bearer: str | None = None,
        client_id: str | None = None,
        body: bytes | None = None,
    ) -> GatewayResponse:
        now = self.clock.now()
        stale = self._stale_check(now)
        if stale is not None:
            response, decision = stale, Decision(False, stale.status, stale.error)
        else:
            decision = self.policy.decide(method, path, bearer, client_id, now)
            if not decision.allowed:
                response = _error(decision.status, decision.code or "denied", decision.detail)
            else:
                response = self._serve(decision, body)
        claims = decision.claims
        self.audit.append(
            AuditRecord(
                timestamp=now,
                jti=claims.jti if claims else None,
                sub=claims.sub if claims else None,
                op=decision.op,
                path=decision.path,
                decision="allow" if decision.allowed else "deny",
                status=response.status,
                error=response.error,
                client=client_id,
                method=method.upper(),
                raw_path=path,
                token=_bearer(bearer) if self.config.audit_include_token else None,
            )
        )
        return response

    def _serve(self, decision: Decision, body: bytes | None) -> GatewayResponse:
        try:
            target = self._local(decision.path or "/")
        except PathError as exc:
            return _error(400, exc.code, exc.detail)
        if decision.op == "read":
            if not target.is_file():
                return _error(404, "not_found", decision.path or "")
            return GatewayResponse(200, target.read_bytes(), "application/octet-stream")
        if target == self.root or target.is_dir():
            return _error(400, "is_directory", decision.path or "")
        existed = target.exists()
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(f".{target.name}.part")
        tmp.write_bytes(body or b"")
        os.replace(tmp, target)
        return GatewayResponse(204 if existed else 201, b"", "application/octet-stream")


# -- execute-side local cache -------------------------------------------------


class LocalCache:
    """Bytes previously fetched through the gateway, held on the execute node."""

    def __init__(self) -> None:
        self._data: dict[str, bytes] = {}

    def put(self, path: str, data: bytes) -> None:
        self._data[normalize_path(path)] = data

    def get(self, path: str) -> bytes | None:
        return self._data.get(path)

    def __contains__(self, path: object) -> bool:
        return path in self._data


def authorize_cached_read(
    token: str | None,
    path: str,
    cache: LocalCache,
    policy: AccessPolicy,
    client_id: str | None = None,
    now: float | None = None,
) -> tuple[Decision, bytes | None]:
    """Serve ``path`` from the local cache only if the token still authorizes it."""
    decision = policy.decide("GET", path, token, client_id, now)
    if not decision.allowed:
        return decision, None
    data = cache.get(decision.path or "")
    if data is None:
        return Decision(False, 404, "cache_miss", op="read", path=decision.path, claims=decision.claims), None
    return decision, data


# -- HTTP ---------------------------------------------------------------------


class GatewayHandler(JSONHandler):
    client_header = "X-Client-Id"

    def __init__(self, *args: Any, gateway: DataGateway, **kwargs: Any) -> None:
        self.gateway = gateway
        super().__init__(*args, **kwargs)

    def _handle(self, method: str) -> None:
        body = self.read_body() if method == "PUT" else None
        client = self.headers.get(self.client_header) or self.client_address[0]
        resp = self.gateway.handle_request(
            method, unquote(self.path.split("?")[0]), self.headers.get("Authorization"), client, body
        )
        self.send_response(resp.status)
        if resp.status == 401:
            self.send_header("WWW-Authenticate", f'Bearer error="invalid_token", error_description="{resp.error}"')
        self.send_header("Content-Type", resp.content_type)
        self.send_header("Content-Length", str(len(resp.body)))
        self.end_headers()
        self.wfile.write(resp.body)

    def do_GET(self) -> None:
        self._handle("GET")

    def do_PUT(self) -> None:
        self._handle("PUT")

    def do_DELETE(self) -> None:
        self._handle("DELETE")

    def do_POST(self) -> None:
        self._handle("POST")


def make_gateway_server(gateway: DataGateway) -> ThreadingHTTPServer:
    handler = partial(GatewayHandler, gateway=gateway)
    server = ThreadingHTTPServer((gateway.config.host, gateway.config.port), handler)
    server.daemon_threads = True
    return server

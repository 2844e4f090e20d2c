"""Submit-side token manager.

Keeps refresh handles in an encrypted vault, mints and caches per-phase access
tokens, refreshes tokens of running jobs before they expire, and puts jobs on
hold (with exponential backoff) when the issuer cannot be reached.  Only
access tokens ever leave this module.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import secrets
import socket
import socketserver
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .authz import dominates
from .clock import Clock, SystemClock
from .errors import (
    CaptokError,
    NoDominatingGrant,
    PhaseViolation,
    RefreshExpired,
    Revoked,
    UnknownHandle,
    VaultCorrupt,
    VaultLocked,
)
from .tokens import Permission, coerce_scope, decode_unverified, print_scope

log = logging.getLogger(__name__)

VAULT_KEY_ENV = "CAPTOK_VAULT_KEY"
VAULT_MAGIC = b"CTVLT"
VAULT_VERSION = 1

PHASES = ("stage_in", "execute", "stage_out")
DEFAULT_MARGIN = 60
TERMINAL_ERRORS = (RefreshExpired, Revoked, UnknownHandle, NoDominatingGrant)


# -- vault --------------------------------------------------------------------


def generate_vault_key(path: str | os.PathLike[str], force: bool = False) -> bytes:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    key = AESGCM.generate_key(bit_length=256)
    path.write_text(base64.b64encode(key).decode() + "\n")
    os.chmod(path, 0o600)
    return key


def load_vault_key(path: str | os.PathLike[str] | None = None) -> bytes | None:
    """Read the vault key from ``path`` or the file named by ``$CAPTOK_VAULT_KEY``."""
    path = path or os.environ.get(VAULT_KEY_ENV)
    if not path:
        return None
    key = base64.b64decode(Path(path).read_text().strip())
    if len(key) != 32:
        raise VaultCorrupt("vault key must be 32 bytes")
    return key


@dataclass(frozen=True)
class VaultEntry:
    user: str
    issuer: str
    handle: str = field(repr=False)
    scopes: tuple[Permission, ...]
    expires_at: int
    audience: str = ""

    def redacted(self) -> dict[str, Any]:
        return {
            "user": self.user,
            "issuer": self.issuer,
            "handle": "<redacted>",
            "scopes": print_scope(self.scopes),
            "expires_at": self.expires_at,
            "audience": self.audience,
        }

    def to_json(self) -> dict[str, Any]:
        doc = self.redacted()
        doc["handle"] = self.handle
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> VaultEntry:
        return cls(
            user=doc["user"],
            issuer=doc["issuer"],
            handle=doc["handle"],
            scopes=tuple(coerce_scope(doc["scopes"])),
            expires_at=int(doc["expires_at"]),
            audience=doc.get("audience", ""),
        )


class Vault:
    """AES-GCM encrypted store of refresh handles.

    File layout: ``b"CTVLT" | version byte | 12-byte nonce | ciphertext``; the
    first six bytes are authenticated as associated data.  Without a key the
    vault is locked and refuses every operation that would touch handles.
    """

    def __init__(self, path: str | os.PathLike[str] | None = None, key: bytes | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._key = key
        self._lock = threading.Lock()
        self._entries: list[VaultEntry] = []
        if self.path is not None and self.path.exists():
            self._entries = self._load()

    @property
    def locked(self) -> bool:
        return self._key is None

    def _aead(self) -> AESGCM:
        if self._key is None:
            raise VaultLocked("no vault key provisioned")
        return AESGCM(self._key)

    def _load(self) -> list[VaultEntry]:
        aead = self._aead()
        blob = self.path.read_bytes()
        header = VAULT_MAGIC + bytes([VAULT_VERSION])
        if not blob.startswith(VAULT_MAGIC) or len(blob) < len(header) + 12:
            raise VaultCorrupt("not a vault file")
        if blob[len(VAULT_MAGIC)] != VAULT_VERSION:
            raise VaultCorrupt(f"unsupported vault version {blob[len(VAULT_MAGIC)]}")
        nonce = blob[len(header):len(header) + 12]
        try:
            plain = aead.decrypt(nonce, blob[len(header) + 12:], header)
        except InvalidTag as exc:
            raise VaultCorrupt("vault authentication failed (wrong key or tampered file)") from exc
        return [VaultEntry.from_json(d) for d in json.loads(plain)["entries"]]

    def _save(self) -> None:
        if self.path is None:
            return
        header = VAULT_MAGIC + bytes([VAULT_VERSION])
        nonce = secrets.token_bytes(12)
        plain = json.dumps({"entries": [e.to_json() for e in self._entries]}).encode()
        blob = header + nonce + self._aead().encrypt(nonce, plain, header)
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        tmp.write_bytes(blob)
        os.chmod(tmp, 0o600)
        os.replace(tmp, self.path)

    def store_refresh(
        self,
        user: str,
        issuer: str,
        handle: str,
        scopes: str | Sequence[Permission | str],
        expiry: int,
        audience: str = "",
    ) -> dict[str, Any]:
        self._aead()
        entry = VaultEntry(user, issuer, handle, tuple(coerce_scope(scopes)), int(expiry), audience)
        with self._lock:
            self._entries = [
                e for e in self._entries
                if (e.user, e.issuer, e.scopes) != (entry.user, entry.issuer, entry.scopes)
            ] + [entry]
            self._save()
        return {"stored": True, **entry.redacted()}

    def list_entries(self, user: str | None = None) -> list[dict[str, Any]]:
        return [e.redacted() for e in self._entries if user is None or e.user == user]

    def entries(self, user: str | None = None) -> list[VaultEntry]:
        self._aead()
        return [e for e in self._entries if user is None or e.user == user]

    def handles(self) -> list[str]:
        return [e.handle for e in self._entries]


# -- requests and cache -------------------------------------------------------


class AccessMinter(Protocol):
    def mint_access(
        self,
        handle: str,
        scopes: str | Sequence[Permission | str] | None = None,
        audience: str | None = None,
        origin: str | None = None,
    ) -> str: ...


@dataclass(frozen=True)
class TokenRequest:
    job_id: str
    phase: str
    scopes: tuple[Permission, ...]
    audience: str | None = None
    origin: str | None = None
    user: str | None = None

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        object.__setattr__(self, "scopes", tuple(coerce_scope(self.scopes)))
        if not self.scopes:
            raise ValueError("token request needs at least one scope")

    @property
    def scope_string(self) -> str:
        return print_scope(self.scopes)


@dataclass(frozen=True)
class CacheEntry:
    key: tuple[str, ...]
    token: str
    exp: int


@dataclass
class HoldState:
    cause: str
    previous: str
    attempts: int = 0
    next_retry: float = 0.0
    retry_times: list[float] = field(default_factory=list)


@dataclass
class ManagedJob:
    request: TokenRequest
    state: str = "pending"
    token: str | None = None
    exp: int = 0
    deliveries: list[float] = field(default_factory=list)
    hold: HoldState | None = None
    errors: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Delivery:
    job_id: str
    token: str
    at: float


class TokenManager:
    def __init__(
        self,
        vault: Vault,
        issuers: AccessMinter | Mapping[str, AccessMinter],
        *,
        clock: Clock | None = None,
        margin: float = DEFAULT_MARGIN,
        share_cache: bool = True,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        backoff_cap: float = 60.0,
    ) -> None:
        self.vault = vault
        self._issuers = issuers
        self.clock = clock or SystemClock()
        self.margin = margin
        self.share_cache = share_cache
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.backoff_cap = backoff_cap
        self._cache: dict[tuple[str, ...], CacheEntry] = {}
        self._key_locks: dict[tuple[str, ...], threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._completed: set[str] = set()
        self.jobs: dict[str, ManagedJob] = {}
        self.mints: Counter[tuple[str, ...]] = Counter()

    # plumbing

    def _minter(self, issuer: str) -> AccessMinter:
        if isinstance(self._issuers, Mapping):
            return self._issuers[issuer]
        return self._issuers

    def _now(self, now: float | None) -> float:
        return self.clock.now() if now is None else now

    def cache_key(self, req: TokenRequest) -> tuple[str, ...]:
        key = (req.scope_string, req.audience or "", req.origin or "")
        return key if self.share_cache else key + (req.job_id,)

    def _grant_for(self, req: TokenRequest, now: float) -> VaultEntry:
        dominating = [
            e for e in self.vault.entries(req.user)
            if (not req.audience or not e.audience or e.audience == req.audience)
            and all(any(dominates(g, want) for g in e.scopes) for want in req.scopes)
        ]
        if not dominating:
            raise NoDominatingGrant(f"no stored grant covers {req.scope_string!r}")
        live = [e for e in dominating if now < e.expires_at]
        if not live:
            raise RefreshExpired("every covering refresh grant has expired")
        return max(live, key=lambda e: e.expires_at)

    def store_refresh(self, *args: Any, **kwargs: Any) -> dict[str, Any]:
        return self.vault.store_refresh(*args, **kwargs)

    def mark_complete(self, job_id: str) -> None:
        self._completed.add(job_id)

    # access tokens

    def get_access(self, req: TokenRequest, now: float | None = None) -> str:
        """Return a cached token with more than ``margin`` seconds left, or mint one."""
        now = self._now(now)
        if req.phase == "stage_out" and req.job_id not in self._completed:
            raise PhaseViolation(f"job {req.job_id} has not completed execution")
        key = self.cache_key(req)
        hit = self._cache.get(key)
        if hit is not None and hit.exp - now > self.margin:
            return hit.token
        with self._locks_guard:
            lock = self._key_locks.setdefault(key, threading.Lock())
        with lock:
            hit = self._cache.get(key)
            if hit is not None and hit.exp - now > self.margin:
                return hit.token
            grant = self._grant_for(req, now)
            token = self._minter(grant.issuer).mint_access(
                grant.handle, req.scope_string, req.audience, req.origin
            )
            _, claims = decode_unverified(token)
            self._cache[key] = CacheEntry(key, token, claims.exp)
            self.mints[key] += 1
            return token

    def prune_cache(self, now: float | None = None) -> int:
        now = self._now(now)
        stale = [k for k, e in self._cache.items() if e.exp <= now]
        for k in stale:
            self._cache.pop(k, None)
        return len(stale)

    # running jobs

    def start_job(self, req: TokenRequest, now: float | None = None) -> Delivery | None:
        """Register a running job and deliver its first token (or hold it)."""
        now = self._now(now)
        job = self.jobs[req.job_id] = ManagedJob(req, state="running")
        return self._deliver(job, now)

    def finish_job(self, job_id: str) -> None:
        job = self.jobs.get(job_id)
        if job is not None:
            job.state = "finished"
        self.mark_complete(job_id)

    def _deliver(self, job: ManagedJob, now: float) -> Delivery | None:
        try:
            token = self.get_access(job.request, now)
        except CaptokError as exc:
            self.hold_and_retry(job.request.job_id, exc, now)
            return None
        _, claims = decode_unverified(token)
        job.token, job.exp = token, claims.exp
        job.deliveries.append(now)
        return Delivery(job.request.job_id, token, now)

    def refresh_running(self, job_ids: Iterable[str] | None = None, now: float | None = None) -> list[Delivery]:
        """Replace tokens within ``margin`` of expiry for every running job."""
        now = self._now(now)
        ids = list(self.jobs) if job_ids is None else list(job_ids)
        out = []
        for job_id in ids:
            job = self.jobs.get(job_id)
            if job is None or job.state != "running":
                continue
            if job.token is not None and job.exp - now > self.margin:
                continue
            delivery = self._deliver(job, now)
            if delivery is not None:
                out.append(delivery)
        return out

    def backoff_delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * self.backoff_factor**attempt)

    def hold_and_retry(self, job_id: str, error: CaptokError, now: float | None = None) -> str:
        """Put a job on hold; terminal causes need a fresh refresh grant."""
        now = self._now(now)
        job = self.jobs[job_id]
        job.errors.append(error.code)
        if job.hold is None:
            job.hold = HoldState(cause=error.code, previous=job.state if job.state != "hold" else "running")
        job.hold.cause = error.code
        if isinstance(error, TERMINAL_ERRORS):
            job.state = "terminal_hold"
            log.warning("job %s on terminal hold: %s", job_id, error.code)
            return job.state
        job.state = "hold"
        job.hold.next_retry = now + self.backoff_delay(job.hold.attempts)
        log.info("job %s held (%s); retry at %s", job_id, error.code, job.hold.next_retry)
        return job.state

    def retry_held(self, now: float | None = None, job_ids: Iterable[str] | None = None) -> list[Delivery]:
        """Retry every held job whose backoff has elapsed."""
        now = self._now(now)
        ids = list(self.jobs) if job_ids is None else list(job_ids)
        out = []
        for job_id in ids:
            job = self.jobs.get(job_id)
            if job is None or job.state != "hold" or job.hold is None or job.hold.next_retry > now:
                continue
            job.hold.retry_times.append(now)
            job.hold.attempts += 1
            try:
                token = self.get_access(job.request, now)
            except CaptokError as exc:
                self.hold_and_retry(job_id, exc, now)
                continue
            _, claims = decode_unverified(token)
            job.token, job.exp = token, claims.exp
            job.deliveries.append(now)
            job.state = job.hold.previous
            job.hold = None
            out.append(Delivery(job_id, token, now))
        return out

    def next_wakeup(self, job_id: str) -> float | None:
        job = self.jobs.get(job_id)
        if job is None:
            return None
        if job.state == "running" and job.token is not None:
            return job.exp - self.margin
        if job.state == "hold" and job.hold is not None:
            return job.hold.next_retry
        return None


def submit_grant(
    issuer: Any,
    vault: Vault,
    *,
    user: str,
    password: str,
    scopes: str | Sequence[Permission | str],
    audience: str,
    issuer_url: str,
    now: float,
) -> dict[str, Any]:
    """Authenticate to the issuer and keep the resulting refresh handle in the vault."""
    grant = issuer.grant_refresh(user, password, scopes, audience)
    return vault.store_refresh(
        user, issuer_url, grant.refresh_token, grant.scope, int(now) + grant.expires_in, audience
    )


# -- local socket API ---------------------------------------------------------


class _SocketHandler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        manager: TokenManager = self.server.manager  # type: ignore[attr-defined]
        for line in self.rfile:
            try:
                reply = _dispatch(manager, json.loads(line))
            except CaptokError as exc:
                reply = exc.as_dict()
            except (ValueError, KeyError, TypeError) as exc:
                reply = {"error": "invalid_request", "detail": str(exc)}
            self.wfile.write(json.dumps(reply).encode() + b"\n")
            self.wfile.flush()


def _dispatch(manager: TokenManager, doc: Mapping[str, Any]) -> dict[str, Any]:
    op = doc.get("op")
    if op == "get_access":
        req = TokenRequest(
            job_id=doc["job_id"],
            phase=doc.get("phase", "execute"),
            scopes=tuple(coerce_scope(doc["scopes"])),
            audience=doc.get("audience"),
            origin=doc.get("origin"),
            user=doc.get("user"),
        )
        return {"access_token": manager.get_access(req)}
    if op == "store_refresh":
        return manager.store_refresh(
            doc["user"], doc["issuer"], doc["handle"], doc["scopes"], int(doc["expiry"]), doc.get("audience", "")
        )
    if op == "list":
        return {"entries": manager.vault.list_entries(doc.get("user"))}
    if op == "complete":
        manager.mark_complete(doc["job_id"])
        return {"ok": True}
    raise ValueError(f"unknown op {op!r}")


class ManagerSocketServer(socketserver.ThreadingUnixStreamServer):
    """JSON-lines API over a Unix socket for CLI clients."""

    daemon_threads = True

    def __init__(self, path: str | os.PathLike[str], manager: TokenManager) -> None:
        self.manager = manager
        if os.path.exists(path):
            os.unlink(path)
        super().__init__(str(path), _SocketHandler)
        os.chmod(path, 0o600)


def socket_call(path: str | os.PathLike[str], doc: Mapping[str, Any], timeout: float = 10.0) -> dict[str, Any]:
    with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
        sock.settimeout(timeout)
        sock.connect(str(path))
        sock.sendall(json.dumps(doc).encode() + b"\n")
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
    return json.loads(buf)


"""Token server: user/group policy, refresh grants and access-token minting.

Refresh tokens are opaque random handles tracked server side, so every
long-lived grant stays revocable.  Access tokens are short-lived signed
capabilities that verifiers check offline against :meth:`TokenIssuer.keyset`.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import logging
import os
import random
import re
import secrets
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

from filelock import FileLock

from .authz import attenuate, dominates
from .clock import Clock, SystemClock
from .errors import (
    AudienceNotPermitted,
    AuthenticationFailed,
    CaptokError,
    EscalationError,
    NoMatchingRule,
    RefreshExpired,
    Revoked,
    UnknownHandle,
)
from .tokens import (
    DEFAULT_ALG,
    KeySet,
    Permission,
    SigningKey,
    TokenClaims,
    coerce_scope,
    encode_token,
    generate_keypair,
    parse_permission,
    print_scope,
    verify_token,
)

log = logging.getLogger(__name__)

DEFAULT_ACCESS_LIFETIME = 600
DEFAULT_REFRESH_LIFETIME = 30 * 24 * 3600
DEFAULT_KEY_OVERLAP = 24 * 3600

USERNAME_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.-]{0,63}")


def valid_username(name: str) -> bool:
    return bool(USERNAME_RE.fullmatch(name)) and name not in (".", "..")


# -- policy -------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyRule:
    """Maps a user or group to grantable scope templates.

    Templates may contain ``{username}``, expanded with the subject's name.
    """

    match: str
    kind: str = "group"
    grantable: tuple[str, ...] = ()
    max_access_lifetime: int = DEFAULT_ACCESS_LIFETIME
    max_refresh_lifetime: int = DEFAULT_REFRESH_LIFETIME
    audiences: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "grantable", tuple(self.grantable))
        object.__setattr__(self, "audiences", tuple(self.audiences))
        if self.kind not in ("user", "group"):
            raise ValueError(f"rule kind must be user or group, not {self.kind!r}")
        if self.max_access_lifetime <= 0 or self.max_refresh_lifetime <= 0:
            raise ValueError("lifetimes must be positive")
        if self.max_access_lifetime > self.max_refresh_lifetime:
            raise ValueError("access lifetime exceeds refresh lifetime")
        for template in self.grantable:
            if re.search(r"[{}]", template.replace("{username}", "")):
                raise ValueError(f"unknown placeholder in {template!r}")
        # a probe username exercises every template
        self.expand("probe.user-1")

    def applies_to(self, sub: str, groups: Iterable[str]) -> bool:
        if self.kind == "user":
            return self.match == sub
        return self.match in set(groups)

    def expand(self, username: str) -> list[Permission]:
        if not valid_username(username):
            raise ValueError(f"illegal username {username!r}")
        return [parse_permission(t.replace("{username}", username)) for t in self.grantable]

    def to_json(self) -> dict[str, Any]:
        return {
            self.kind: self.match,
            "grantable": list(self.grantable),
            "max_access_lifetime": self.max_access_lifetime,
            "max_refresh_lifetime": self.max_refresh_lifetime,
            "audiences": list(self.audiences),
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> PolicyRule:
        if ("user" in doc) == ("group" in doc):
            raise ValueError("policy rule needs exactly one of 'user' or 'group'")
        kind = "user" if "user" in doc else "group"
        return cls(
            match=doc[kind],
            kind=kind,
            grantable=tuple(doc.get("grantable", ())),
            max_access_lifetime=int(doc.get("max_access_lifetime", DEFAULT_ACCESS_LIFETIME)),
            max_refresh_lifetime=int(doc.get("max_refresh_lifetime", DEFAULT_REFRESH_LIFETIME)),
            audiences=tuple(doc.get("audiences", ())),
        )


def load_policy(path: str | os.PathLike[str]) -> list[PolicyRule]:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list):
        raise ValueError("policy file must hold a JSON list of rules")
    return [PolicyRule.from_json(d) for d in doc]


@dataclass(frozen=True)
class PolicyGrant:
    scopes: tuple[Permission, ...]
    access_lifetime: int
    refresh_lifetime: int


def evaluate_policy(
    rules: Sequence[PolicyRule],
    sub: str,
    groups: Iterable[str],
    requested: Sequence[Permission],
    audience: str,
) -> PolicyGrant:
    """Grant ``requested`` if every atom is dominated by a matching rule.

    An empty request grants everything the eligible rules allow.  Each atom's
    lifetime is the most generous rule covering it; the grant lives as long as
    its shortest-lived atom.
    """
    groups = list(groups)
    matching = [r for r in rules if r.applies_to(sub, groups)]
    if not matching:
        raise NoMatchingRule(f"no policy rule matches {sub!r}")
    eligible = [r for r in matching if audience in r.audiences]
    if not eligible:
        raise AudienceNotPermitted(f"audience {audience!r} not permitted for {sub!r}")
    expanded = [(r, r.expand(sub)) for r in eligible]
    if requested:
        wanted = list(requested)
    else:
        wanted = []
        for _, perms in expanded:
            wanted.extend(p for p in perms if p not in wanted)
        if not wanted:
            raise NoMatchingRule(f"matching rules grant nothing to {sub!r}")
    access, refresh = [], []
    for atom in wanted:
        covering = [r for r, perms in expanded if any(dominates(p, atom) for p in perms)]
        if not covering:
            raise EscalationError(atom)
        access.append(max(r.max_access_lifetime for r in covering))
        refresh.append(max(r.max_refresh_lifetime for r in covering))
    return PolicyGrant(tuple(wanted), min(access), min(refresh))


# -- users --------------------------------------------------------------------


def hash_secret(secret: str, iterations: int = 200_000, salt: bytes | None = None) -> str:
    salt = salt if salt is not None else secrets.token_bytes(16)
    digest = hashlib.pbkdf2_hmac("sha256", secret.encode(), salt, iterations)
    return "pbkdf2_sha256${}${}${}".format(
        iterations, base64.b64encode(salt).decode(), base64.b64encode(digest).decode()
    )


def check_secret(secret: str, stored: str) -> bool:
    try:
        scheme, iterations, salt, digest = stored.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2_sha256":
        return False
    actual = hashlib.pbkdf2_hmac("sha256", secret.encode(), base64.b64decode(salt), int(iterations))
    return hmac.compare_digest(actual, base64.b64decode(digest))


@dataclass
class UserEntry:
    digest: str
    groups: list[str] = field(default_factory=list)


class UserDirectory:
    """Local stand-in for federated login: salted secret digests plus groups."""

    def __init__(self, users: Mapping[str, UserEntry] | None = None) -> None:
        self._users: dict[str, UserEntry] = dict(users or {})

    def add_user(self, name: str, secret: str, groups: Iterable[str] = (), iterations: int = 200_000) -> None:
        if not valid_username(name):
            raise ValueError(f"illegal username {name!r}")
        self._users[name] = UserEntry(hash_secret(secret, iterations), list(groups))

    def authenticate(self, name: str, secret: str) -> list[str]:
        entry = self._users.get(name)
        if entry is None or not check_secret(secret, entry.digest):
            raise AuthenticationFailed("bad username or secret")
        return list(entry.groups)

    def groups(self, name: str) -> list[str]:
        return list(self._users[name].groups)

    def __contains__(self, name: object) -> bool:
        return name in self._users

    def to_json(self) -> dict[str, Any]:
        return {"users": {n: {"digest": e.digest, "groups": e.groups} for n, e in self._users.items()}}

    def save(self, path: str | os.PathLike[str]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> UserDirectory:
        users = {}
        for name, entry in doc.get("users", {}).items():
            if "digest" in entry:
                users[name] = UserEntry(entry["digest"], list(entry.get("groups", [])))
            else:
                # plaintext "secret" entries are hashed on load and never kept
                users[name] = UserEntry(hash_secret(entry["secret"]), list(entry.get("groups", [])))
        return cls(users)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> UserDirectory:
        return cls.from_json(json.loads(Path(path).read_text()))


# -- refresh store ------------------------------------------------------------


def handle_id(handle: str) -> str:
    """Stores index refresh records by digest; the handle itself is never persisted."""
    return hashlib.sha256(handle.encode()).hexdigest()


@dataclass(frozen=True)
class RefreshRecord:
    handle_id: str
    sub: str
    groups: tuple[str, ...]
    scopes: tuple[Permission, ...]
    audiences: tuple[str, ...]
    issued_at: int
    expires_at: int
    max_access_lifetime: int
    revoked: bool = False

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["scopes"] = print_scope(self.scopes)
        doc["groups"] = list(self.groups)
        doc["audiences"] = list(self.audiences)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> RefreshRecord:
        return cls(
            handle_id=doc["handle_id"],
            sub=doc["sub"],
            groups=tuple(doc["groups"]),
            scopes=tuple(coerce_scope(doc["scopes"])),
            audiences=tuple(doc["audiences"]),
            issued_at=int(doc["issued_at"]),
            expires_at=int(doc["expires_at"]),
            max_access_lifetime=int(doc["max_access_lifetime"]),
            revoked=bool(doc.get("revoked", False)),
        )


class RefreshStore(Protocol):
    def get(self, handle_id: str) -> RefreshRecord | None: ...

    def put(self, record: RefreshRecord) -> None: ...

    def __len__(self) -> int: ...


class MemoryRefreshStore:
    def __init__(self) -> None:
        self._records: dict[str, RefreshRecord] = {}
        self._lock = threading.Lock()

    def get(self, handle_id: str) -> RefreshRecord | None:
        return self._records.get(handle_id)

    def put(self, record: RefreshRecord) -> None:
        with self._lock:
            records = dict(self._records)
            records[record.handle_id] = record
            self._records = records

    def __len__(self) -> int:
        return len(self._records)


class JsonFileRefreshStore:
    """Single JSON file rewritten atomically under an exclusive file lock.

    Readers use the last in-memory snapshot; writers reload, modify and
    replace the file so several processes can share it.
    """

    def __init__(self, path: str | os.PathLike[str]) -> None:
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")
        self._records: dict[str, RefreshRecord] = self._read()

    def _read(self) -> dict[str, RefreshRecord]:
        if not self.path.exists():
            return {}
        doc = json.loads(self.path.read_text() or "{}")
        return {k: RefreshRecord.from_json(v) for k, v in doc.get("records", {}).items()}

    def get(self, handle_id: str) -> RefreshRecord | None:
        return self._records.get(handle_id)

    def put(self, record: RefreshRecord) -> None:
        with self._lock:
            records = self._read()
            records[record.handle_id] = record
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_text(json.dumps({"records": {k: r.to_json() for k, r in records.items()}}))
            os.replace(tmp, self.path)
            self._records = records

    def __len__(self) -> int:
        return len(self._records)


# -- issuer -------------------------------------------------------------------


@dataclass(frozen=True)
class RefreshGrant:
    """What the client receives from a password grant."""

    refresh_token: str
    scope: str
    expires_in: int
    audience: str

    def to_json(self) -> dict[str, Any]:
        return {"refresh_token": self.refresh_token, "scope": self.scope, "expires_in": self.expires_in}


@dataclass
class _KeySlot:
    key: SigningKey
    retired_at: float | None = None


class TokenIssuer:
    def __init__(
        self,
        issuer: str,
        policy: Sequence[PolicyRule],
        users: UserDirectory,
        *,
        store: RefreshStore | None = None,
        clock: Clock | None = None,
        access_lifetime: int = DEFAULT_ACCESS_LIFETIME,
        refresh_lifetime: int = DEFAULT_REFRESH_LIFETIME,
        key_overlap: int = DEFAULT_KEY_OVERLAP,
        alg: str = DEFAULT_ALG,
        signing_key: SigningKey | None = None,
        rng: random.Random | None = None,
    ) -> None:
        self.issuer = issuer.rstrip("/")
        self.policy = list(policy)
        self.users = users
        self.store: RefreshStore = store if store is not None else MemoryRefreshStore()
        self.clock = clock or SystemClock()
        self.access_lifetime = access_lifetime
        self.refresh_lifetime = refresh_lifetime
        self.key_overlap = key_overlap
        self.alg = alg
        self._rng = rng
        self._key_lock = threading.Lock()
        self._keys: list[_KeySlot] = [_KeySlot(signing_key or self._new_key())]
        self.stats: Counter[str] = Counter()

    def _random_bytes(self, n: int) -> bytes:
        return self._rng.randbytes(n) if self._rng is not None else secrets.token_bytes(n)

    def _token(self, nbytes: int = 16) -> str:
        return base64.urlsafe_b64encode(self._random_bytes(nbytes)).rstrip(b"=").decode()

    def _new_key(self) -> SigningKey:
        seed = self._random_bytes(32) if self._rng is not None else None
        return generate_keypair(self.alg, seed=seed)[1]

    def _now(self) -> int:
        return int(self.clock.now())

    # keys

    @property
    def current_kid(self) -> str:
        return self._keys[-1].key.kid

    def rotate_keys(self) -> str:
        """Make a fresh key current; older public keys stay published for the overlap window."""
        new = self._new_key()
        now = self.clock.now()
        with self._key_lock:
            keys = [s for s in self._keys if s.retired_at is None or now < s.retired_at + self.key_overlap]
            keys[-1] = _KeySlot(keys[-1].key, retired_at=now)
            keys.append(_KeySlot(new))
            self._keys = keys
        log.info("rotated signing key to %s", new.kid)
        return new.kid

    def keyset(self) -> KeySet:
        now = self.clock.now()
        slots = self._keys
        records = [
            s.key.record.with_current(s.retired_at is None)
            for s in slots
            if s.retired_at is None or now < s.retired_at + self.key_overlap
        ]
        return KeySet(tuple(records))

    def discovery(self, base_url: str | None = None) -> dict[str, str]:
        base = (base_url or self.issuer).rstrip("/")
        return {
            "issuer": self.issuer,
            "jwks_uri": f"{base}/jwks",
            "token_endpoint": f"{base}/token",
            "introspection_endpoint": f"{base}/introspect",
            "revocation_endpoint": f"{base}/revoke",
        }

    # grants

    def evaluate_policy(
        self, sub: str, groups: Iterable[str], requested: Sequence[Permission], audience: str
    ) -> PolicyGrant:
        return evaluate_policy(self.policy, sub, groups, requested, audience)

    def grant_refresh(
        self,
        username: str,
        password: str,
        scopes: str | Sequence[Permission | str] | None,
        audience: str,
    ) -> RefreshGrant:
        groups = self.users.authenticate(username, password)
        return self.grant_for(username, groups, coerce_scope(scopes), audience)

    def grant_for(
        self, sub: str, groups: Sequence[str], requested: Sequence[Permission], audience: str
    ) -> RefreshGrant:
        """Issue a refresh grant for an already-authenticated subject."""
        grant = self.evaluate_policy(sub, groups, requested, audience)
        lifetime = min(grant.refresh_lifetime, self.refresh_lifetime)
        handle = self._token(24)
        now = self._now()
        record = RefreshRecord(
            handle_id=handle_id(handle),
            sub=sub,
            groups=tuple(groups),
            scopes=grant.scopes,
            audiences=(audience,),
            issued_at=now,
            expires_at=now + lifetime,
            max_access_lifetime=grant.access_lifetime,
        )
        self.store.put(record)
        self.stats["grants"] += 1
        return RefreshGrant(handle, print_scope(grant.scopes), lifetime, audience)

    def _record(self, handle: str) -> RefreshRecord:
        record = self.store.get(handle_id(handle))
        if record is None:
            raise UnknownHandle("unknown refresh token")
        if record.revoked:
            raise Revoked("refresh token revoked")
        if self._now() >= record.expires_at:
            raise RefreshExpired("refresh token expired")
        return record

    def mint_access(
        self,
        handle: str,
        scopes: str | Sequence[Permission | str] | None = None,
        audience: str | None = None,
        origin: str | None = None,
    ) -> str:
        """Exchange a refresh handle for a short-lived, optionally narrowed access token."""
        record = self._record(handle)
        granted = attenuate(record.scopes, coerce_scope(scopes))
        if audience is None:
            audience = record.audiences[0]
        elif audience not in record.audiences:
            raise AudienceNotPermitted(f"audience {audience!r} not in grant")
        now = self._now()
        claims = TokenClaims(
            iss=self.issuer,
            sub=record.sub,
            aud=audience,
            exp=now + min(record.max_access_lifetime, self.access_lifetime),
            nbf=now,
            iat=now,
            jti=self._token(16),
            scope=tuple(granted),
            origin=origin or None,
        )
        key = self._keys[-1].key
        token = encode_token(claims, key, max_lifetime=record.max_access_lifetime)
        self.stats["mints"] += 1
        return token

    def introspect(self, token: str) -> dict[str, Any]:
        """Activity report; invalid input is simply inactive, never an error."""
        self.stats["introspections"] += 1
        try:
            verified = verify_token(token, self.keyset(), self.issuer, None, self.clock.now(), skew=0)
        except (CaptokError, ValueError, TypeError):
            return {"active": False}
        c = verified.claims
        report: dict[str, Any] = {
            "active": True,
            "iss": c.iss,
            "sub": c.sub,
            "scope": c.scope_string,
            "exp": c.exp,
            "iat": c.iat,
            "nbf": c.nbf,
            "aud": c.aud,
            "jti": c.jti,
            "token_type": "bearer",
        }
        if c.origin is not None:
            report["origin"] = c.origin
        return report

    def revoke(self, handle: str) -> dict[str, bool]:
        record = self.store.get(handle_id(handle))
        if record is not None and not record.revoked:
            self.store.put(replace(record, revoked=True))
        return {"revoked": True}

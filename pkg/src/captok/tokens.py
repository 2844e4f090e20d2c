"""Token wire format, claims model, scope grammar and offline signatures.

A token is the compact three-segment form::

    base64url(header) "." base64url(payload) "." base64url(signature)

signed with an asymmetric key so that any verifier holding only the issuer's
public key set can check it without contacting the issuer.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Mapping
from urllib.parse import urlparse

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

from .errors import (
    AudienceMismatch,
    Expired,
    InvalidClaims,
    IssuerMismatch,
    Malformed,
    NotYetValid,
    PathError,
    ScopeError,
    SignatureInvalid,
    UnknownKid,
    UnknownOp,
    UnsupportedAlgorithm,
)
from .paths import normalize_path

VERSION = "captok/1"
TOKEN_TYPE = "captok"
ANY_AUDIENCE = "ANY"
DEFAULT_ALG = "EdDSA"
SUPPORTED_ALGS = ("EdDSA", "ES256")
DEFAULT_SKEW = 60
OPS = ("read", "write")

CLAIM_NAMES = ("iss", "sub", "aud", "exp", "nbf", "iat", "jti", "scope", "ver", "origin")
_REQUIRED = ("iss", "sub", "aud", "exp", "nbf", "iat", "jti", "scope", "ver")
_B64URL = re.compile(r"[A-Za-z0-9_-]*")


# -- base64url ----------------------------------------------------------------


def b64url_encode(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url decoding.

    Non-canonical encodings (stray trailing bits, padding, foreign characters)
    are rejected so that every distinct string maps to distinct bytes.
    """
    if not _B64URL.fullmatch(text) or len(text) % 4 == 1:
        raise Malformed("bad base64url segment")
    try:
        data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except (binascii.Error, ValueError) as exc:
        raise Malformed("bad base64url segment") from exc
    if b64url_encode(data) != text:
        raise Malformed("non-canonical base64url segment")
    return data


# -- scopes -------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Permission:
    """One capability atom: an operation bound to a canonical path prefix."""

    op: str
    path: str

    def __post_init__(self) -> None:
        if self.op not in OPS:
            raise UnknownOp(f"unknown operation {self.op!r}")
        try:
            canonical = normalize_path(self.path)
        except PathError as exc:
            raise ScopeError(str(exc)) from exc
        if canonical != self.path:
            raise ScopeError(f"path {self.path!r} is not canonical")

    @classmethod
    def of(cls, op: str, raw_path: str) -> Permission:
        return cls(op, normalize_path(raw_path))

    def __str__(self) -> str:
        return f"{self.op}:{self.path}"


def parse_permission(item: str) -> Permission:
    if not item:
        raise ScopeError("empty scope item")
    op, sep, path = item.partition(":")
    if not sep:
        raise ScopeError(f"scope item {item!r} lacks ':'")
    if op not in OPS:
        raise UnknownOp(f"unknown operation {op!r} in {item!r}")
    if not path.startswith("/"):
        raise ScopeError(f"relative path in {item!r}")
    if any(seg in (".", "..") for seg in path.split("/")):
        raise ScopeError(f"dot segment in {item!r}")
    try:
        return Permission(op, normalize_path(path))
    except PathError as exc:
        raise ScopeError(str(exc)) from exc


def parse_scope(text: str) -> list[Permission]:
    """Parse a space-separated ``op:path`` list; ``""`` is the empty list."""
    if text == "":
        return []
    return [parse_permission(item) for item in text.split(" ")]


def print_scope(perms: Iterable[Permission]) -> str:
    return " ".join(str(p) for p in perms)


def coerce_scope(value: str | Iterable[Permission | str] | None) -> list[Permission]:
    """Accept a scope string, a list of items, or ``None`` (empty)."""
    if value is None:
        return []
    if isinstance(value, str):
        return parse_scope(value)
    return [p if isinstance(p, Permission) else parse_permission(p) for p in value]


# -- claims -------------------------------------------------------------------


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


@dataclass(frozen=True)
class TokenClaims:
    iss: str
    sub: str
    aud: str
    exp: int
    nbf: int
    iat: int
    jti: str
    scope: tuple[Permission, ...]
    ver: str = VERSION
    origin: str | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "scope", tuple(self.scope))

    @property
    def scope_string(self) -> str:
        return print_scope(self.scope)

    def validate(self, max_lifetime: int | None = None) -> None:
        """Raise :class:`InvalidClaims` unless the claim invariants hold."""
        for name in ("iss", "sub", "aud", "jti", "ver"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise InvalidClaims(f"{name} must be a non-empty string")
        parsed = urlparse(self.iss)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise InvalidClaims(f"iss {self.iss!r} is not an absolute URL")
        for name in ("exp", "nbf", "iat"):
            if not _is_int(getattr(self, name)):
                raise InvalidClaims(f"{name} must be an integer")
        if not self.nbf <= self.iat <= self.exp:
            raise InvalidClaims("require nbf <= iat <= exp")
        if max_lifetime is not None and self.exp - self.iat > max_lifetime:
            raise InvalidClaims(f"lifetime exceeds {max_lifetime}s")
        if not self.scope:
            raise InvalidClaims("scope must be non-empty")
        if not all(isinstance(p, Permission) for p in self.scope):
            raise InvalidClaims("scope entries must be Permission")
        if self.origin is not None and (not isinstance(self.origin, str) or not self.origin):
            raise InvalidClaims("origin must be a non-empty string when present")
        clash = set(self.extra) & set(CLAIM_NAMES)
        if clash:
            raise InvalidClaims(f"extra claims shadow reserved names: {sorted(clash)}")

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "iss": self.iss,
            "sub": self.sub,
            "aud": self.aud,
            "exp": self.exp,
            "nbf": self.nbf,
            "iat": self.iat,
            "jti": self.jti,
            "scope": self.scope_string,
            "ver": self.ver,
        }
        if self.origin is not None:
            payload["origin"] = self.origin
        payload.update(self.extra)
        return payload

    @classmethod
    def from_payload(cls, payload: Mapping[str, Any]) -> TokenClaims:
        if not isinstance(payload, Mapping):
            raise Malformed("payload is not a JSON object")
        missing = [k for k in _REQUIRED if k not in payload]
        if missing:
            raise Malformed(f"missing claims: {missing}")
        for name in ("iss", "sub", "aud", "jti", "scope", "ver"):
            if not isinstance(payload[name], str):
                raise Malformed(f"claim {name} must be a string")
        for name in ("exp", "nbf", "iat"):
            if not _is_int(payload[name]):
                raise Malformed(f"claim {name} must be an integer")
        origin = payload.get("origin")
        if origin is not None and not isinstance(origin, str):
            raise Malformed("claim origin must be a string")
        try:
            scope = parse_scope(payload["scope"])
        except ScopeError as exc:
            raise Malformed(f"bad scope claim: {exc.detail}") from exc
        extra = {k: v for k, v in payload.items() if k not in CLAIM_NAMES}
        return cls(
            iss=payload["iss"],
            sub=payload["sub"],
            aud=payload["aud"],
            exp=payload["exp"],
            nbf=payload["nbf"],
            iat=payload["iat"],
            jti=payload["jti"],
            scope=tuple(scope),
            ver=payload["ver"],
            origin=origin,
            extra=extra,
        )


@dataclass(frozen=True)
class VerifiedClaims:
    """Claims that passed :func:`verify_token`; only these may authorize."""

    header: Mapping[str, Any]
    claims: TokenClaims

    def __getattr__(self, name: str) -> Any:
        return getattr(self.claims, name)


# -- keys ---------------------------------------------------------------------


def _check_alg(alg: str) -> None:
    if alg not in SUPPORTED_ALGS:
        raise UnsupportedAlgorithm(f"algorithm {alg!r} is not accepted")


def _thumbprint(params: Mapping[str, str]) -> str:
    canonical = json.dumps(dict(sorted(params.items())), separators=(",", ":"))
    return b64url_encode(hashlib.sha256(canonical.encode()).digest()[:16])


def _public_params(public_key: Any) -> dict[str, str]:
    if isinstance(public_key, ed25519.Ed25519PublicKey):
        raw = public_key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return {"kty": "OKP", "crv": "Ed25519", "x": b64url_encode(raw)}
    if isinstance(public_key, ec.EllipticCurvePublicKey):
        nums = public_key.public_numbers()
        return {
            "kty": "EC",
            "crv": "P-256",
            "x": b64url_encode(nums.x.to_bytes(32, "big")),
            "y": b64url_encode(nums.y.to_bytes(32, "big")),
        }
    raise UnsupportedAlgorithm(f"unsupported key type {type(public_key).__name__}")


@lru_cache(maxsize=256)
def _load_public(alg: str, items: tuple[tuple[str, str], ...]) -> Any:
    params = dict(items)
    try:
        if alg == "EdDSA" and params.get("crv") == "Ed25519":
            return ed25519.Ed25519PublicKey.from_public_bytes(b64url_decode(params["x"]))
        if alg == "ES256" and params.get("crv") == "P-256":
            x = int.from_bytes(b64url_decode(params["x"]), "big")
            y = int.from_bytes(b64url_decode(params["y"]), "big")
            return ec.EllipticCurvePublicNumbers(x, y, ec.SECP256R1()).public_key()
    except (KeyError, ValueError, Malformed) as exc:
        raise Malformed(f"bad public key parameters: {exc}") from exc
    raise UnsupportedAlgorithm(f"key parameters do not match alg {alg!r}")


@dataclass(frozen=True)
class KeyRecord:
    """Public half of a signing key, as published in a key set."""

    kid: str
    alg: str
    params: Mapping[str, str] = field(hash=False)
    current: bool = False

    def public_key(self) -> Any:
        _check_alg(self.alg)
        return _load_public(self.alg, tuple(sorted(self.params.items())))

    def verify(self, signature: bytes, message: bytes) -> bool:
        key = self.public_key()
        try:
            if self.alg == "EdDSA":
                key.verify(signature, message)
            else:
                if len(signature) != 64:
                    return False
                der = encode_dss_signature(
                    int.from_bytes(signature[:32], "big"), int.from_bytes(signature[32:], "big")
                )
                key.verify(der, message, ec.ECDSA(hashes.SHA256()))
        except InvalidSignature:
            return False
        return True

    def to_jwk(self) -> dict[str, Any]:
        jwk: dict[str, Any] = {"kid": self.kid, "alg": self.alg, "use": "sig", **self.params}
        if self.current:
            jwk["current"] = True
        return jwk

    @classmethod
    def from_jwk(cls, jwk: Mapping[str, Any]) -> KeyRecord:
        try:
            kid, alg = jwk["kid"], jwk["alg"]
        except KeyError as exc:
            raise Malformed(f"key entry lacks {exc}") from exc
        _check_alg(alg)
        params = {k: v for k, v in jwk.items() if k in ("kty", "crv", "x", "y")}
        record = cls(kid=kid, alg=alg, params=params, current=bool(jwk.get("current", False)))
        record.public_key()
        return record

    def with_current(self, current: bool) -> KeyRecord:
        return KeyRecord(self.kid, self.alg, self.params, current)


@dataclass(frozen=True)
class KeySet:
    keys: tuple[KeyRecord, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "keys", tuple(self.keys))
        kids = [k.kid for k in self.keys]
        if len(kids) != len(set(kids)):
            raise ValueError("duplicate kid in key set")
        if sum(k.current for k in self.keys) > 1:
            raise ValueError("more than one current signing key")

    def get(self, kid: str) -> KeyRecord:
        for key in self.keys:
            if key.kid == kid:
                return key
        raise UnknownKid(f"kid {kid!r} not in key set")

    def __contains__(self, kid: object) -> bool:
        return any(k.kid == kid for k in self.keys)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def kids(self) -> list[str]:
        return [k.kid for k in self.keys]

    def without(self, kid: str) -> KeySet:
        return KeySet(tuple(k for k in self.keys if k.kid != kid))

    def to_json(self) -> dict[str, Any]:
        return {"keys": [k.to_jwk() for k in self.keys]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> KeySet:
        if not isinstance(doc, Mapping) or not isinstance(doc.get("keys"), list):
            raise Malformed('key set must be {"keys": [...]}')
        return cls(tuple(KeyRecord.from_jwk(k) for k in doc["keys"]))

    @classmethod
    def loads(cls, text: str) -> KeySet:
        return cls.from_json(json.loads(text))


@dataclass(frozen=True)
class SigningKey:
    """Private signing key paired with its published record."""

    kid: str
    alg: str
    private_key: Any = field(repr=False, compare=False)

    @property
    def record(self) -> KeyRecord:
        params = _public_params(self.private_key.public_key())
        return KeyRecord(self.kid, self.alg, params)

    def sign(self, message: bytes) -> bytes:
        if self.alg == "EdDSA":
            return self.private_key.sign(message)
        r, s = decode_dss_signature(self.private_key.sign(message, ec.ECDSA(hashes.SHA256())))
        return r.to_bytes(32, "big") + s.to_bytes(32, "big")

    def to_pem(self) -> bytes:
        return self.private_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )

    @classmethod
    def from_pem(cls, data: bytes) -> SigningKey:
        private = serialization.load_pem_private_key(data, password=None)
        return cls._wrap(private)

    @classmethod
    def _wrap(cls, private: Any) -> SigningKey:
        if isinstance(private, ed25519.Ed25519PrivateKey):
            alg = "EdDSA"
        elif isinstance(private, ec.EllipticCurvePrivateKey) and private.curve.name == "secp256r1":
            alg = "ES256"
        else:
            raise UnsupportedAlgorithm(f"unsupported private key {type(private).__name__}")
        return cls(kid=_thumbprint(_public_params(private.public_key())), alg=alg, private_key=private)


def generate_keypair(alg: str = DEFAULT_ALG, seed: bytes | None = None) -> tuple[KeyRecord, SigningKey]:
    """Create a fresh keypair; ``kid`` is a digest of the public parameters.

    ``seed`` (32 bytes) makes the key deterministic, for reproducible runs.
    """
    _check_alg(alg)
    if alg == "EdDSA":
        private = (
            ed25519.Ed25519PrivateKey.from_private_bytes(seed[:32])
            if seed is not None
            else ed25519.Ed25519PrivateKey.generate()
        )
    else:
        if seed is not None:
            order = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
            private = ec.derive_private_key(int.from_bytes(seed, "big") % (order - 1) + 1, ec.SECP256R1())
        else:
            private = ec.generate_private_key(ec.SECP256R1())
    key = SigningKey._wrap(private)
    return key.record, key


# -- encode / decode / verify -------------------------------------------------


def _dump(obj: Mapping[str, Any]) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_token(
    claims: TokenClaims,
    key: SigningKey,
    kid: str | None = None,
    keyset: KeySet | None = None,
    max_lifetime: int | None = None,
) -> str:
    """Sign ``claims`` into the compact form.

    ``kid`` defaults to the key's own identifier; when a ``keyset`` is given
    the kid must be published there.
    """
    kid = key.kid if kid is None else kid
    if kid != key.kid or (keyset is not None and kid not in keyset):
        raise UnknownKid(f"kid {kid!r} does not name the signing key")
    claims.validate(max_lifetime)
    header = {"alg": key.alg, "kid": kid, "typ": TOKEN_TYPE}
    signing_input = f"{b64url_encode(_dump(header))}.{b64url_encode(_dump(claims.to_payload()))}"
    return f"{signing_input}.{b64url_encode(key.sign(signing_input.encode('ascii')))}"


def _split(token: str) -> tuple[str, str, str]:
    if not isinstance(token, str):
        raise Malformed("token must be a string")
    parts = token.split(".")
    if len(parts) != 3:
        raise Malformed(f"expected 3 segments, found {len(parts)}")
    return parts[0], parts[1], parts[2]


def _json_segment(segment: str, what: str) -> dict[str, Any]:
    try:
        obj = json.loads(b64url_decode(segment).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise Malformed(f"{what} is not valid JSON") from exc
    if not isinstance(obj, dict):
        raise Malformed(f"{what} is not a JSON object")
    return obj


def _parse_header(segment: str) -> dict[str, Any]:
    header = _json_segment(segment, "header")
    if header.get("typ") != TOKEN_TYPE:
        raise Malformed(f"header typ {header.get('typ')!r} is not {TOKEN_TYPE!r}")
    if not isinstance(header.get("kid"), str):
        raise Malformed("header lacks kid")
    if header.get("alg") not in SUPPORTED_ALGS:
        raise Malformed(f"header alg {header.get('alg')!r} is not accepted")
    return header


def decode_unverified(token: str) -> tuple[dict[str, Any], TokenClaims]:
    """Parse header and claims with no trust judgment at all."""
    h, p, s = _split(token)
    header = _json_segment(h, "header")
    claims = TokenClaims.from_payload(_json_segment(p, "payload"))
    b64url_decode(s)
    return header, claims


def verify_token(
    token: str,
    keys: KeySet,
    expected_iss: str,
    expected_aud: str | None,
    now: float,
    skew: float = DEFAULT_SKEW,
    *,
    allow_any_audience: bool = True,
) -> VerifiedClaims:
    """Verify signature, issuer, audience, validity window and version.

    ``expected_aud=None`` skips the audience check (issuer-side introspection).
    Raises a :class:`~captok.errors.TokenError` subclass whose ``code`` names
    the first failed check.
    """
    if skew < 0:
        raise ValueError("skew must be non-negative")
    h, p, s = _split(token)
    header = _parse_header(h)
    record = keys.get(header["kid"])
    if record.alg != header["alg"]:
        raise Malformed("header alg does not match key")
    payload_bytes = b64url_decode(p)
    signature = b64url_decode(s)
    if not record.verify(signature, f"{h}.{p}".encode("ascii")):
        raise SignatureInvalid("signature does not verify")
    try:
        payload = json.loads(payload_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise Malformed("payload is not valid JSON") from exc
    claims = TokenClaims.from_payload(payload)
    if claims.ver != VERSION:
        raise Malformed(f"unrecognized version {claims.ver!r}")
    if claims.iss != expected_iss:
        raise IssuerMismatch(f"issuer {claims.iss!r} is not trusted")
    if expected_aud is not None:
        if not (claims.aud == expected_aud or (allow_any_audience and claims.aud == ANY_AUDIENCE)):
            raise AudienceMismatch(f"audience {claims.aud!r} is not {expected_aud!r}")
    if now >= claims.exp + skew:
        raise Expired(f"expired at {claims.exp}")
    if now < claims.nbf - skew:
        raise NotYetValid(f"not valid before {claims.nbf}")
    return VerifiedClaims(header=header, claims=claims)

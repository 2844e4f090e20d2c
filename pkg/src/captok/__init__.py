"""Capability tokens for remote scientific data access.

Submodules:

- :mod:`captok.tokens`   wire format, claims, scopes, keys, offline verification
- :mod:`captok.authz`    path normalization, prefix matching, ACLs, attenuation
- :mod:`captok.issuer`   token server with user/group policy and refresh grants
- :mod:`captok.manager`  submit-side vault, access-token cache, refresh and hold
- :mod:`captok.gateway`  bearer-authenticated file gateway with offline checks
- :mod:`captok.harness`  end-to-end workflow simulator
"""

from .authz import ACL, AccessRequest, acl_from_token, attenuate, normalize_path, permits
from .errors import CaptokError
from .tokens import (
    KeyRecord,
    KeySet,
    Permission,
    SigningKey,
    TokenClaims,
    VerifiedClaims,
    decode_unverified,
    encode_token,
    generate_keypair,
    parse_scope,
    print_scope,
    verify_token,
)

__version__ = "0.1.0"

__all__ = [
    "ACL",
    "AccessRequest",
    "CaptokError",
    "KeyRecord",
    "KeySet",
    "Permission",
    "SigningKey",
    "TokenClaims",
    "VerifiedClaims",
    "acl_from_token",
    "attenuate",
    "decode_unverified",
    "encode_token",
    "generate_keypair",
    "normalize_path",
    "parse_scope",
    "permits",
    "print_scope",
    "verify_token",
]

"""Exception taxonomy.

Every error carries a stable machine-readable ``code``; gateways, the CLI and
the harness report that code rather than the message text.
"""

from __future__ import annotations


class CaptokError(Exception):
    code = "error"

    def __init__(self, detail: str = "", *, code: str | None = None) -> None:
        super().__init__(detail or self.code)
        self.detail = detail or self.code
        if code is not None:
            self.code = code

    def as_dict(self) -> dict[str, str]:
        return {"error": self.code, "detail": self.detail}


# token-core ------------------------------------------------------------------


class UnsupportedAlgorithm(CaptokError):
    code = "unsupported_algorithm"


class InvalidClaims(CaptokError):
    code = "invalid_claims"


class TokenError(CaptokError):
    """Verification failure; ``code`` names the failed check."""


class Malformed(TokenError):
    code = "malformed"


class SignatureInvalid(TokenError):
    code = "signature_invalid"


class IssuerMismatch(TokenError):
    code = "issuer_mismatch"


class AudienceMismatch(TokenError):
    code = "audience_mismatch"


class Expired(TokenError):
    code = "expired"


class NotYetValid(TokenError):
    code = "not_yet_valid"


class UnknownKid(TokenError):
    code = "unknown_kid"


class ScopeError(CaptokError):
    code = "invalid_scope"


class UnknownOp(ScopeError):
    code = "unknown_op"


# authz-engine ----------------------------------------------------------------


class PathError(CaptokError):
    code = "invalid_path"


class TraversalRejected(PathError):
    code = "traversal_rejected"


class EscalationError(CaptokError):
    code = "escalation"

    def __init__(self, offending: object, detail: str = "") -> None:
        super().__init__(detail or f"requested permission {offending} is not granted")
        self.offending = offending


# issuer-service --------------------------------------------------------------


class AuthenticationFailed(CaptokError):
    code = "authentication_failed"


class NoMatchingRule(CaptokError):
    code = "no_matching_rule"


class AudienceNotPermitted(CaptokError):
    code = "audience_not_permitted"


class UnknownHandle(CaptokError):
    code = "unknown_handle"


class Revoked(CaptokError):
    code = "revoked"


class RefreshExpired(CaptokError):
    code = "refresh_expired"


class ProtocolError(CaptokError):
    code = "invalid_request"


# token-manager ---------------------------------------------------------------


class VaultLocked(CaptokError):
    code = "vault_locked"


class VaultCorrupt(CaptokError):
    code = "vault_corrupt"


class NoDominatingGrant(CaptokError):
    code = "no_dominating_grant"


class PhaseViolation(CaptokError):
    code = "phase_violation"


class IssuerUnavailable(CaptokError):
    code = "issuer_unavailable"


# data-gateway ----------------------------------------------------------------


class KeyFetchError(CaptokError):
    code = "key_fetch_failed"

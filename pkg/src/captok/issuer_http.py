"""HTTP front end for :class:`~captok.issuer.TokenIssuer` and a matching client.

Endpoints::

    GET  /.well-known/captok-configuration
    GET  /jwks
    POST /token        grant_type=password | refresh_token
    POST /introspect   token=...
    POST /revoke       token=...
"""

from __future__ import annotations

from functools import partial
from http.server import ThreadingHTTPServer
from typing import Any, Sequence

from ._http import JSONHandler, json_call
from .errors import CaptokError, ProtocolError
from .issuer import RefreshGrant, TokenIssuer
from .tokens import KeySet, Permission, coerce_scope, decode_unverified, print_scope

DISCOVERY_PATH = "/.well-known/captok-configuration"

_STATUS = {
    "authentication_failed": 401,
    "invalid_request": 400,
    "unsupported_grant_type": 400,
}


class IssuerHandler(JSONHandler):
    def __init__(self, *args: Any, issuer: TokenIssuer, base_url: str | None, **kwargs: Any) -> None:
        self.issuer = issuer
        self.base_url = base_url
        super().__init__(*args, **kwargs)

    def _base(self) -> str:
        if self.base_url:
            return self.base_url
        return f"http://{self.headers.get('Host') or '%s:%d' % self.server.server_address[:2]}"

    def do_GET(self) -> None:
        path = self.path.split("?")[0]
        if path == DISCOVERY_PATH:
            self.send_json(200, self.issuer.discovery(self._base()))
        elif path == "/jwks":
            self.send_json(200, self.issuer.keyset().to_json())
        else:
            self.send_json(404, {"error": "not_found", "detail": path})

    def do_POST(self) -> None:
        path = self.path.split("?")[0]
        try:
            form = self.read_form()
            if path == "/token":
                self.send_json(200, self._token(form))
            elif path == "/introspect":
                if "token" not in form:
                    raise ProtocolError("missing token")
                self.send_json(200, self.issuer.introspect(form["token"]))
            elif path == "/revoke":
                if "token" not in form:
                    raise ProtocolError("missing token")
                self.send_json(200, self.issuer.revoke(form["token"]))
            else:
                self.send_json(404, {"error": "not_found", "detail": path})
        except CaptokError as exc:
            self.send_json(_STATUS.get(exc.code, 400), exc.as_dict())

    def _token(self, form: dict[str, str]) -> dict[str, Any]:
        grant_type = form.get("grant_type")
        if grant_type == "password":
            for name in ("username", "password", "audience"):
                if name not in form:
                    raise ProtocolError(f"missing {name}")
            grant = self.issuer.grant_refresh(
                form["username"], form["password"], form.get("scope", ""), form["audience"]
            )
            return grant.to_json()
        if grant_type == "refresh_token":
            if "refresh_token" not in form:
                raise ProtocolError("missing refresh_token")
            token = self.issuer.mint_access(
                form["refresh_token"],
                form.get("scope") or None,
                form.get("audience") or None,
                form.get("origin") or None,
            )
            _, claims = decode_unverified(token)
            return {
                "access_token": token,
                "token_type": "bearer",
                "expires_in": claims.exp - claims.iat,
                "scope": claims.scope_string,
            }
        raise CaptokError(f"grant_type {grant_type!r}", code="unsupported_grant_type")


def make_issuer_server(
    issuer: TokenIssuer, host: str = "127.0.0.1", port: int = 0, base_url: str | None = None
) -> ThreadingHTTPServer:
    handler = partial(IssuerHandler, issuer=issuer, base_url=base_url)
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


class IssuerClient:
    """HTTP client with the same method surface as :class:`TokenIssuer`."""

    def __init__(self, base_url: str, timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._config: dict[str, str] | None = None

    def discovery(self) -> dict[str, str]:
        if self._config is None:
            self._config = json_call("GET", self.base_url + DISCOVERY_PATH, timeout=self.timeout)
        return self._config

    @property
    def issuer(self) -> str:
        return self.discovery()["issuer"]

    def keyset(self) -> KeySet:
        return KeySet.from_json(json_call("GET", self.discovery()["jwks_uri"], timeout=self.timeout))

    def grant_refresh(
        self, username: str, password: str, scopes: str | Sequence[Permission | str] | None, audience: str
    ) -> RefreshGrant:
        doc = json_call(
            "POST",
            self.discovery()["token_endpoint"],
            form={
                "grant_type": "password",
                "username": username,
                "password": password,
                "scope": print_scope(coerce_scope(scopes)),
                "audience": audience,
            },
            timeout=self.timeout,
        )
        return RefreshGrant(doc["refresh_token"], doc["scope"], int(doc["expires_in"]), audience)

    def mint_access(
        self,
        handle: str,
        scopes: str | Sequence[Permission | str] | None = None,
        audience: str | None = None,
        origin: str | None = None,
    ) -> str:
        form = {"grant_type": "refresh_token", "refresh_token": handle}
        scope = print_scope(coerce_scope(scopes))
        if scope:
            form["scope"] = scope
        if audience:
            form["audience"] = audience
        if origin:
            form["origin"] = origin
        doc = json_call("POST", self.discovery()["token_endpoint"], form=form, timeout=self.timeout)
        return doc["access_token"]

    def introspect(self, token: str) -> dict[str, Any]:
        return json_call(
            "POST", self.discovery()["introspection_endpoint"], form={"token": token}, timeout=self.timeout
        )

    def revoke(self, handle: str) -> dict[str, Any]:
        return json_call(
            "POST", self.discovery()["revocation_endpoint"], form={"token": handle}, timeout=self.timeout
        )

"""``captok`` command line.

Failures exit non-zero and print ``{"error": code, "detail": text}`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import _http
from .errors import CaptokError, TokenError
from .gateway import DataGateway, GatewayConfig, KeyCache, make_gateway_server
from .harness import WorkflowRun, run_workflow
from .issuer import JsonFileRefreshStore, TokenIssuer, UserDirectory, load_policy
from .issuer_http import IssuerClient, make_issuer_server
from .manager import ManagerSocketServer, TokenManager, Vault, generate_vault_key, load_vault_key
from .tokens import (
    DEFAULT_SKEW,
    SUPPORTED_ALGS,
    KeySet,
    SigningKey,
    b64url_decode,
    generate_keypair,
    verify_token,
)

log = logging.getLogger("captok")


class CLIError(CaptokError):
    code = "usage"


def _emit(doc: Any) -> None:
    print(json.dumps(doc, indent=2, sort_keys=False))


# -- subcommands --------------------------------------------------------------


def cmd_keygen(args: argparse.Namespace) -> int:
    pem, jwks = Path(args.out + ".pem"), Path(args.out + ".jwks.json")
    existing = [str(p) for p in (pem, jwks) if p.exists()]
    if existing and not args.force:
        raise CLIError(f"refusing to overwrite {', '.join(existing)} (use --force)", code="exists")
    record, key = generate_keypair(args.alg)
    pem.write_bytes(key.to_pem())
    os.chmod(pem, 0o600)
    jwks.write_text(KeySet((record.with_current(True),)).dumps())
    _emit({"kid": record.kid, "alg": record.alg, "private_key": str(pem), "keyset": str(jwks)})
    return 0


def _read_token(value: str) -> str:
    if value == "-":
        return sys.stdin.read().strip()
    return value.strip()


def cmd_inspect(args: argparse.Namespace) -> int:
    token = _read_token(args.token)
    parts = token.split(".")
    if len(parts) != 3:
        raise CaptokError(f"expected 3 segments, found {len(parts)}", code="malformed")
    try:
        header = json.loads(b64url_decode(parts[0]))
        payload = json.loads(b64url_decode(parts[1]))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CaptokError(str(exc), code="malformed") from exc
    _emit({"header": header, "claims": payload, "verified": False})
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    token = _read_token(args.token)
    if args.jwks:
        keys = KeySet.loads(Path(args.jwks).read_text())
        expected_iss = args.expected_issuer or args.issuer
        if not expected_iss:
            raise CLIError("--issuer or --expected-issuer is required with --jwks")
    else:
        if not args.issuer:
            raise CLIError("--issuer is required")
        client = IssuerClient(args.issuer)
        keys = client.keyset()
        expected_iss = args.expected_issuer or client.issuer
    now = args.now if args.now is not None else time.time()
    try:
        verified = verify_token(
            token, keys, expected_iss, args.audience, now, args.skew, allow_any_audience=args.allow_any_audience
        )
    except TokenError as exc:
        _emit({"decision": "invalid", "code": exc.code})
        raise
    c = verified.claims
    _emit({"decision": "valid", "sub": c.sub, "scope": c.scope_string, "aud": c.aud, "exp": c.exp,
           "kid": verified.header["kid"]})
    return 0


def cmd_issue(args: argparse.Namespace) -> int:
    client = IssuerClient(args.issuer)
    handle = args.refresh_token
    if handle is None:
        password = args.password or os.environ.get("CAPTOK_PASSWORD")
        if not args.username or password is None:
            raise CLIError("--username and --password (or $CAPTOK_PASSWORD) are required")
        grant = client.grant_refresh(args.username, password, args.scope or "", args.audience)
        if args.refresh_only:
            _emit(grant.to_json())
            return 0
        handle = grant.refresh_token
    token = client.mint_access(handle, args.narrow, args.audience, args.origin)
    print(token)
    return 0


def _load_json(path: str | None) -> dict[str, Any]:
    return json.loads(Path(path).read_text()) if path else {}


def cmd_serve_issuer(args: argparse.Namespace) -> int:
    cfg = _load_json(args.config)
    base = Path(args.config).parent if args.config else Path.cwd()

    def opt(name: str, default: Any = None) -> Any:
        value = getattr(args, name, None)
        return value if value is not None else cfg.get(name, default)

    def path(name: str) -> Path | None:
        value = opt(name)
        return None if value is None else (base / value if not os.path.isabs(value) else Path(value))

    issuer_url = opt("issuer")
    if not issuer_url:
        raise CLIError("issuer URL is required (--issuer or config 'issuer')")
    policy, users = path("policy"), path("users")
    if policy is None or users is None:
        raise CLIError("policy and users files are required")
    signing = path("signing_key")
    store = path("store")
    issuer = TokenIssuer(
        issuer_url,
        load_policy(policy),
        UserDirectory.load(users),
        store=JsonFileRefreshStore(store) if store else None,
        access_lifetime=int(opt("access_lifetime", 600)),
        refresh_lifetime=int(opt("refresh_lifetime", 30 * 24 * 3600)),
        key_overlap=int(opt("key_overlap", 24 * 3600)),
        signing_key=SigningKey.from_pem(signing.read_bytes()) if signing else None,
    )
    server = make_issuer_server(issuer, opt("host", "127.0.0.1"), int(opt("port", 8443)), base_url=opt("public_url"))
    log.info("issuer %s listening on %s (kid %s)", issuer.issuer, _http.server_url(server), issuer.current_kid)
    print(json.dumps({"listening": _http.server_url(server), "issuer": issuer.issuer}), flush=True)
    _serve(server)
    return 0


def cmd_serve_gateway(args: argparse.Namespace) -> int:
    config = GatewayConfig(
        document_root=Path(args.root),
        issuer=args.issuer,
        audience=args.audience,
        host=args.host,
        port=args.port,
        mount_prefix=args.mount,
        key_refetch_interval=args.refetch_interval,
        strict_audience=not args.lax_audience,
        enforce_origin=args.enforce_origin,
        skew=args.skew,
        fail_closed=args.fail_closed,
        introspection=args.introspection,
        audit_log=Path(args.audit_log) if args.audit_log else None,
        audit_include_token=args.audit_tokens,
        key_cache_path=Path(args.key_cache) if args.key_cache else None,
    )
    client = IssuerClient(args.issuer_url or args.issuer)
    keys = KeyCache(client.keyset, interval=config.key_refetch_interval, cache_path=config.key_cache_path)
    keys.warm()
    keys.start()
    gateway = DataGateway(config, keys, introspect=client.introspect if config.introspection else None)
    server = make_gateway_server(gateway)
    print(json.dumps({"listening": _http.server_url(server), "audience": config.audience}), flush=True)
    _serve(server)
    return 0


def _vault(args: argparse.Namespace) -> Vault:
    return Vault(args.vault, key=load_vault_key(args.key))


def cmd_serve_manager(args: argparse.Namespace) -> int:
    manager = TokenManager(_vault(args), IssuerClient(args.issuer_url), margin=args.margin,
                           share_cache=not args.per_job)
    server = ManagerSocketServer(args.socket, manager)
    print(json.dumps({"listening": args.socket}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        os.unlink(args.socket)
    return 0


def cmd_vault(args: argparse.Namespace) -> int:
    if args.vault_cmd == "init-key":
        generate_vault_key(args.path, force=args.force)
        _emit({"key": args.path})
    elif args.vault_cmd == "store":
        handle = args.handle if args.handle != "-" else sys.stdin.readline().strip()
        _emit(_vault(args).store_refresh(args.user, args.issuer, handle, args.scopes, args.expiry, args.audience))
    elif args.vault_cmd == "list":
        _emit(_vault(args).list_entries(args.user))
    return 0


def cmd_run_workflow(args: argparse.Namespace) -> int:
    run = WorkflowRun.load(args.workflow)
    result = run_workflow(run)
    text = result.dumps()
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    report = result.report
    ok = all(v.get("ok", True) for v in report["invariants"].values())
    if not args.report:
        return 0 if ok else 1
    _emit({"report": args.report, "invariants_ok": ok, **{k: report["summary"][k] for k in ("jobs", "succeeded", "failed")}})
    return 0 if ok else 1


def _serve(server: Any) -> None:
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="captok", description="Capability tokens for scientific data access")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="write a signing keypair")
    p.add_argument("--out", required=True, help="path prefix; writes PREFIX.pem and PREFIX.jwks.json")
    p.add_argument("--alg", default="EdDSA", choices=SUPPORTED_ALGS)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("issue", help="obtain an access token from an issuer")
    p.add_argument("--issuer", required=True, help="issuer base URL")
    p.add_argument("--username")
    p.add_argument("--password")
    p.add_argument("--scope", help="scopes for the refresh grant")
    p.add_argument("--audience", required=True)
    p.add_argument("--narrow", help="narrower scopes for the access token")
    p.add_argument("--origin")
    p.add_argument("--refresh-token", help="mint from an existing refresh token")
    p.add_argument("--refresh-only", action="store_true", help="print the refresh grant instead")
    p.set_defaults(func=cmd_issue)

    p = sub.add_parser("inspect", help="decode a token without verifying it")
    p.add_argument("token", help="token string or '-' for stdin")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="verify a token against issuer keys")
    p.add_argument("token", help="token string or '-' for stdin")
    p.add_argument("--issuer", help="issuer base URL (keys fetched via discovery)")
    p.add_argument("--jwks", help="verify against a local key set file instead")
    p.add_argument("--expected-issuer")
    p.add_argument("--audience")
    p.add_argument("--allow-any-audience", action="store_true")
    p.add_argument("--skew", type=float, default=DEFAULT_SKEW)
    p.add_argument("--now", type=float, help="override the current time (epoch seconds)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("serve-issuer", help="run the token server")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--issuer")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--policy")
    p.add_argument("--users")
    p.add_argument("--signing-key", dest="signing_key")
    p.add_argument("--store")
    p.add_argument("--public-url", dest="public_url")
    p.set_defaults(func=cmd_serve_issuer)

    p = sub.add_parser("serve-gateway", help="run the data gateway")
    p.add_argument("--root", required=True, help="document root")
    p.add_argument("--issuer", required=True, help="trusted issuer identifier")
    p.add_argument("--issuer-url", help="where to fetch keys, if different from --issuer")
    p.add_argument("--audience", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--mount", default="/")
    p.add_argument("--refetch-interval", type=float, default=3600.0)
    p.add_argument("--lax-audience", action="store_true", help="accept aud=ANY")
    p.add_argument("--enforce-origin", action="store_true")
    p.add_argument("--skew", type=float, default=DEFAULT_SKEW)
    p.add_argument("--fail-closed", action="store_true")
    p.add_argument("--introspection", action="store_true")
    p.add_argument("--audit-log")
    p.add_argument("--audit-tokens", action="store_true", help="log presented tokens so decisions can be replayed")
    p.add_argument("--key-cache")
    p.set_defaults(func=cmd_serve_gateway)

    p = sub.add_parser("serve-manager", help="run the token manager on a local socket")
    p.add_argument("--socket", required=True)
    p.add_argument("--vault", required=True)
    p.add_argument("--key", help="vault key file (default $CAPTOK_VAULT_KEY)")
    p.add_argument("--issuer-url", required=True)
    p.add_argument("--margin", type=float, default=60.0)
    p.add_argument("--per-job", action="store_true", help="mint per job instead of sharing tokens")
    p.set_defaults(func=cmd_serve_manager)

    p = sub.add_parser("vault", help="manage the encrypted refresh-token vault")
    vsub = p.add_subparsers(dest="vault_cmd", required=True)
    v = vsub.add_parser("init-key")
    v.add_argument("path")
    v.add_argument("--force", action="store_true")
    for name in ("store", "list"):
        v = vsub.add_parser(name)
        v.add_argument("--vault", required=True)
        v.add_argument("--key", help="vault key file (default $CAPTOK_VAULT_KEY)")
        v.add_argument("--user", required=name == "store")
        if name == "store":
            v.add_argument("--issuer", required=True)
            v.add_argument("--handle", required=True, help="refresh token, or '-' to read stdin")
            v.add_argument("--scopes", required=True)
            v.add_argument("--expiry", type=int, required=True)
            v.add_argument("--audience", default="")
    p.set_defaults(func=cmd_vault)

    p = sub.add_parser("run-workflow", help="run a workflow file through the simulator")
    p.add_argument("workflow")
    p.add_argument("--report", help="write the JSON report here")
    p.set_defaults(func=cmd_run_workflow)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CaptokError as exc:
        print(json.dumps(exc.as_dict()), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__.lower(), "detail": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations

import json
import re

import pytest

from captok.errors import (
    AudienceNotPermitted,
    AuthenticationFailed,
    EscalationError,
    NoMatchingRule,
    RefreshExpired,
    Revoked,
    UnknownHandle,
    UnknownKid,
)
from captok.issuer import (
    JsonFileRefreshStore,
    PolicyRule,
    TokenIssuer,
    UserDirectory,
    check_secret,
    evaluate_policy,
    handle_id,
    hash_secret,
    load_policy,
)
from captok.tokens import KeySet, Permission, decode_unverified, parse_scope, verify_token

from .conftest import AUDIENCE, ISSUER, LDG_POLICY, make_users

P = parse_scope


def test_ldg_user_granted_both_scopes():
    grant = evaluate_policy(
        LDG_POLICY, "alice", ["LDGUsers"], P("read:/data/ligo/frames write:/store/user/alice"), AUDIENCE
    )
    assert grant.scopes == tuple(P("read:/data/ligo/frames write:/store/user/alice"))
    assert grant.access_lifetime == 600


def test_non_member_has_no_rule():
    with pytest.raises(NoMatchingRule):
        evaluate_policy(LDG_POLICY, "bob", ["Visitors"], P("read:/data/ligo/frames"), AUDIENCE)


def test_username_template_expansion():
    assert LDG_POLICY[0].expand("alice") == P("read:/data/ligo/frames write:/store/user/alice")
    with pytest.raises(EscalationError):
        evaluate_policy(LDG_POLICY, "alice", ["LDGUsers"], P("write:/store/user/bob"), AUDIENCE)


def test_empty_request_grants_everything_eligible():
    grant = evaluate_policy(LDG_POLICY, "carol", ["LDGUsers"], [], AUDIENCE)
    assert grant.scopes == tuple(P("read:/data/ligo/frames write:/store/user/carol"))


def test_audience_restriction():
    with pytest.raises(AudienceNotPermitted):
        evaluate_policy(LDG_POLICY, "alice", ["LDGUsers"], P("read:/data/ligo/frames"), "https://else")


def test_lifetime_is_min_over_atoms_of_max_over_rules():
    rules = [
        PolicyRule("g", "group", ("read:/a",), 100, 1000, (AUDIENCE,)),
        PolicyRule("g", "group", ("read:/a/b", "write:/w"), 300, 2000, (AUDIENCE,)),
        PolicyRule("alice", "user", ("write:/w",), 50, 500, (AUDIENCE,)),
    ]
    # read:/a/b is covered by rules 1 and 2 (max 300); write:/w by rules 2 and 3 (max 300)
    assert evaluate_policy(rules, "alice", ["g"], P("read:/a/b write:/w"), AUDIENCE).access_lifetime == 300
    # read:/a/c only by rule 1 (100)
    assert evaluate_policy(rules, "alice", ["g"], P("read:/a/c write:/w"), AUDIENCE).access_lifetime == 100


def test_policy_rule_json_roundtrip(tmp_path):
    path = tmp_path / "policy.json"
    path.write_text(json.dumps([r.to_json() for r in LDG_POLICY]))
    assert load_policy(path) == LDG_POLICY
    with pytest.raises(ValueError):
        PolicyRule.from_json({"user": "a", "group": "b", "grantable": []})


def test_policy_rule_rejects_bad_templates():
    with pytest.raises(ValueError):
        PolicyRule("g", "group", ("read:/x/{nope}",), 10, 20, (AUDIENCE,))
    with pytest.raises(ValueError):
        PolicyRule("g", "group", ("read:/x",), 30, 20, (AUDIENCE,))


def test_secret_hashing():
    digest = hash_secret("pw", iterations=1000)
    assert check_secret("pw", digest)
    assert not check_secret("pW", digest)
    assert not check_secret("pw", "garbage")
    assert "pw" not in digest


def test_user_directory_roundtrip(tmp_path):
    users = make_users()
    users.save(tmp_path / "u.json")
    again = UserDirectory.load(tmp_path / "u.json")
    assert again.authenticate("alice", "alice-secret") == ["LDGUsers"]
    plain = UserDirectory.from_json({"users": {"dave": {"secret": "s", "groups": ["x"]}}})
    assert plain.authenticate("dave", "s") == ["x"]
    assert set(plain.to_json()["users"]["dave"]) == {"digest", "groups"}


def test_user_directory_rejects_path_like_names():
    with pytest.raises(ValueError):
        make_users().add_user("../root", "x")


# -- grants -------------------------------------------------------------------


def test_refresh_handle_is_opaque_and_long(issuer):
    grant = issuer.grant_refresh("alice", "alice-secret", "read:/data/ligo/frames", AUDIENCE)
    assert re.fullmatch(r"[A-Za-z0-9_-]{22,}", grant.refresh_token)
    assert grant.scope == "read:/data/ligo/frames"
    # only the digest is stored
    assert issuer.store.get(handle_id(grant.refresh_token)) is not None
    assert issuer.store.get(grant.refresh_token) is None


def test_wrong_secret_persists_nothing(issuer):
    with pytest.raises(AuthenticationFailed):
        issuer.grant_refresh("alice", "nope", "read:/data/ligo/frames", AUDIENCE)
    with pytest.raises(AuthenticationFailed):
        issuer.grant_refresh("mallory", "x", "read:/data/ligo/frames", AUDIENCE)
    assert len(issuer.store) == 0


def test_out_of_policy_request_persists_nothing(issuer):
    with pytest.raises(EscalationError):
        issuer.grant_refresh("alice", "alice-secret", "read:/data", AUDIENCE)
    assert len(issuer.store) == 0


def _handle(issuer, scope="read:/data/ligo/frames write:/store/user/alice"):
    return issuer.grant_refresh("alice", "alice-secret", scope, AUDIENCE).refresh_token


def test_mint_without_narrowing(issuer):
    token = issuer.mint_access(_handle(issuer, "read:/data/ligo/frames"))
    _, claims = decode_unverified(token)
    assert claims.scope_string == "read:/data/ligo/frames"
    assert claims.aud == AUDIENCE
    assert claims.exp - claims.iat == 600


def test_mint_with_narrowing(issuer):
    token = issuer.mint_access(_handle(issuer), "read:/data/ligo/frames/O3")
    assert decode_unverified(token)[1].scope_string == "read:/data/ligo/frames/O3"


def test_mint_escalation(issuer):
    with pytest.raises(EscalationError):
        issuer.mint_access(_handle(issuer), "write:/data/ligo/frames")


def test_mint_other_audience_refused(issuer):
    with pytest.raises(AudienceNotPermitted):
        issuer.mint_access(_handle(issuer), None, "https://elsewhere")


def test_origin_claim(issuer):
    token = issuer.mint_access(_handle(issuer), None, None, "node-3")
    assert decode_unverified(token)[1].origin == "node-3"


def test_handle_never_in_access_token(issuer):
    handle = _handle(issuer)
    token = issuer.mint_access(handle)
    _, claims = decode_unverified(token)
    assert handle not in token
    assert handle not in json.dumps(claims.to_payload())


def test_access_lifetime_capped_by_issuer(clock):
    issuer = TokenIssuer(ISSUER, LDG_POLICY, make_users(), clock=clock, access_lifetime=120)
    _, claims = decode_unverified(issuer.mint_access(_handle(issuer)))
    assert claims.exp - claims.iat == 120


def test_unknown_handle(issuer):
    with pytest.raises(UnknownHandle):
        issuer.mint_access("A" * 32)


def test_refresh_expiry(clock):
    issuer = TokenIssuer(ISSUER, LDG_POLICY, make_users(), clock=clock, refresh_lifetime=3600)
    handle = _handle(issuer)
    clock.advance(3599)
    issuer.mint_access(handle)
    clock.advance(1)
    with pytest.raises(RefreshExpired):
        issuer.mint_access(handle)


# -- introspection / revocation -----------------------------------------------


def test_introspection(issuer, clock):
    token = issuer.mint_access(_handle(issuer), "read:/data/ligo/frames")
    report = issuer.introspect(token)
    assert report["active"] is True
    assert report["scope"] == "read:/data/ligo/frames"
    assert report["sub"] == "alice"
    clock.advance(600)
    assert issuer.introspect(token) == {"active": False}
    assert issuer.introspect("not a token") == {"active": False}
    assert issuer.introspect("") == {"active": False}


def test_introspection_agrees_with_zero_skew_verify(issuer, clock):
    token = issuer.mint_access(_handle(issuer))
    for step in (0, 300, 299, 1, 60):
        clock.advance(step)
        try:
            verify_token(token, issuer.keyset(), ISSUER, None, clock.now(), skew=0)
            ok = True
        except Exception:
            ok = False
        assert issuer.introspect(token)["active"] is ok


def test_revoke(issuer):
    handle = _handle(issuer)
    assert issuer.revoke(handle) == {"revoked": True}
    assert issuer.revoke(handle) == {"revoked": True}
    assert issuer.revoke("unknown-handle-xyz") == {"revoked": True}
    with pytest.raises(Revoked):
        issuer.mint_access(handle)


def test_file_store_shared_between_issuers(tmp_path, clock):
    store_path = tmp_path / "refresh.json"
    a = TokenIssuer(ISSUER, LDG_POLICY, make_users(), clock=clock, store=JsonFileRefreshStore(store_path))
    handle = _handle(a)
    raw = store_path.read_text()
    assert handle not in raw
    b = TokenIssuer(ISSUER, LDG_POLICY, make_users(), clock=clock, store=JsonFileRefreshStore(store_path))
    b.mint_access(handle)
    b.revoke(handle)
    c = TokenIssuer(ISSUER, LDG_POLICY, make_users(), clock=clock, store=JsonFileRefreshStore(store_path))
    with pytest.raises(Revoked):
        c.mint_access(handle)


# -- keys ---------------------------------------------------------------------


def test_rotation_overlap_window(issuer, clock):
    handle = _handle(issuer)
    old = issuer.mint_access(handle)
    old_kid = issuer.current_kid
    new_kid = issuer.rotate_keys()
    assert new_kid != old_kid
    served = issuer.keyset()
    assert set(served.kids) == {old_kid, new_kid}
    assert [k.kid for k in served.keys if k.current] == [new_kid]
    verify_token(old, served, ISSUER, AUDIENCE, clock.now())

    fresh = issuer.mint_access(handle)
    assert decode_unverified(fresh)[0]["kid"] == new_kid

    clock.advance(24 * 3600)
    refetched = issuer.keyset()
    assert refetched.kids == [new_kid]
    with pytest.raises(UnknownKid):
        verify_token(old, refetched, ISSUER, AUDIENCE, clock.now(), skew=10**9)


def test_discovery_document(issuer):
    doc = issuer.discovery("http://localhost:9")
    assert doc["issuer"] == ISSUER
    assert doc["jwks_uri"] == "http://localhost:9/jwks"
    assert {"token_endpoint", "introspection_endpoint"} <= set(doc)


def test_seeded_issuer_is_reproducible(clock):
    import random

    def run():
        c = type(clock)(clock.now())
        iss = TokenIssuer(ISSUER, LDG_POLICY, make_users(), clock=c, rng=random.Random(9))
        h = _handle(iss)
        return h, iss.mint_access(h)

    assert run() == run()


def test_keyset_from_issuer_is_public_only(issuer):
    assert '"d"' not in issuer.keyset().dumps()
    assert isinstance(KeySet.loads(issuer.keyset().dumps()), KeySet)
    assert Permission("read", "/") not in []

from __future__ import annotations

import base64
import json
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captok.errors import (
    AudienceMismatch,
    Expired,
    InvalidClaims,
    IssuerMismatch,
    Malformed,
    NotYetValid,
    ScopeError,
    SignatureInvalid,
    UnknownKid,
    UnknownOp,
    UnsupportedAlgorithm,
)
from captok.tokens import (
    ANY_AUDIENCE,
    KeyRecord,
    KeySet,
    Permission,
    SigningKey,
    b64url_decode,
    b64url_encode,
    decode_unverified,
    encode_token,
    generate_keypair,
    parse_scope,
    print_scope,
    verify_token,
)

from .conftest import AUDIENCE, ISSUER, T0, make_claims

B64URL = string.ascii_letters + string.digits + "-_"


def _segments(token):
    return token.split(".")


# -- keys ---------------------------------------------------------------------


@pytest.mark.parametrize("alg", ["EdDSA", "ES256"])
def test_sign_verify_roundtrip(alg):
    record, key = generate_keypair(alg)
    assert record.kid
    assert record.verify(key.sign(b"message"), b"message")
    assert not record.verify(key.sign(b"message"), b"messagf")


def test_two_keypairs_have_distinct_kids():
    assert generate_keypair()[0].kid != generate_keypair()[0].kid


@pytest.mark.parametrize("alg", ["none", "HS256", "RS256", ""])
def test_unsigned_and_symmetric_algorithms_rejected(alg):
    with pytest.raises(UnsupportedAlgorithm):
        generate_keypair(alg)


def test_keyrecord_holds_no_private_material(keypair):
    jwk = keypair[0].to_jwk()
    assert "d" not in jwk
    assert KeyRecord.from_jwk(jwk).kid == keypair[0].kid


def test_keyset_rejects_duplicate_kids(keypair):
    with pytest.raises(ValueError):
        KeySet((keypair[0], keypair[0]))


def test_keyset_json_roundtrip(keypair):
    ks = KeySet((keypair[0], generate_keypair("ES256")[0]))
    again = KeySet.loads(ks.dumps())
    assert again.kids == ks.kids


def test_pem_roundtrip(keypair):
    key = SigningKey.from_pem(keypair[1].to_pem())
    assert key.kid == keypair[1].kid
    assert keypair[0].verify(key.sign(b"x"), b"x")


def test_seeded_keypair_is_deterministic():
    seed = bytes(range(32))
    assert generate_keypair(seed=seed)[0].kid == generate_keypair(seed=seed)[0].kid


# -- encode / decode ----------------------------------------------------------


def test_encode_is_three_base64url_segments(keypair):
    token = encode_token(make_claims(), keypair[1])
    parts = _segments(token)
    assert len(parts) == 3
    for part in parts:
        assert part and set(part) <= set(B64URL)
        b64url_decode(part)


def test_scope_serialized_verbatim(keypair):
    claims = make_claims(scope=tuple(parse_scope("read:/data write:/out")))
    token = encode_token(claims, keypair[1])
    payload = json.loads(b64url_decode(_segments(token)[1]))
    assert payload["scope"] == "read:/data write:/out"


@pytest.mark.parametrize(
    "overrides",
    [
        dict(exp=T0 - 1),
        dict(nbf=T0 + 1),
        dict(scope=()),
        dict(iss="not-a-url"),
        dict(jti=""),
        dict(sub=""),
    ],
)
def test_invalid_claims_refused(keypair, overrides):
    with pytest.raises(InvalidClaims):
        encode_token(make_claims(**overrides), keypair[1])


def test_lifetime_cap_enforced_on_encode(keypair):
    with pytest.raises(InvalidClaims):
        encode_token(make_claims(exp=T0 + 601), keypair[1], max_lifetime=600)


def test_encode_refuses_foreign_kid(keypair):
    with pytest.raises(UnknownKid):
        encode_token(make_claims(), keypair[1], kid="someone-else")
    other = KeySet((generate_keypair()[0],))
    with pytest.raises(UnknownKid):
        encode_token(make_claims(), keypair[1], keyset=other)


def test_decode_roundtrip(keypair):
    claims = make_claims(origin="node-7")
    header, decoded = decode_unverified(encode_token(claims, keypair[1]))
    assert decoded == claims
    assert header == {"alg": "EdDSA", "kid": keypair[1].kid, "typ": "captok"}


@pytest.mark.parametrize("bad", ["a.b", "a.b.c.d", "", "...", "a..b"])
def test_wrong_segment_count_is_malformed(bad):
    with pytest.raises(Malformed):
        decode_unverified(bad)


def test_extra_claims_preserved(keypair):
    claims = make_claims(extra={"experiment": "ligo", "n": [1, 2]})
    _, decoded = decode_unverified(encode_token(claims, keypair[1]))
    assert decoded.extra == {"experiment": "ligo", "n": [1, 2]}


def test_extra_claims_may_not_shadow_reserved(keypair):
    with pytest.raises(InvalidClaims):
        encode_token(make_claims(extra={"scope": "write:/"}), keypair[1])


def test_b64url_rejects_padding_and_noncanonical_bits():
    assert b64url_decode(b64url_encode(b"\x00\xff")) == b"\x00\xff"
    with pytest.raises(Malformed):
        b64url_decode("AP8=")
    with pytest.raises(Malformed):
        b64url_decode("AP9")  # same bytes as "AP8", stray low bits set
    with pytest.raises(Malformed):
        b64url_decode("A+8")


# -- verification -------------------------------------------------------------


def test_fresh_token_verifies_at_iat(keypair, keyset):
    token = encode_token(make_claims(), keypair[1])
    verified = verify_token(token, keyset, ISSUER, AUDIENCE, T0)
    assert verified.sub == "alice"
    assert verified.header["kid"] == keypair[0].kid


def test_expired_beyond_skew(keypair, keyset):
    now = T0 + 1000
    token = encode_token(make_claims(exp=now - 120, iat=now - 300, nbf=now - 300), keypair[1])
    with pytest.raises(Expired):
        verify_token(token, keyset, ISSUER, AUDIENCE, now, skew=60)


def test_skew_tolerance_both_sides(keypair, keyset):
    token = encode_token(make_claims(), keypair[1])
    verify_token(token, keyset, ISSUER, AUDIENCE, T0 + 600 + 59, skew=60)
    with pytest.raises(Expired):
        verify_token(token, keyset, ISSUER, AUDIENCE, T0 + 600 + 60, skew=60)
    verify_token(token, keyset, ISSUER, AUDIENCE, T0 - 60, skew=60)
    with pytest.raises(NotYetValid):
        verify_token(token, keyset, ISSUER, AUDIENCE, T0 - 61, skew=60)


def test_issuer_and_audience_checks(keypair, keyset):
    token = encode_token(make_claims(), keypair[1])
    with pytest.raises(IssuerMismatch):
        verify_token(token, keyset, "https://evil.example.org", AUDIENCE, T0)
    with pytest.raises(AudienceMismatch):
        verify_token(token, keyset, ISSUER, "https://other.example.org", T0)


def test_any_audience_is_opt_in(keypair, keyset):
    token = encode_token(make_claims(aud=ANY_AUDIENCE), keypair[1])
    verify_token(token, keyset, ISSUER, AUDIENCE, T0, allow_any_audience=True)
    with pytest.raises(AudienceMismatch):
        verify_token(token, keyset, ISSUER, AUDIENCE, T0, allow_any_audience=False)


def test_key_isolation(keypair, keyset):
    token = encode_token(make_claims(), keypair[1])
    verify_token(token, keyset, ISSUER, AUDIENCE, T0)
    with pytest.raises(UnknownKid):
        verify_token(token, keyset.without(keypair[0].kid), ISSUER, AUDIENCE, T0)


def test_substituted_key_under_same_kid_fails(keypair):
    """A record that claims the kid but holds another public key must not verify."""
    other = generate_keypair()[0]
    forged = KeySet((KeyRecord(keypair[0].kid, other.alg, other.params),))
    token = encode_token(make_claims(), keypair[1])
    with pytest.raises(SignatureInvalid):
        verify_token(token, forged, ISSUER, AUDIENCE, T0)


def _reheader(token, **fields):
    h, p, s = _segments(token)
    header = json.loads(b64url_decode(h))
    header.update(fields)
    raw = json.dumps(header, separators=(",", ":")).encode()
    return ".".join([b64url_encode(raw), p, s])


@pytest.mark.parametrize("fields", [{"alg": "none"}, {"alg": "HS256"}, {"typ": "JWT"}, {"alg": "ES256"}])
def test_header_downgrade_rejected(keypair, keyset, fields):
    token = _reheader(encode_token(make_claims(), keypair[1]), **fields)
    with pytest.raises((Malformed, SignatureInvalid)):
        verify_token(token, keyset, ISSUER, AUDIENCE, T0)


def test_unknown_version_rejected(keypair, keyset):
    token = encode_token(make_claims(ver="captok/2"), keypair[1])
    with pytest.raises(Malformed):
        verify_token(token, keyset, ISSUER, AUDIENCE, T0)


def test_single_character_mutations_exhaustive_for_one_token(keypair, keyset):
    """Every position, every alternative character, for one token."""
    token = encode_token(make_claims(scope=tuple(parse_scope("read:/data/ligo write:/out"))), keypair[1])
    accepted = []
    for i, ch in enumerate(token):
        for alt in B64URL + ".=":
            if alt == ch:
                continue
            mutated = token[:i] + alt + token[i + 1 :]
            try:
                verify_token(mutated, keyset, ISSUER, AUDIENCE, T0)
            except (Malformed, SignatureInvalid, UnknownKid):
                continue
            accepted.append((i, alt))
    assert accepted == []


def test_payload_swap_between_tokens_fails(keypair, keyset):
    a = encode_token(make_claims(), keypair[1])
    b = encode_token(make_claims(scope=(Permission("write", "/"),)), keypair[1])
    spliced = ".".join([_segments(a)[0], _segments(b)[1], _segments(a)[2]])
    with pytest.raises(SignatureInvalid):
        verify_token(spliced, keyset, ISSUER, AUDIENCE, T0)


def test_raw_signature_bytes_mutation(keypair, keyset):
    h, p, s = _segments(encode_token(make_claims(), keypair[1]))
    sig = bytearray(base64.urlsafe_b64decode(s + "=="))
    sig[0] ^= 1
    with pytest.raises(SignatureInvalid):
        verify_token(".".join([h, p, b64url_encode(bytes(sig))]), keyset, ISSUER, AUDIENCE, T0)


# -- scope grammar ------------------------------------------------------------


def test_parse_scope_examples():
    assert parse_scope("read:/data/ligo/frames write:/store/user/alice") == [
        Permission("read", "/data/ligo/frames"),
        Permission("write", "/store/user/alice"),
    ]
    assert parse_scope("") == []


@pytest.mark.parametrize("bad", ["execute:/x", "delete:/x"])
def test_unknown_op(bad):
    with pytest.raises(UnknownOp):
        parse_scope(bad)


@pytest.mark.parametrize(
    "bad", ["read", "read:", "read:data", "read:/a/../b", "read:/a/./b", "read:/a  write:/b", " read:/a", "read:/a\x00"]
)
def test_bad_scope_items(bad):
    with pytest.raises(ScopeError):
        parse_scope(bad)


def test_permission_requires_canonical_path():
    with pytest.raises(ScopeError):
        Permission("read", "/a/")
    assert Permission.of("read", "/a//b/").path == "/a/b"
    assert str(Permission("write", "/x")) == "write:/x"


# -- properties ---------------------------------------------------------------

segment = st.text(alphabet=string.ascii_letters + string.digits + "_-", min_size=1, max_size=8)
paths = st.lists(segment, max_size=4).map(lambda segs: "/" + "/".join(segs))
permissions = st.builds(Permission, st.sampled_from(["read", "write"]), paths)
scopes = st.lists(permissions, min_size=1, max_size=5)


@given(scopes)
def test_scope_print_parse_roundtrip(perms):
    assert parse_scope(print_scope(perms)) == perms


_PROPERTY_KEY = generate_keypair(seed=b"\x07" * 32)


@settings(max_examples=150, deadline=None)
@given(
    sub=segment,
    jti=segment,
    iat=st.integers(min_value=0, max_value=2**40),
    life=st.integers(min_value=0, max_value=86400),
    pre=st.integers(min_value=0, max_value=600),
    scope=scopes,
    origin=st.none() | segment,
    extra=st.dictionaries(st.sampled_from(["x", "site", "vo"]), st.integers() | st.text(max_size=5), max_size=2),
)
def test_claims_roundtrip_property(sub, jti, iat, life, pre, scope, origin, extra):
    claims = make_claims(
        sub=sub, jti=jti, iat=iat, nbf=iat - pre, exp=iat + life, scope=tuple(scope), origin=origin, extra=extra
    )
    _, decoded = decode_unverified(encode_token(claims, _PROPERTY_KEY[1]))
    assert decoded == claims


_EXPIRING = encode_token(make_claims(), _PROPERTY_KEY[1])


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=T0, max_value=T0 + 10_000), st.floats(min_value=0, max_value=1e7))
def test_expiry_is_monotone(now, later):
    keys = KeySet((_PROPERTY_KEY[0],))

    def state(t):
        try:
            verify_token(_EXPIRING, keys, ISSUER, AUDIENCE, t)
            return "ok"
        except Expired:
            return "expired"

    if state(now) == "expired":
        assert state(now + later) == "expired"

from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from captok.authz import ACL, AccessRequest, acl_from_token, attenuate, dominates, permits, reroot
from captok.errors import EscalationError, PathError, TraversalRejected
from captok.paths import normalize_path
from captok.tokens import Permission, parse_scope

from .conftest import all_paths, make_claims, segment_oracle

UNIVERSE = all_paths()
OPS = ("read", "write")


def P(text):
    return parse_scope(text)


def random_perms(rng, max_size=4):
    return [Permission(rng.choice(OPS), rng.choice(UNIVERSE)) for _ in range(rng.randint(0, max_size))]


def test_universe_size():
    assert len(UNIVERSE) == 1093
    assert len(set(UNIVERSE)) == 1093


# -- normalization ------------------------------------------------------------


@pytest.mark.parametrize(
    "raw, canonical",
    [("/a//b/./c", "/a/b/c"), ("/", "/"), ("//", "/"), ("/a/", "/a"), ("/./", "/"), ("/a/.../b", "/a/.../b")],
)
def test_normalize_examples(raw, canonical):
    assert normalize_path(raw) == canonical


@pytest.mark.parametrize("raw", ["/a/../b", "/..", "/a/..", "/../etc/passwd"])
def test_traversal_rejected(raw):
    with pytest.raises(TraversalRejected):
        normalize_path(raw)


@pytest.mark.parametrize("raw", ["", "a/b", "./a", "/a\x00b"])
def test_invalid_paths(raw):
    with pytest.raises(PathError):
        normalize_path(raw)


@given(st.lists(st.sampled_from(["a", "b", "", ".", "..", "x.y", "%2e%2e"]), max_size=8))
def test_normalize_idempotent(parts):
    raw = "/" + "/".join(parts)
    try:
        once = normalize_path(raw)
    except PathError:
        return
    assert normalize_path(once) == once


def test_access_request_normalizes():
    assert AccessRequest("read", "/a//b/").normalized() == AccessRequest("read", "/a/b")
    with pytest.raises(ValueError):
        AccessRequest("delete", "/a").normalized()


# -- permits ------------------------------------------------------------------


def test_permits_examples():
    assert permits(P("read:/data"), "read", "/data/frames/x.gwf")
    assert not permits(P("read:/data/ligo"), "read", "/data/ligo2/a")
    assert not permits(P("write:/store/user/alice"), "read", "/store/user/alice/out")
    assert permits(P("read:/"), "read", "/anything/at/all")
    assert not permits([], "read", "/")


def test_permits_matches_segment_oracle_on_universe():
    rng = random.Random(1)
    for _ in range(40):
        perms = random_perms(rng)
        for op in OPS:
            for path in UNIVERSE:
                assert permits(perms, op, path) == segment_oracle(perms, op, path), (perms, op, path)


def test_monotonicity():
    rng = random.Random(2)
    for _ in range(100):
        small = random_perms(rng)
        big = small + random_perms(rng)
        for op in OPS:
            for path in rng.sample(UNIVERSE, 100):
                if permits(small, op, path):
                    assert permits(big, op, path)


# -- attenuation --------------------------------------------------------------


def test_attenuate_examples():
    assert attenuate(P("read:/data"), P("read:/data/ligo")) == P("read:/data/ligo")
    with pytest.raises(EscalationError) as info:
        attenuate(P("read:/data"), P("write:/data"))
    assert info.value.offending == Permission("write", "/data")
    assert attenuate(P("read:/a write:/b"), P("read:/a/x write:/b/y")) == P("read:/a/x write:/b/y")
    assert attenuate(P("read:/a"), []) == P("read:/a")


def test_attenuate_segment_boundary():
    with pytest.raises(EscalationError):
        attenuate(P("read:/data/ligo"), P("read:/data/ligo2"))


def test_attenuation_soundness_by_enumeration():
    rng = random.Random(3)
    checked = 0
    for _ in range(150):
        parent = random_perms(rng, 3)
        requested = random_perms(rng, 3)
        try:
            granted = attenuate(parent, requested)
        except EscalationError:
            assert any(not any(dominates(p, r) for p in parent) for r in requested)
            continue
        checked += 1
        for op in OPS:
            for path in UNIVERSE:
                if segment_oracle(granted, op, path):
                    assert segment_oracle(parent, op, path)
    assert checked > 20


# -- re-rooting ---------------------------------------------------------------


def test_acl_examples():
    claims = make_claims(scope=tuple(P("read:/data/ligo")))
    assert acl_from_token(claims, "/data") == ACL(tuple(P("read:/ligo")))
    assert len(acl_from_token(make_claims(scope=tuple(P("read:/other"))), "/data")) == 0
    both = make_claims(scope=tuple(P("read:/data write:/data/out")))
    assert list(acl_from_token(both, "/data")) == P("read:/ write:/out")
    assert str(acl_from_token(both, "/")) == "read:/data write:/data/out"


def test_mount_is_segment_bounded():
    assert reroot("/data2/x", "/data") is None
    assert reroot("/data", "/data") == "/"
    assert reroot("/data/x", "/") == "/data/x"


def _reroot_oracle(path, mount):
    mseg = [s for s in mount.split("/") if s]
    pseg = [s for s in path.split("/") if s]
    if pseg[: len(mseg)] != mseg:
        return None
    return "/" + "/".join(pseg[len(mseg):])


def test_reroot_consistency_on_universe():
    rng = random.Random(4)
    mounts = ["/", "/a", "/a/b", "/c/a/b"]
    for _ in range(30):
        perms = random_perms(rng)
        claims = make_claims(scope=tuple(perms or P("read:/zzz")))
        for mount in mounts:
            acl = acl_from_token(claims, mount)
            for path in UNIVERSE:
                rel = _reroot_oracle(path, mount)
                assert reroot(path, mount) == rel
                if rel is None:
                    continue
                for op in OPS:
                    assert permits(claims.scope, op, path) == acl.permits(op, rel)

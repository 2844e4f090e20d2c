from __future__ import annotations

import itertools

import pytest

from captok.clock import SimulatedClock
from captok.issuer import PolicyRule, TokenIssuer, UserDirectory
from captok.tokens import KeySet, Permission, TokenClaims, generate_keypair

ISSUER = "https://issuer.example.org"
AUDIENCE = "https://data.example.org"
T0 = 1_700_000_000


def all_paths(alphabet: str = "abc", depth: int = 6) -> list[str]:
    """Every canonical path over ``alphabet`` up to ``depth`` segments, root included."""
    out = ["/"]
    for d in range(1, depth + 1):
        out.extend("/" + "/".join(p) for p in itertools.product(alphabet, repeat=d))
    return out


def segment_oracle(perms, op: str, path: str) -> bool:
    """Brute-force reference: list-prefix test on segment lists."""
    target = [s for s in path.split("/") if s]
    for perm in perms:
        if perm.op != op:
            continue
        prefix = [s for s in perm.path.split("/") if s]
        if target[: len(prefix)] == prefix:
            return True
    return False


def make_claims(**overrides) -> TokenClaims:
    base = dict(
        iss=ISSUER,
        sub="alice",
        aud=AUDIENCE,
        exp=T0 + 600,
        nbf=T0,
        iat=T0,
        jti="jti-0001",
        scope=(Permission("read", "/data"),),
    )
    base.update(overrides)
    return TokenClaims(**base)


@pytest.fixture(scope="session")
def keypair():
    return generate_keypair()


@pytest.fixture(scope="session")
def keyset(keypair):
    return KeySet((keypair[0],))


@pytest.fixture
def clock():
    return SimulatedClock(float(T0))


LDG_POLICY = [
    PolicyRule(
        match="LDGUsers",
        kind="group",
        grantable=("read:/data/ligo/frames", "write:/store/user/{username}"),
        max_access_lifetime=600,
        max_refresh_lifetime=30 * 24 * 3600,
        audiences=(AUDIENCE,),
    )
]


def make_users() -> UserDirectory:
    users = UserDirectory()
    users.add_user("alice", "alice-secret", ["LDGUsers"], iterations=1000)
    users.add_user("bob", "bob-secret", ["Visitors"], iterations=1000)
    return users


@pytest.fixture
def issuer(clock):
    return TokenIssuer(ISSUER, LDG_POLICY, make_users(), clock=clock)

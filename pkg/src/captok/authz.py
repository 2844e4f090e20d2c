"""Access decisions from verified scopes.

Matching is on path segments, never raw string prefixes: ``read:/data/ligo``
covers ``/data/ligo/x`` but not ``/data/ligo2``.  ``read`` and ``write`` are
independent; neither implies the other.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import EscalationError
from .paths import is_ancestor_or_equal, normalize_path
from .tokens import OPS, Permission, TokenClaims, VerifiedClaims, print_scope

__all__ = [
    "ACL",
    "AccessRequest",
    "acl_from_token",
    "attenuate",
    "dominates",
    "normalize_path",
    "permits",
    "reroot",
]


@dataclass(frozen=True)
class AccessRequest:
    op: str
    path: str
    origin: str | None = None

    def normalized(self) -> AccessRequest:
        if self.op not in OPS:
            raise ValueError(f"unknown operation {self.op!r}")
        return AccessRequest(self.op, normalize_path(self.path), self.origin)


def dominates(parent: Permission, child: Permission) -> bool:
    return parent.op == child.op and is_ancestor_or_equal(parent.path, child.path)


def permits(perms: Iterable[Permission], op: str, path: str) -> bool:
    """True iff some permission with ``op`` is ``path`` or an ancestor of it."""
    return any(p.op == op and is_ancestor_or_equal(p.path, path) for p in perms)


def reroot(path: str, mount_prefix: str) -> str | None:
    """Express ``path`` relative to ``mount_prefix``; ``None`` if outside it."""
    if not is_ancestor_or_equal(mount_prefix, path):
        return None
    if mount_prefix == "/":
        return path
    return path[len(mount_prefix):] or "/"


@dataclass(frozen=True)
class ACL:
    entries: tuple[Permission, ...] = ()

    def permits(self, op: str, path: str) -> bool:
        return permits(self.entries, op, path)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __str__(self) -> str:
        return print_scope(self.entries)


def acl_from_token(claims: VerifiedClaims | TokenClaims, mount_prefix: str = "/") -> ACL:
    """Re-root the token's permissions onto a gateway mount.

    Permissions outside the mount are dropped; an empty ACL denies everything.
    """
    scope = claims.scope
    entries = []
    for perm in scope:
        rel = reroot(perm.path, mount_prefix)
        if rel is not None:
            entries.append(Permission(perm.op, rel))
    return ACL(tuple(entries))


def attenuate(parent: Sequence[Permission], requested: Sequence[Permission]) -> list[Permission]:
    """Narrow ``parent`` to ``requested``, refusing any escalation.

    An empty request returns ``parent`` unchanged.
    """
    if not requested:
        return list(parent)
    for want in requested:
        if not any(dominates(have, want) for have in parent):
            raise EscalationError(want)
    return list(requested)


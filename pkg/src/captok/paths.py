"""Canonical absolute paths."""

from __future__ import annotations

from .errors import PathError, TraversalRejected


def normalize_path(raw: str) -> str:
    """Return the canonical form of an absolute path.

    Duplicate slashes collapse, ``.`` segments vanish and a trailing slash is
    dropped (root stays ``/``).  ``..`` is rejected outright rather than
    resolved.
    """
    if not isinstance(raw, str) or raw == "":
        raise PathError("empty path")
    if "\x00" in raw:
        raise PathError("path contains NUL")
    if not raw.startswith("/"):
        raise PathError(f"relative path {raw!r}")
    segments = []
    for seg in raw.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            raise TraversalRejected(f"'..' segment in {raw!r}")
        segments.append(seg)
    return "/" + "/".join(segments)


def segments(path: str) -> list[str]:
    """Segment list of a canonical path; root has none."""
    return [s for s in path.split("/") if s]


def is_ancestor_or_equal(ancestor: str, path: str) -> bool:
    """Segment-boundary prefix test on canonical paths."""
    if ancestor == "/":
        return True
    return path == ancestor or path.startswith(ancestor + "/")

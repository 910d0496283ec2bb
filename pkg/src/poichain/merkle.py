from __future__ import annotations

from typing import Sequence

from .crypto import sha256


def merkle_root(items: Sequence[bytes]) -> bytes:
    """Binary SHA-256 Merkle root.

    Leaves are ``SHA-256(item)``; an odd node at any level is paired with
    itself.  The empty list hashes to ``SHA-256(b"")`` and a single item to
    its own leaf hash.
    """
    if not items:
        return sha256(b"")
    level = [sha256(i) for i in items]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]

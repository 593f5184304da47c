"""Signature-verification sharding.

In stable epochs where every node leads, only the ``f+1`` successors of a
batch's leader check client signatures, and nobody commits the batch before
all of them have prepared it.
"""

from __future__ import annotations

from typing import AbstractSet, FrozenSet


def verifiers_of(leader: int, n: int, f: int) -> FrozenSet[int]:
    return frozenset((leader + k) % n for k in range(1, f + 2))


def svs_active(epoch_stable: bool, num_leaders: int, n: int, enabled: bool = True) -> bool:
    return enabled and epoch_stable and num_leaders == n


def commit_gate(
    prepares: AbstractSet[int],
    leader: int,
    n: int,
    f: int,
    epoch_stable: bool,
    quorum: int | None = None,
) -> bool:
    """Whether a node may send COMMIT.

    ``prepares`` holds the distinct senders of matching PREPAREs, the node
    itself included.  The leader's PRE-PREPARE counts as its own prepare.
    """
    q = 2 * f + 1 if quorum is None else quorum
    voters = set(prepares) | {leader}
    if len(voters) < q:
        return False
    if not epoch_stable:
        return True
    return verifiers_of(leader, n, f) <= voters

"""Request hash-space partitioning into buckets and bucket-to-leader assignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

from .crypto import digest


class EmptyLeaderSet(ValueError):
    pass


class NotStableEpoch(ValueError):
    pass


def bucket_key(t: int, c: str) -> bytes:
    """The bytes hashed to place request (t, c); the payload is deliberately absent."""
    return t.to_bytes(8, "big") + c.encode()


def bucket_of(t: int, c: str, num_buckets: int) -> int:
    """Bucket index of the contiguous hash range containing H(t || c)."""
    prefix = int.from_bytes(digest(bucket_key(t, c))[:8], "big")
    return (prefix * num_buckets) >> 64


@dataclass(frozen=True)
class BucketAssignment:
    """leader -> ordered tuple of buckets."""

    buckets: Tuple[Tuple[int, Tuple[int, ...]], ...]
    rotation_counter: int = 0

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, Sequence[int]], rotation_counter: int = 0):
        return cls(tuple((k, tuple(v)) for k, v in sorted(mapping.items())), rotation_counter)

    def as_dict(self) -> Dict[int, Tuple[int, ...]]:
        return dict(self.buckets)

    def of(self, leader: int) -> Tuple[int, ...]:
        for k, v in self.buckets:
            if k == leader:
                return v
        return ()

    def owner(self) -> Dict[int, int]:
        """bucket -> leader."""
        return {b: k for k, v in self.buckets for b in v}


def _split_runs(items: Sequence[int], parts: int):
    """Split into ``parts`` contiguous runs, longer runs first, lengths differing by <= 1."""
    q, r = divmod(len(items), parts)
    out, pos = [], 0
    for i in range(parts):
        size = q + (1 if i < r else 0)
        out.append(tuple(items[pos : pos + size]))
        pos += size
    return out


def assign_buckets(
    leaders: Sequence[int],
    primary: int,
    primary_start: int,
    num_buckets: int,
) -> BucketAssignment:
    """Primary takes ceil(B/|EL|) consecutive buckets from ``primary_start``
    (wrapping); the rest follow in index order, split among the other leaders
    in ascending id order."""
    if not leaders:
        raise EmptyLeaderSet("leader set is empty")
    if primary not in leaders:
        raise ValueError(f"primary {primary} not among leaders {list(leaders)}")
    count = -(-num_buckets // len(leaders))
    order = [(primary_start + i) % num_buckets for i in range(num_buckets)]
    mapping: Dict[int, Tuple[int, ...]] = {primary: tuple(order[:count])}
    others = sorted(x for x in leaders if x != primary)
    if others:
        for leader, run in zip(others, _split_runs(order[count:], len(others))):
            mapping[leader] = run
    return BucketAssignment.from_mapping(mapping)


def initial_assignment(n: int, buckets_per_leader: int) -> BucketAssignment:
    """Epoch 0: leader k holds [k*m, (k+1)*m)."""
    m = buckets_per_leader
    return BucketAssignment.from_mapping({k: tuple(range(k * m, (k + 1) * m)) for k in range(n)})


def rotate(assignment: BucketAssignment, n: int) -> BucketAssignment:
    """Leader i takes the buckets leader (i+1) mod n held."""
    old = assignment.as_dict()
    if sorted(old) != list(range(n)):
        raise NotStableEpoch("rotation requires every node to be a leader")
    new = {i: old[(i + 1) % n] for i in range(n)}
    return BucketAssignment.from_mapping(new, assignment.rotation_counter + 1)


def rotated(assignment: BucketAssignment, n: int, times: int) -> BucketAssignment:
    """``rotate`` applied ``times`` times, in O(n)."""
    if times == 0:
        return assignment
    old = assignment.as_dict()
    if sorted(old) != list(range(n)):
        raise NotStableEpoch("rotation requires every node to be a leader")
    new = {i: old[(i + times) % n] for i in range(n)}
    return BucketAssignment.from_mapping(new, assignment.rotation_counter + times)


def rotation_index(sn: int, first: int, rotation_period: int) -> int:
    return (sn - first) // rotation_period


def active_rotation_ready(
    last_delivered: int,
    first: int,
    rotation_period: int,
    sn: int,
    delivered: Optional[Mapping[int, bool]] = None,
) -> bool:
    """True iff every sequence number of the rotation window preceding ``sn``'s is delivered.

    Delivery is prefix-ordered, so ``last_delivered`` suffices; an explicit
    ``delivered`` ledger (sn -> bool) may be passed instead and is checked in full.
    """
    r = rotation_index(sn, first, rotation_period)
    if r <= 0:
        return True
    prev_last = first + r * rotation_period - 1
    if delivered is not None:
        return all(delivered.get(s, False) for s in range(first, prev_last + 1))
    return last_delivered >= prev_last

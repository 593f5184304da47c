"""Wire messages exchanged between clients and nodes.

All messages are immutable.  Messages that are forwarded inside certificates
(PRE-PREPARE, PREPARE, CHECKPOINT, EPOCH-CHANGE, NEW-EPOCH) carry a signature
over :meth:`signed_bytes`; the rest rely on the authenticated channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

from .crypto import Signature, digest, digest_many

NO_SIG = Signature("none", b"")


def _ints(*values: int) -> bytes:
    return b"".join(v.to_bytes(8, "big", signed=True) for v in values)


def request_bytes(payload: bytes, t: int, c: str) -> bytes:
    return digest_many(b"REQUEST", payload, _ints(t), c.encode())


@dataclass(frozen=True)
class Request:
    payload: bytes
    t: int
    c: str
    sig: Signature = field(default=NO_SIG, compare=False)

    @cached_property
    def digest(self) -> bytes:
        """H(payload || t || c): the duplicate-prevention key."""
        return digest_many(self.payload, _ints(self.t), self.c.encode())

    @property
    def key(self) -> Tuple[str, int]:
        return (self.c, self.t)

    def signed_bytes(self) -> bytes:
        return request_bytes(self.payload, self.t, self.c)


@dataclass(frozen=True)
class Batch:
    requests: Tuple[Request, ...] = ()

    @cached_property
    def digest(self) -> bytes:
        return digest_many(b"BATCH", *(r.digest for r in self.requests))

    def __len__(self) -> int:
        return len(self.requests)


EMPTY_BATCH = Batch(())


@dataclass(frozen=True)
class EpochConfig:
    e: int
    first: int
    last: Optional[int]
    leaders: Tuple[int, ...]
    primary_buckets: Tuple[int, ...]

    @property
    def primary(self) -> int:
        return self.leaders[0]

    @property
    def unbounded(self) -> bool:
        return self.last is None

    def contains(self, sn: int) -> bool:
        return sn >= self.first and (self.last is None or sn <= self.last)

    @cached_property
    def digest(self) -> bytes:
        last = -1 if self.last is None else self.last
        return digest_many(
            b"CONFIG", _ints(self.e, self.first, last), _ints(*self.leaders), _ints(*self.primary_buckets)
        )

    def to_json(self) -> dict:
        return {
            "e": self.e,
            "first": self.first,
            "last": self.last,
            "leaders": list(self.leaders),
            "primary_buckets": list(self.primary_buckets),
        }


# --- client <-> node -------------------------------------------------------


@dataclass(frozen=True)
class RequestMsg:
    request: Request


@dataclass(frozen=True)
class CommitAck:
    """Node -> client notification that request (c, t) was delivered."""

    sender: int
    c: str
    t: int
    req_digest: bytes
    client_low: int


@dataclass(frozen=True)
class WatermarkNotice:
    """Node -> client: the client's low watermark advanced at a stable checkpoint."""

    sender: int
    c: str
    client_low: int


# --- common case -----------------------------------------------------------


@dataclass(frozen=True)
class PrePrepare:
    e: int
    sn: int
    batch: Batch
    leader: int
    sig: Signature = field(default=NO_SIG, compare=False)

    def signed_bytes(self) -> bytes:
        return digest_many(b"PRE-PREPARE", _ints(self.e, self.sn, self.leader), self.batch.digest)


@dataclass(frozen=True)
class Prepare:
    e: int
    sn: int
    digest: bytes
    sender: int
    sig: Signature = field(default=NO_SIG, compare=False)

    def signed_bytes(self) -> bytes:
        return digest_many(b"PREPARE", _ints(self.e, self.sn, self.sender), self.digest)


@dataclass(frozen=True)
class Commit:
    e: int
    sn: int
    digest: bytes
    sender: int


# --- checkpointing ---------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    sn: int
    digest: bytes
    sender: int
    sig: Signature = field(default=NO_SIG, compare=False)

    def signed_bytes(self) -> bytes:
        return digest_many(b"CHECKPOINT", _ints(self.sn, self.sender), self.digest)


@dataclass(frozen=True)
class StableCheckpoint:
    sn: int
    state_digest: bytes
    attestations: Tuple[Checkpoint, ...] = ()


GENESIS_CHECKPOINT = StableCheckpoint(-1, digest(b"genesis"), ())


# --- epoch change ----------------------------------------------------------


@dataclass(frozen=True)
class PreparedCert:
    preprepare: PrePrepare
    prepares: Tuple[Prepare, ...]

    @property
    def e(self) -> int:
        return self.preprepare.e

    @property
    def sn(self) -> int:
        return self.preprepare.sn


@dataclass(frozen=True)
class EpochChange:
    e: int  # the epoch being moved to
    checkpoint: StableCheckpoint
    prepared: Tuple[PreparedCert, ...]
    suspect: Optional[int]
    last_config: EpochConfig
    sender: int
    sig: Signature = field(default=NO_SIG, compare=False)

    def signed_bytes(self) -> bytes:
        parts = [
            b"EPOCH-CHANGE",
            _ints(self.e, self.sender, -1 if self.suspect is None else self.suspect),
            self.last_config.digest,
            _ints(self.checkpoint.sn),
            self.checkpoint.state_digest,
        ]
        for cert in self.prepared:
            parts.append(_ints(cert.e, cert.sn))
            parts.append(cert.preprepare.batch.digest)
        return digest_many(*parts)


@dataclass(frozen=True)
class NewEpoch:
    e: int
    echanges: Tuple[EpochChange, ...]
    reproposals: Tuple[PrePrepare, ...]
    sender: int
    sig: Signature = field(default=NO_SIG, compare=False)

    def signed_bytes(self) -> bytes:
        parts = [b"NEW-EPOCH", _ints(self.e, self.sender)]
        parts.extend(ec.sig.value for ec in self.echanges)
        for pp in self.reproposals:
            parts.append(_ints(pp.sn))
            parts.append(pp.batch.digest)
        return digest_many(*parts)


# --- reliable broadcast of epoch configurations ----------------------------


@dataclass(frozen=True)
class RBSend:
    e: int
    config: EpochConfig
    sender: int


@dataclass(frozen=True)
class RBEcho:
    e: int
    config: EpochConfig
    sender: int


@dataclass(frozen=True)
class RBReady:
    e: int
    config: EpochConfig
    sender: int


# --- state transfer --------------------------------------------------------


@dataclass(frozen=True)
class Hello:
    sender: int
    epoch: int
    ne_epoch: int
    checkpoint: StableCheckpoint
    last_delivered: int


@dataclass(frozen=True)
class StateReply:
    hello: Hello
    active: bool
    configs: Tuple[EpochConfig, ...]
    checkpoint: Optional[StableCheckpoint]
    batches: Tuple[Tuple[int, Batch], ...]
    certs: Tuple[StableCheckpoint, ...] = ()


COMMON_CASE = (PrePrepare, Prepare, Commit)

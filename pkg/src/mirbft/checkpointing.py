"""Checkpoints, stable certificates, garbage collection and watermarks."""

from __future__ import annotations

import logging
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

from .crypto import digest
from .messages import GENESIS_CHECKPOINT, Checkpoint, StableCheckpoint, WatermarkNotice

log = logging.getLogger(__name__)


def state_digest(batch_digests: Sequence[bytes]) -> bytes:
    """Digest of the concatenated batch digests of one checkpoint interval."""
    return digest(b"".join(batch_digests))


def checkpoint_due(sn: int, period: int) -> bool:
    return sn % period == 0


def interval(sn: int, period: int) -> range:
    """Sequence numbers a checkpoint at ``sn`` covers: (sn - C, sn], clipped at 0."""
    return range(max(0, sn - period + 1), sn + 1)


def advance_client_watermark(delivered: Iterable[int], low: int = 0) -> int:
    """Highest t such that every timestamp in (low, t] was delivered."""
    ts = set(delivered)
    while low + 1 in ts:
        low += 1
    return low


def advance_client_watermarks(
    delivered: Mapping[str, Iterable[int]], lows: Mapping[str, int], wc: int
) -> Dict[str, Tuple[int, int]]:
    out = {}
    for c in sorted(set(delivered) | set(lows)):
        low = advance_client_watermark(delivered.get(c, ()), lows.get(c, 0))
        out[c] = (low, low + wc)
    return out


def stable_certificate(votes: Iterable[Checkpoint], quorum: int) -> Optional[StableCheckpoint]:
    """A certificate from ``quorum`` distinct matching votes, if there are enough."""
    groups: Dict[Tuple[int, bytes], Dict[int, Checkpoint]] = {}
    for v in votes:
        groups.setdefault((v.sn, v.digest), {}).setdefault(v.sender, v)
    for (sn, d), by_sender in sorted(groups.items()):
        if len(by_sender) >= quorum:
            return StableCheckpoint(sn, d, tuple(by_sender[s] for s in sorted(by_sender)))
    return None


def verify_certificate(
    cert: StableCheckpoint, quorum: int, verify_vote: Callable[[Checkpoint], bool]
) -> bool:
    if cert == GENESIS_CHECKPOINT:
        return True
    if cert.sn < 0:
        return False
    senders = set()
    for v in cert.attestations:
        if v.sn != cert.sn or v.digest != cert.state_digest or v.sender in senders:
            return False
        if not verify_vote(v):
            return False
        senders.add(v.sender)
    return len(senders) >= quorum


class CheckpointMixin:
    """Checkpoint handling for :class:`~mirbft.replica.Replica`."""

    def _init_checkpointing(self) -> None:
        self.stable: StableCheckpoint = GENESIS_CHECKPOINT
        self.stable_certs: Dict[int, StableCheckpoint] = {-1: GENESIS_CHECKPOINT}
        self.ckpt_votes: Dict[int, Dict[int, Checkpoint]] = {}
        self.wm_snap: Dict[int, Dict[str, int]] = {}
        self.wm_applied = -1
        self.lag_checkpoint: Optional[int] = None

    def _verify_cert(self, cert: StableCheckpoint) -> bool:
        return verify_certificate(cert, self.q, lambda v: self._verify_node(v, v.sender))

    def _emit_checkpoint(self, sn: int) -> None:
        C = self.p.checkpoint_period
        d = state_digest([self.log[i].digest for i in interval(sn, C)])
        self.wm_snap[sn] = dict(self.contig)
        ck = Checkpoint(sn, d, self.id)
        ck = Checkpoint(sn, d, self.id, self._sign(ck))
        self.env.trace("checkpoint", node=self.id, sn=sn, digest=d.hex(), stable=False)
        self.send_others(ck)
        self.on_checkpoint(self.id, ck)

    def on_checkpoint(self, src, ck: Checkpoint) -> Optional[StableCheckpoint]:
        if ck.sender != src or ck.sn <= self.stable.sn or ck.sn % self.p.checkpoint_period:
            return None
        votes = self.ckpt_votes.setdefault(ck.sn, {})
        if ck.sender in votes:
            return None
        if src != self.id and not self._verify_node(ck, ck.sender):
            return None
        votes[ck.sender] = ck
        own = votes.get(self.id)
        if own is not None:
            matching = [v for v in votes.values() if v.digest == own.digest]
            if len(matching) >= self.q:
                cert = StableCheckpoint(ck.sn, own.digest, tuple(sorted(matching, key=lambda v: v.sender)))
                self._adopt_stable(cert)
                return cert
        elif ck.sn > self.last_delivered:
            cert = stable_certificate(votes.values(), self.q)
            if cert is not None:
                self.stable_certs.setdefault(cert.sn, cert)
                self._note_lag_checkpoint(cert.sn)
        return None

    def _adopt_stable(self, cert: StableCheckpoint) -> bool:
        if cert.sn <= self.stable.sn:
            return False
        self.stable = cert
        self.stable_certs[cert.sn] = cert
        sn = cert.sn
        for d in (self.instances, self.ckpt_votes, self.pcerts, self.inflight_sn):
            for k in [k for k in d if k <= sn]:
                del d[k]
        self.deferred = [(src, m) for src, m in self.deferred if m.sn > sn]
        self.env.trace("checkpoint", node=self.id, sn=sn, digest=cert.state_digest.hex(), stable=True)
        self._apply_watermarks()
        self._maybe_reactivate()
        self._dirty = True
        return True

    def _on_delivered_checkpoint_hook(self, sn: int) -> None:
        if sn == self.stable.sn:
            self._apply_watermarks()
            self._maybe_reactivate()

    def _apply_watermarks(self) -> None:
        """Advance client watermarks to the snapshot taken at the stable checkpoint."""
        sn = self.stable.sn
        if sn <= self.wm_applied or self.last_delivered < sn:
            return
        snap = self.wm_snap.get(sn)
        if snap is None:
            return
        self.wm_applied = sn
        changed = {}
        for c in sorted(snap):
            if snap[c] > self.client_low.get(c, 0):
                self.client_low[c] = snap[c]
                changed[c] = snap[c]
        for k in [k for k in self.wm_snap if k <= sn]:
            del self.wm_snap[k]
        if not changed:
            return
        for d in [d for d, r in self.preprepared.items() if r.c in changed and r.t <= changed[r.c]]:
            del self.preprepared[d]
            self._clear_inflight(d)
            self._unqueue(d)
            self.arrival.pop(d, None)
        for b in range(self.p.num_buckets):
            stale = [d for d, e in self.buckets[b].items() if e.request.c in changed and e.request.t <= changed[e.request.c]]
            for d in stale:
                self._unqueue(d)
                self.arrival.pop(d, None)
        for c, low in changed.items():
            self.send(c, WatermarkNotice(self.id, c, low))
            self._admit_early(c)
        self._dirty = True

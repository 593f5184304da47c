"""Catch-up for nodes that fell behind or come back after a crash.

A lagging node broadcasts HELLO, collects :class:`StateReply` messages and
accepts a batch once ``f+1`` responders agree on its digest, or once a
single responder supplies a whole checkpoint interval matching a verified
stable-checkpoint certificate.  It then follows the common case passively
until it delivers through a stable checkpoint taken after the catch-up.
"""

from __future__ import annotations

import logging
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple

from .checkpointing import interval, state_digest
from .messages import Batch, EpochConfig, Hello, StableCheckpoint, StateReply
from .status import ACTIVE, RECOVERING

log = logging.getLogger(__name__)


class InsufficientConfirmation(Exception):
    pass


def detect_lag(observed: Mapping[int, int], local_epoch: int, f: int) -> bool:
    """f+1 distinct senders were seen working in a later epoch."""
    return sum(1 for e in observed.values() if e > local_epoch) >= f + 1


def adopted_epoch(reported: Iterable[int], f: int) -> Optional[int]:
    """The (f+1)-th highest reported epoch: at least one correct node reached it."""
    ranked = sorted(reported, reverse=True)
    return ranked[f] if len(ranked) > f else None


def confirm_batches(
    offers: Mapping[int, Mapping[int, Batch]],
    start: int,
    f: int,
    certs: Mapping[int, StableCheckpoint],
    period: int,
    known: Callable[[int], Optional[Batch]] = lambda _sn: None,
) -> List[Tuple[int, Batch]]:
    """Batches from ``start`` on that the offers confirm, as a gap-free run.

    ``offers`` maps responder -> sn -> batch.  ``known`` gives already
    delivered batches, needed to recompute an interval's state digest.
    """
    out: List[Tuple[int, Batch]] = []
    accepted: Dict[int, Batch] = {}

    def lookup(s: int) -> Optional[Batch]:
        return accepted.get(s) or known(s)

    sn = start
    while True:
        tally: Dict[bytes, List[int]] = {}
        payload: Dict[bytes, Batch] = {}
        for r in sorted(offers):
            b = offers[r].get(sn)
            if b is not None:
                tally.setdefault(b.digest, []).append(r)
                payload.setdefault(b.digest, b)
        hit = next((d for d in sorted(tally) if len(tally[d]) >= f + 1), None)
        if hit is not None:
            accepted[sn] = payload[hit]
            out.append((sn, payload[hit]))
            sn += 1
            continue
        ckpt_sn = -(-sn // period) * period
        cert = certs.get(ckpt_sn)
        if cert is None:
            return out
        span = interval(ckpt_sn, period)
        for r in sorted(offers):
            mine = offers[r]
            batches = [mine.get(s) if s >= sn else lookup(s) for s in span]
            if any(b is None for b in batches):
                continue
            if state_digest([b.digest for b in batches]) == cert.state_digest:
                for s in range(sn, ckpt_sn + 1):
                    accepted[s] = mine[s]
                    out.append((s, mine[s]))
                sn = ckpt_sn + 1
                break
        else:
            return out


def ingest_state(
    offers: Mapping[int, Mapping[int, Batch]],
    start: int,
    f: int,
    certs: Mapping[int, StableCheckpoint],
    period: int,
    want: int,
    known: Callable[[int], Optional[Batch]] = lambda _sn: None,
) -> List[Tuple[int, Batch]]:
    """Like :func:`confirm_batches`, but insists on reaching ``want``."""
    got = confirm_batches(offers, start, f, certs, period, known)
    last = got[-1][0] if got else start - 1
    if last < want:
        raise InsufficientConfirmation(f"confirmed through {last}, need {want}")
    return got


class StateTransferMixin:
    """Lag detection and catch-up for :class:`~mirbft.replica.Replica`."""

    def _init_state_transfer(self) -> None:
        self.epoch_seen: Dict[int, int] = {}
        self.adopt_point: Optional[int] = None
        self.st_replies: Dict[int, StateReply] = {}
        self.st_transferred = False
        self.hellos_sent = 0

    def _observe_epoch(self, src: int, e: int) -> None:
        if e <= self.epoch or src == self.id:
            return
        if e > self.epoch_seen.get(src, -1):
            self.epoch_seen[src] = e
        if detect_lag(self.epoch_seen, self.epoch, self.f):
            self._arm_lag()

    def _note_lag_checkpoint(self, sn: int) -> None:
        self._arm_lag()

    def _arm_lag(self) -> None:
        if not self._armed("lag"):
            self._arm("lag", self.p.epoch_change_timeout)

    def lagging(self) -> bool:
        if detect_lag(self.epoch_seen, self.epoch, self.f):
            return True
        return any(sn > self.last_delivered for sn in self.stable_certs)

    def _on_lag_timeout(self) -> None:
        if self.lagging():
            self._send_hello()

    def _hello(self) -> Hello:
        return Hello(self.id, self.epoch, max(self.valid_ne, default=-1), self.stable, self.last_delivered)

    def _send_hello(self) -> None:
        self.st_replies = {}
        self.hellos_sent += 1
        self.env.trace("hello", node=self.id, epoch=self.epoch, last_delivered=self.last_delivered)
        self.send_others(self._hello())

    def on_hello(self, src, hello: Hello) -> Optional[StateReply]:
        if hello.sender != src or src == self.id or not self._verify_cert(hello.checkpoint):
            return None
        configs = tuple(self.configs[e] for e in sorted(self.configs) if e >= hello.epoch and e <= self.epoch)
        newer = self.stable if self.stable.sn > hello.checkpoint.sn else None
        lo = max(hello.last_delivered + 1, 0)
        batches = tuple((sn, self.log[sn]) for sn in range(lo, self.last_delivered + 1))
        certs = tuple(
            self.stable_certs[sn] for sn in sorted(self.stable_certs) if lo <= sn <= self.last_delivered
        )
        reply = StateReply(self._hello(), self.status == ACTIVE, configs, newer, batches, certs)
        self.send(src, reply)
        return reply

    def on_state_reply(self, src, reply: StateReply) -> None:
        if reply.hello.sender != src or src == self.id:
            return
        self.st_replies[src] = reply
        for cert in (reply.checkpoint, *reply.certs):
            if cert is not None and cert.sn not in self.stable_certs and self._verify_cert(cert):
                self.stable_certs[cert.sn] = cert
        self._ingest_configs()
        offers = {r: dict(rep.batches) for r, rep in self.st_replies.items()}
        got = confirm_batches(
            offers,
            self.last_delivered + 1,
            self.f,
            self.stable_certs,
            self.p.checkpoint_period,
            lambda s: self.log[s] if 0 <= s < len(self.log) else None,
        )
        for sn, batch in got:
            self.committed.setdefault(sn, batch)
        if got:
            self.st_transferred = True
        self._try_deliver()
        usable = [sn for sn in self.stable_certs if self.stable.sn < sn <= self.last_delivered]
        if usable:
            self._adopt_stable(self.stable_certs[max(usable)])
        self._maybe_adopt_epoch()
        if self.status == RECOVERING and not self.st_transferred and self._caught_up():
            # Nothing was missed while we were away: no checkpoint to wait for.
            self.adopt_point = self.stable.sn - 1
            self._maybe_reactivate()
        self._dirty = True

    def _caught_up(self) -> bool:
        replies = list(self.st_replies.values())
        if len(replies) < self.f + 1:
            return False
        ahead = adopted_epoch((rep.hello.epoch for rep in replies), self.f)
        delivered = sorted((rep.hello.last_delivered for rep in replies), reverse=True)[self.f]
        return ahead <= self.epoch and delivered <= self.last_delivered

    def _ingest_configs(self) -> None:
        votes: Dict[int, Dict[EpochConfig, set]] = {}
        for r, rep in self.st_replies.items():
            for cfg in rep.configs:
                votes.setdefault(cfg.e, {}).setdefault(cfg, set()).add(r)
        for e in sorted(votes):
            if e in self.configs:
                continue
            for cfg, who in votes[e].items():
                if len(who) >= self.f + 1:
                    self.configs[e] = cfg
                    break

    def _maybe_adopt_epoch(self) -> None:
        target = adopted_epoch((rep.hello.epoch for rep in self.st_replies.values()), self.f)
        if target is None or target <= self.epoch or target < self.promised or target not in self.configs:
            return
        self.status = RECOVERING
        self.st_transferred = True
        self._enter_epoch(target, "transfer")
        self.adopt_point = self.last_delivered
        cfg = self.config
        if cfg.last is not None and self.last_delivered >= cfg.last:
            self._on_epoch_exhausted()
        self._maybe_reactivate()

    def _maybe_reactivate(self) -> None:
        if self.status != RECOVERING or self.adopt_point is None:
            return
        if self.stable.sn > self.adopt_point and self.last_delivered >= self.stable.sn:
            self.status = ACTIVE
            self.adopt_point = None
            self._advance_next_sn_past(self.last_delivered)
            self.env.trace("reactivate", node=self.id, e=self.epoch, sn=self.stable.sn)
            self._dirty = True

"""Per-node protocol state machine.

:class:`Replica` reacts atomically to messages and timer expiries handed to
it by an environment (the simulator).  The common case lives here; epoch
change, checkpointing and state transfer are mixed in from their modules.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Set, Tuple

from .bucketing import BucketAssignment, active_rotation_ready, bucket_of, rotated, rotation_index
from .checkpointing import CheckpointMixin
from .crypto import KeyRegistry, SigningKey
from .epoch import (
    EpochMixin,
    OutOfEpoch,
    ReliableBroadcast,
    config_assignment,
    config_well_formed,
    initial_config,
    leader_of,
)
from .messages import (
    COMMON_CASE,
    GENESIS_CHECKPOINT,
    Batch,
    Checkpoint,
    Commit,
    CommitAck,
    EpochChange,
    EpochConfig,
    Hello,
    NewEpoch,
    PrePrepare,
    PreparedCert,
    Prepare,
    RBEcho,
    RBReady,
    RBSend,
    Request,
    RequestMsg,
    StableCheckpoint,
    StateReply,
)
from .params import ProtocolParams, validate
from .status import ACTIVE, AWAIT_CONFIG, EPOCH_CHANGE, RECOVERING, node_identity
from .statetransfer import StateTransferMixin
from .svs import commit_gate, svs_active, verifiers_of

log = logging.getLogger(__name__)

ACCEPT = 0
DEFER = -1


class Env(Protocol):
    now: int

    def send(self, src, dst, msg) -> None: ...

    def set_timer(self, owner, tag, delay: int, token: int) -> None: ...

    def trace(self, kind: str, **fields) -> None: ...

    def charge(self, owner, ticks: int) -> None: ...


def request_commit_numbers(batch_sizes: Sequence[int], sn: int, k: int) -> int:
    """Global position of the k-th request of batch ``sn`` in the total order."""
    if not 0 <= k < batch_sizes[sn]:
        raise IndexError(f"batch {sn} has {batch_sizes[sn]} requests, no index {k}")
    return k + sum(batch_sizes[:sn])


@dataclass
class Instance:
    """Agreement state for one sequence number in the current epoch."""

    sn: int
    e: int
    pp: Optional[PrePrepare] = None
    leader: Optional[int] = None
    prepares: Dict[int, Prepare] = field(default_factory=dict)
    commits: Dict[int, Commit] = field(default_factory=dict)
    sent_commit: bool = False
    prepared: bool = False
    committed: bool = False


@dataclass
class PendingEntry:
    arrival: int
    request: Request
    verified: bool = False

    def order_key(self):
        return (self.arrival, self.request.c, self.request.t)


class Replica(EpochMixin, CheckpointMixin, StateTransferMixin):
    def __init__(
        self,
        node_id: int,
        params: ProtocolParams,
        env: Env,
        registry: KeyRegistry,
        key: SigningKey,
        verify_cost: int = 0,
    ):
        validate(params)
        self.id = node_id
        self.p = params
        self.n = params.n
        self.f = params.f
        self.q = params.quorum
        self.env = env
        self.registry = registry
        self.key = key
        self.verify_cost = verify_cost
        self.peers = tuple(range(params.n))

        cfg0 = initial_config(params)
        self.configs: Dict[int, EpochConfig] = {0: cfg0}
        self._assign: Dict[int, BucketAssignment] = {0: config_assignment(cfg0, params)}
        self.epoch = 0
        self.status = ACTIVE

        # common case
        self.instances: Dict[int, Instance] = {}
        self.next_sn: Optional[int] = None
        self.max_seen_sn = -1
        self.last_delivered = -1
        self.log: List[Batch] = []
        self.committed: Dict[int, Batch] = {}
        self.pcerts: Dict[int, PreparedCert] = {}
        self.batch_due = False
        self.future: Dict[int, List[Tuple[object, object]]] = {}
        self.deferred: List[Tuple[object, object]] = []
        self._dirty = False

        # request bookkeeping
        self.buckets: Dict[int, Dict[bytes, PendingEntry]] = {b: {} for b in range(params.num_buckets)}
        self.pending: Dict[bytes, int] = {}
        self.preprepared: Dict[bytes, Request] = {}
        self.inflight: Dict[bytes, int] = {}
        self.inflight_sn: Dict[int, Set[bytes]] = {}
        self.arrival: Dict[bytes, int] = {}
        self.client_low: Dict[str, int] = {}
        # requests one window ahead of our client watermark, held until it moves
        self.early: Dict[str, Dict[int, Tuple[object, Request]]] = {}
        self.contig: Dict[str, int] = {}
        self.delivered_ts: Dict[str, Set[int]] = {}
        self.last_nonempty_delivered = -1

        self.stats = {"verifications": 0, "max_instances": 0, "rejects": {}}
        self._timers: Dict[str, int] = {}
        self._timer_seq = 0
        self.last_heard: Dict[int, int] = {}

        self.rb = ReliableBroadcast(
            node_id, params, self._send_all_local, self._on_config_delivered, lambda c: config_well_formed(c, params)
        )
        self._init_checkpointing()
        self._init_epoch_change()
        self._init_state_transfer()
        self._set_leader_position()

    # --- environment plumbing ---------------------------------------------

    def send(self, dst, msg) -> None:
        self.env.send(self.id, dst, msg)

    def send_others(self, msg) -> None:
        for j in self.peers:
            if j != self.id:
                self.env.send(self.id, j, msg)

    def _send_all_local(self, msg) -> None:
        """Send to every node, handling our own copy synchronously."""
        self.send_others(msg)
        self._dispatch(self.id, msg)

    def _sign(self, msg) -> object:
        return self.key.sign(msg.signed_bytes())

    def _verify_node(self, msg, sender: int) -> bool:
        return self.registry.verify_from(msg.sig, node_identity(sender), msg.signed_bytes())

    def _verify_client(self, r: Request) -> bool:
        self.stats["verifications"] += 1
        if self.verify_cost:
            self.env.charge(self.id, self.verify_cost)
        return self.registry.verify_from(r.sig, r.c, r.signed_bytes())

    def _arm(self, tag: str, delay: int) -> None:
        self._timer_seq += 1
        self._timers[tag] = self._timer_seq
        self.env.set_timer(self.id, tag, delay, self._timer_seq)

    def _disarm(self, tag: str) -> None:
        self._timers.pop(tag, None)

    def _armed(self, tag: str) -> bool:
        return tag in self._timers

    def on_timer(self, tag: str, token: int) -> None:
        if self._timers.get(tag) != token:
            return
        del self._timers[tag]
        if tag == "batch":
            self.batch_due = True
        elif tag == "ec":
            self._on_progress_timeout()
        elif tag == "escalate":
            self._on_escalation_timeout()
        elif tag == "lag":
            self._on_lag_timeout()
        self._after_event()

    def on_start(self) -> None:
        self._after_event()

    def on_recover(self) -> None:
        """Back from a crash: state is intact, timers were lost.

        The node cannot tell how much it missed, so it stops participating
        and asks its peers before doing anything else.
        """
        self._timers.clear()
        self.batch_due = False
        self.ec_target = None
        self.status = RECOVERING
        self.adopt_point = self.last_delivered
        self.st_transferred = False
        self._send_hello()
        self._after_event()

    # --- dispatch ----------------------------------------------------------

    def handle(self, src, msg) -> None:
        if isinstance(src, int):
            self.last_heard[src] = self.env.now
        self._dispatch(src, msg)
        self._after_event()

    def _dispatch(self, src, msg) -> None:
        if isinstance(msg, RequestMsg):
            self.on_request(src, msg.request)
        elif isinstance(msg, COMMON_CASE):
            self._route_common_case(src, msg)
        elif isinstance(msg, Checkpoint):
            self.on_checkpoint(src, msg)
        elif isinstance(msg, EpochChange):
            self.on_epoch_change(src, msg)
        elif isinstance(msg, NewEpoch):
            self.on_new_epoch(src, msg)
        elif isinstance(msg, (RBSend, RBEcho, RBReady)):
            self.rb.on_message(src, msg)
        elif isinstance(msg, Hello):
            self.on_hello(src, msg)
        elif isinstance(msg, StateReply):
            self.on_state_reply(src, msg)
        else:
            log.debug("node %d: unknown message %r", self.id, type(msg).__name__)

    def _after_event(self) -> None:
        for _ in range(8):
            if not self._dirty:
                break
            self._dirty = False
            self._replay_deferred()
            self._try_deliver()
        self._try_propose()
        self._refresh_timers()
        self.stats["max_instances"] = max(self.stats["max_instances"], len(self.instances))

    def _replay_deferred(self) -> None:
        pending, self.deferred = self.deferred, []
        for src, msg in pending:
            self._route_common_case(src, msg)

    # --- views onto the current configuration -----------------------------

    @property
    def config(self) -> EpochConfig:
        return self.configs[self.epoch]

    @property
    def low(self) -> int:
        return self.stable.sn

    @property
    def high(self) -> int:
        return self.stable.sn + self.p.watermark_window

    def epoch_stable(self, e: Optional[int] = None) -> bool:
        return self.configs[self.epoch if e is None else e].last is None

    def _svs_on(self, e: int) -> bool:
        cfg = self.configs[e]
        return svs_active(cfg.last is None, len(cfg.leaders), self.n, self.p.svs_enabled)

    def _rotating(self, cfg: EpochConfig) -> bool:
        return cfg.last is None and len(cfg.leaders) == self.n

    def assignment_at(self, e: int, sn: int) -> BucketAssignment:
        cfg = self.configs[e]
        base = self._assign.get(e)
        if base is None:
            base = self._assign[e] = config_assignment(cfg, self.p)
        if self._rotating(cfg) and sn >= cfg.first:
            return rotated(base, self.n, rotation_index(sn, cfg.first, self.p.rotation_period) % self.n)
        return base

    def active_buckets(self, e: int, sn: int, leader: int) -> Tuple[int, ...]:
        if not self.p.dedup_enabled:
            return tuple(range(self.p.num_buckets))
        return self.assignment_at(e, sn).of(leader)

    def _rotation_ok(self, e: int, sn: int) -> bool:
        cfg = self.configs[e]
        if not self._rotating(cfg) or sn < cfg.first:
            return True
        return active_rotation_ready(self.last_delivered, cfg.first, self.p.rotation_period, sn)

    def _set_leader_position(self) -> None:
        cfg = self.config
        if self.id in cfg.leaders:
            self.next_sn = cfg.first + cfg.leaders.index(self.id)
        else:
            self.next_sn = None

    def _advance_next_sn_past(self, sn: int) -> None:
        """Skip leader slots that are already decided."""
        if self.next_sn is None:
            return
        step = len(self.config.leaders)
        while self.next_sn <= sn:
            self.next_sn += step

    # --- request admission -------------------------------------------------

    def on_request(self, src, r: Request) -> str:
        if src != r.c:
            return "discard:sender"
        low = self.client_low.get(r.c, 0)
        if r.t <= low:
            return "discard:stale-window"
        if r.t > low + self.p.client_window:
            if r.t > low + 2 * self.p.client_window:
                return "discard:beyond-window"
            self.early.setdefault(r.c, {}).setdefault(r.t, (src, r))
            return "early"
        d = r.digest
        if d in self.pending:
            return "discard:pending"
        if d in self.preprepared and self.p.dedup_enabled:
            return "discard:preprepared"
        if d in self.preprepared and d not in self.inflight:
            return "discard:delivered"
        b = bucket_of(r.t, r.c, self.p.num_buckets)
        verified = False
        if self._bucket_active_here(b):
            if not self._verify_client(r):
                return "discard:bad-signature"
            verified = True
        self._enqueue(r, self.env.now, verified)
        return "accept"

    def _admit_early(self, c: str) -> None:
        held = self.early.get(c)
        if not held:
            return
        low = self.client_low.get(c, 0)
        ready = sorted(t for t in held if t <= low + self.p.client_window)
        for t in ready:
            src, r = held.pop(t)
            if t > low:
                self.on_request(src, r)
        if not held:
            del self.early[c]

    def _bucket_active_here(self, b: int) -> bool:
        if self.status != ACTIVE or self.next_sn is None:
            return False
        return b in self.active_buckets(self.epoch, self.next_sn, self.id)

    def _enqueue(self, r: Request, arrival: int, verified: bool = False) -> None:
        d = r.digest
        if d in self.pending:
            return
        b = bucket_of(r.t, r.c, self.p.num_buckets)
        self.buckets[b][d] = PendingEntry(arrival, r, verified)
        self.pending[d] = b
        self.arrival.setdefault(d, arrival)

    def _unqueue(self, d: bytes) -> None:
        b = self.pending.pop(d, None)
        if b is not None:
            self.buckets[b].pop(d, None)

    def oldest_pending(self) -> Optional[Request]:
        best = None
        for b in range(self.p.num_buckets):
            for entry in self.buckets[b].values():
                if best is None or entry.order_key() < best.order_key():
                    best = entry
        return best.request if best else None

    # --- proposing ---------------------------------------------------------

    def _busy(self) -> bool:
        if self.pending:
            return True
        # an ephemeral epoch only ends once every slot is used, so leaders
        # fill theirs even when their own buckets are empty
        if self.config.last is not None and self._leads_more():
            return True
        if self.next_sn is not None and self.max_seen_sn > self.next_sn:
            return True
        return self._checkpoint_drive() or self._rotation_drive()

    def _rotation_drive(self) -> bool:
        """Fill the rest of a rotation period once any of its slots is used.

        The next period's leaders may not start before this one is delivered,
        and they cannot tell us they are waiting.  Idle nodes therefore always
        rest on a period boundary.
        """
        cfg = self.config
        if self.next_sn is None or not self._rotating(cfg) or self.next_sn < cfg.first:
            return False
        R = self.p.rotation_period
        start = cfg.first + rotation_index(self.next_sn, cfg.first, R) * R
        return self.last_delivered >= start or self.max_seen_sn >= start

    def _checkpoint_drive(self) -> bool:
        C = self.p.checkpoint_period
        if self.last_nonempty_delivered <= self.stable.sn:
            return False
        target = -(-self.last_nonempty_delivered // C) * C
        return self.next_sn is None or self.next_sn <= target or self.last_delivered < target

    def _can_propose_at(self, sn: Optional[int]) -> bool:
        if sn is None or self.status != ACTIVE:
            return False
        cfg = self.config
        if cfg.last is not None and sn > cfg.last:
            return False
        return sn <= self.high and self._rotation_ok(self.epoch, sn)

    def _leads_more(self) -> bool:
        cfg = self.config
        return (
            self.status == ACTIVE
            and self.next_sn is not None
            and (cfg.last is None or self.next_sn <= cfg.last)
        )

    def select_requests(self, sn: int) -> List[Request]:
        """Oldest pending requests from this node's active buckets at ``sn``."""
        entries = []
        for b in self.active_buckets(self.epoch, sn, self.id):
            entries.extend(self.buckets[b].values())
        chosen: List[Request] = []
        for entry in sorted(entries, key=PendingEntry.order_key):
            if len(chosen) >= self.p.batch_size_max:
                break
            if not entry.verified:
                if not self._verify_client(entry.request):
                    self._unqueue(entry.request.digest)
                    continue
                entry.verified = True
            chosen.append(entry.request)
        return chosen

    def _try_propose(self) -> None:
        while self._can_propose_at(self.next_sn):
            sn = self.next_sn
            if not self.batch_due:
                queued = sum(len(self.buckets[b]) for b in self.active_buckets(self.epoch, sn, self.id))
                if queued < self.p.batch_size_max:
                    return
            candidates = self.select_requests(sn)
            if not candidates and not self._busy():
                self.batch_due = False
                return
            self.batch_due = False
            self.propose(sn, Batch(tuple(candidates)))
            self.next_sn += len(self.config.leaders)

    def propose(self, sn: int, batch: Batch) -> None:
        pp = PrePrepare(self.epoch, sn, batch, self.id)
        pp = PrePrepare(pp.e, pp.sn, pp.batch, pp.leader, self._sign(pp))
        self.env.trace(
            "preprepare", node=self.id, e=pp.e, sn=sn, leader=self.id, digest=batch.digest.hex(), size=len(batch)
        )
        self._broadcast_preprepare(pp)
        self._install_preprepare(pp)

    def _broadcast_preprepare(self, pp: PrePrepare) -> None:
        self.send_others(pp)

    # --- common case -------------------------------------------------------

    def _route_common_case(self, src, msg) -> None:
        sender = msg.leader if isinstance(msg, PrePrepare) else msg.sender
        if sender != src or not isinstance(src, int):
            return
        self._observe_epoch(src, msg.e)
        if msg.e < self.epoch or msg.sn <= self.low:
            return
        if msg.e > self.epoch:
            self.future.setdefault(msg.e, []).append((src, msg))
            return
        if msg.sn > self.high:
            self.deferred.append((src, msg))
            return
        self.max_seen_sn = max(self.max_seen_sn, msg.sn)
        if isinstance(msg, PrePrepare):
            outcome = self.on_preprepare(msg)
            if outcome == DEFER:
                self.deferred.append((src, msg))
            elif outcome != ACCEPT:
                self.stats["rejects"][outcome] = self.stats["rejects"].get(outcome, 0) + 1
        elif isinstance(msg, Prepare):
            self.on_prepare(msg)
        else:
            self.on_commit(msg)

    def _instance(self, sn: int) -> Instance:
        inst = self.instances.get(sn)
        if inst is None:
            inst = self.instances[sn] = Instance(sn, self.epoch)
        return inst

    def check_preprepare(self, pp: PrePrepare) -> int:
        """ACCEPT, DEFER, or the number of the first failed condition."""
        # (1) right epoch, nothing else preprepared at (e, sn)
        if pp.e > self.epoch:
            return DEFER
        if pp.e < self.epoch or len(pp.batch) > self.p.batch_size_max:
            return 1
        inst = self.instances.get(pp.sn)
        if inst is not None and inst.pp is not None:
            return 1
        cfg = self.configs[pp.e]
        # (2) sender leads in this epoch
        if pp.leader not in cfg.leaders or not self._verify_node(pp, pp.leader):
            return 2
        # (3) sender leads this sequence number
        try:
            if leader_of(pp.sn, cfg) != pp.leader:
                return 3
        except OutOfEpoch:
            return 3
        # (4) inside the batch watermarks
        if pp.sn <= self.low:
            return 4
        if pp.sn > self.high or not self._rotation_ok(pp.e, pp.sn):
            return DEFER
        dedup = self.p.dedup_enabled
        # (5) none of the requests already preprepared
        if dedup:
            seen: Set[bytes] = set()
            for r in pp.batch.requests:
                d = r.digest
                if d in self.preprepared or d in seen:
                    return 5
                seen.add(d)
        # (6) timestamps inside client watermarks; without dedup a stale
        # timestamp is one more duplicate and is filtered at delivery
        wc = self.p.client_window
        for r in pp.batch.requests:
            low = self.client_low.get(r.c, 0)
            if r.t <= low and dedup:
                return 6
            if r.t > low + wc:
                return DEFER
        # (7) requests belong to the sender's active buckets
        if dedup:
            active = set(self.active_buckets(pp.e, pp.sn, pp.leader))
            nb = self.p.num_buckets
            if any(bucket_of(r.t, r.c, nb) not in active for r in pp.batch.requests):
                return 7
        # (8) client signatures
        if not self._svs_on(pp.e) or self.id in verifiers_of(pp.leader, self.n, self.f):
            for r in pp.batch.requests:
                if not self._already_verified(r) and not self._verify_client(r):
                    return 8
        return ACCEPT

    def _already_verified(self, r: Request) -> bool:
        b = self.pending.get(r.digest)
        if b is None:
            return False
        entry = self.buckets[b].get(r.digest)
        return entry is not None and entry.verified and entry.request.sig == r.sig

    def on_preprepare(self, pp: PrePrepare) -> int:
        outcome = self.check_preprepare(pp)
        if outcome == ACCEPT:
            self._install_preprepare(pp)
        return outcome

    def _install_preprepare(self, pp: PrePrepare, leader: Optional[int] = None) -> None:
        inst = self._instance(pp.sn)
        inst.pp = pp
        inst.leader = pp.leader if leader is None else leader
        mine = inst.leader == self.id
        now = self.env.now
        decided = pp.sn <= self.last_delivered
        for r in () if decided else pp.batch.requests:
            d = r.digest
            self.arrival.setdefault(d, now)
            self._set_inflight(d, pp.sn)
            if self.p.dedup_enabled:
                self.preprepared[d] = r
                self._unqueue(d)
            elif mine:
                self._unqueue(d)
        if not mine and self._participating():
            prep = Prepare(pp.e, pp.sn, pp.batch.digest, self.id)
            prep = Prepare(prep.e, prep.sn, prep.digest, prep.sender, self._sign(prep))
            inst.prepares.setdefault(self.id, prep)
            self.send_others(prep)
        self._check_prepared(inst)
        self._check_committed(inst)

    def _set_inflight(self, d: bytes, sn: int) -> None:
        old = self.inflight.get(d)
        if old is not None and old != sn:
            self.inflight_sn.get(old, set()).discard(d)
        self.inflight[d] = sn
        self.inflight_sn.setdefault(sn, set()).add(d)

    def _clear_inflight(self, d: bytes) -> None:
        sn = self.inflight.pop(d, None)
        if sn is not None:
            self.inflight_sn.get(sn, set()).discard(d)

    def _requeue(self, d: bytes) -> None:
        """Hand a preprepared-but-lost request back to its bucket queue."""
        r = self.preprepared.get(d) if self.p.dedup_enabled else None
        self._clear_inflight(d)
        if r is None:
            return
        del self.preprepared[d]
        if r.t > self.client_low.get(r.c, 0):
            self._enqueue(r, self.arrival.get(d, self.env.now))

    def _participating(self) -> bool:
        return self.status == ACTIVE

    def on_prepare(self, msg: Prepare) -> None:
        inst = self._instance(msg.sn)
        if msg.sender in inst.prepares or msg.sender == inst.leader:
            return
        if not self._verify_node(msg, msg.sender):
            return
        inst.prepares[msg.sender] = msg
        self._check_prepared(inst)

    def on_commit(self, msg: Commit) -> None:
        inst = self._instance(msg.sn)
        if msg.sender in inst.commits:
            return
        inst.commits[msg.sender] = msg
        self._check_committed(inst)

    def _check_prepared(self, inst: Instance) -> None:
        if inst.pp is None or inst.prepared:
            return
        d = inst.pp.batch.digest
        votes = {s: p for s, p in inst.prepares.items() if p.digest == d and s != inst.leader}
        stable_svs = self._svs_on(inst.e) and inst.sn >= self.configs[inst.e].first
        if not commit_gate(set(votes), inst.leader, self.n, self.f, stable_svs, self.q):
            return
        inst.prepared = True
        self.pcerts[inst.sn] = PreparedCert(inst.pp, tuple(votes[s] for s in sorted(votes)))
        if self._participating() and not inst.sent_commit:
            inst.sent_commit = True
            c = Commit(inst.e, inst.sn, d, self.id)
            inst.commits.setdefault(self.id, c)
            self.send_others(c)
        self._check_committed(inst)

    def _check_committed(self, inst: Instance) -> None:
        if inst.pp is None or inst.committed:
            return
        d = inst.pp.batch.digest
        if sum(1 for c in inst.commits.values() if c.digest == d) < self.q:
            return
        inst.committed = True
        self.env.trace("commit", node=self.id, e=inst.e, sn=inst.sn, digest=d.hex())
        if inst.sn > self.last_delivered:
            self.committed.setdefault(inst.sn, inst.pp.batch)
            self._try_deliver()

    # --- delivery ----------------------------------------------------------

    def _try_deliver(self) -> None:
        while self.last_delivered + 1 in self.committed:
            sn = self.last_delivered + 1
            self._deliver(sn, self.committed.pop(sn))

    def _deliver(self, sn: int, batch: Batch) -> None:
        self.last_delivered = sn
        self.log.append(batch)
        carried = {r.digest for r in batch.requests}
        for d in sorted(self.inflight_sn.pop(sn, set()) - carried):
            if self.inflight.get(d) == sn:
                self._requeue(d)
        skipped = []
        for k, r in enumerate(batch.requests):
            d = r.digest
            self.preprepared[d] = r
            self._clear_inflight(d)
            self._unqueue(d)
            if self.was_delivered(r):
                # Ordered twice (dedup off, or one request prepared in two epochs
                # and both certificates re-proposed): skip the second copy.
                skipped.append(k)
                continue
            self._note_delivered(r)
            self.send(r.c, CommitAck(self.id, r.c, r.t, d, self.client_low.get(r.c, 0)))
        if batch.requests:
            self.last_nonempty_delivered = sn
        self.env.trace(
            "deliver",
            node=self.id,
            sn=sn,
            e=self.epoch,
            digest=batch.digest.hex(),
            requests=[r.digest.hex() for r in batch.requests],
            skipped=skipped,
        )
        self._disarm("ec")
        self._on_delivered_epoch_hook(sn)
        if sn % self.p.checkpoint_period == 0:
            self._emit_checkpoint(sn)
        self._on_delivered_checkpoint_hook(sn)
        self._advance_next_sn_past(sn)
        self._dirty = True
        cfg = self.config
        if cfg.last is not None and sn == cfg.last:
            self._on_epoch_exhausted()

    def was_delivered(self, r: Request) -> bool:
        return r.t <= self.contig.get(r.c, 0) or r.t in self.delivered_ts.get(r.c, ())

    def _note_delivered(self, r: Request) -> None:
        c = r.c
        cur = self.contig.get(c, 0)
        if r.t <= cur:
            return
        ts = self.delivered_ts.setdefault(c, set())
        ts.add(r.t)
        while cur + 1 in ts:
            cur += 1
            ts.discard(cur)
        self.contig[c] = cur

    # --- timers -------------------------------------------------------------

    def waiting(self) -> bool:
        """Whether this node expects progress and should time out without it."""
        if self.pending or self.inflight or self.committed:
            return True
        if any(sn > self.last_delivered for sn in self.instances):
            return True
        return self.last_nonempty_delivered > self.stable.sn

    def _refresh_timers(self) -> None:
        if self._leads_more() and self._busy():
            if not self._armed("batch") and not self.batch_due:
                self._arm("batch", self.p.batch_timeout)
        else:
            self._disarm("batch")
            self.batch_due = False
        if self.status != EPOCH_CHANGE and self.waiting():
            if not self._armed("ec"):
                self._arm("ec", self.ec_timeout_cur)
        else:
            self._disarm("ec")

    # --- introspection -------------------------------------------------------

    def retained_instances(self) -> int:
        return len(self.instances)

    def snapshot(self) -> dict:
        return {
            "id": self.id,
            "epoch": self.epoch,
            "status": self.status,
            "last_delivered": self.last_delivered,
            "stable": self.stable.sn,
            "pending": len(self.pending),
            "instances": len(self.instances),
        }

"""Epoch lifecycle: leader mapping, leader-set policy, epoch change, config broadcast."""

from __future__ import annotations

import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .bucketing import BucketAssignment, assign_buckets, bucket_of, initial_assignment
from .crypto import digest_many
from .messages import (
    EMPTY_BATCH,
    Batch,
    EpochChange,
    EpochConfig,
    NewEpoch,
    PrePrepare,
    PreparedCert,
    RBEcho,
    RBReady,
    RBSend,
    Request,
    StableCheckpoint,
)
from .params import ProtocolParams
from .status import ACTIVE, AWAIT_CONFIG, EPOCH_CHANGE, RECOVERING

log = logging.getLogger(__name__)


class OutOfEpoch(ValueError):
    pass


class InsufficientEpochChanges(ValueError):
    pass


class InvalidNewEpoch(ValueError):
    pass


def primary_of(e: int, n: int) -> int:
    return e % n


def order_leaders(primary: int, members: Iterable[int]) -> Tuple[int, ...]:
    """Primary first, then the others in ascending id order."""
    rest = sorted(set(members) - {primary})
    return (primary, *rest)


def leader_of(sn: int, config: EpochConfig) -> int:
    if not config.contains(sn):
        raise OutOfEpoch(f"sn {sn} outside epoch {config.e} [{config.first}, {config.last}]")
    return config.leaders[(sn - config.first) % len(config.leaders)]


def preferred_run(start: int, num_leaders: int, num_buckets: int) -> Tuple[int, ...]:
    count = -(-num_buckets // num_leaders)
    return tuple((start + i) % num_buckets for i in range(count))


def default_bucket_start(primary: int, params: ProtocolParams) -> int:
    return (primary * params.buckets_per_leader) % params.num_buckets


def cap_leaders(primary: int, members: Iterable[int], params: ProtocolParams) -> Tuple[int, ...]:
    """Trim to the stable leader count, keeping the primary and its closest successors."""
    members = set(members) | {primary}
    cap = params.stable_leader_count
    if len(members) > cap:
        by_distance = sorted(members - {primary}, key=lambda x: (x - primary) % params.n)
        members = {primary, *by_distance[: cap - 1]}
    return order_leaders(primary, members)


def make_config(
    e: int, first: int, leaders: Sequence[int], bucket_start: int, params: ProtocolParams
) -> EpochConfig:
    leaders = tuple(leaders)
    stable = len(leaders) == params.stable_leader_count
    last = None if stable else first + params.ephemeral_epoch_len - 1
    run = preferred_run(bucket_start, len(leaders), params.num_buckets)
    return EpochConfig(e, first, last, leaders, run)


def initial_config(params: ProtocolParams) -> EpochConfig:
    leaders = order_leaders(0, range(params.stable_leader_count))
    return make_config(0, 0, leaders, 0, params)


def config_assignment(config: EpochConfig, params: ProtocolParams) -> BucketAssignment:
    """Bucket ownership at the epoch's first sequence number."""
    if config.e == 0 and len(config.leaders) == params.n:
        return initial_assignment(params.n, params.buckets_per_leader)
    return assign_buckets(config.leaders, config.primary, config.primary_buckets[0], params.num_buckets)


def config_well_formed(config: EpochConfig, params: ProtocolParams) -> bool:
    """Checks a config can make without knowing how it was derived."""
    leaders = config.leaders
    if not leaders or len(set(leaders)) != len(leaders):
        return False
    if any(not 0 <= x < params.n for x in leaders):
        return False
    if config.primary != primary_of(config.e, params.n) or tuple(leaders) != order_leaders(config.primary, leaders):
        return False
    if len(leaders) > params.stable_leader_count or config.first < 0:
        return False
    stable = len(leaders) == params.stable_leader_count
    if stable != (config.last is None):
        return False
    if not stable and config.last - config.first + 1 != params.ephemeral_epoch_len:
        return False
    if not config.primary_buckets:
        return False
    expected = preferred_run(config.primary_buckets[0], len(leaders), params.num_buckets)
    return tuple(config.primary_buckets) == expected


def next_epoch_config_gracious(
    primary: int,
    prev_config: EpochConfig,
    oldest: Optional[Request],
    params: ProtocolParams,
) -> EpochConfig:
    if prev_config.last is None:
        raise OutOfEpoch("a stable epoch never ends graciously")
    leaders = cap_leaders(primary, prev_config.leaders, params)
    start = default_bucket_start(primary, params) if oldest is None else bucket_of(oldest.t, oldest.c, params.num_buckets)
    return make_config(prev_config.e + 1, prev_config.last + 1, leaders, start, params)


def next_leader_set_ungracious(
    primary: int,
    e: int,
    last_known_epoch: int,
    last_known_leaders: Iterable[int],
    suspects: Sequence[int] = (),
    seed: int = 0,
) -> Tuple[int, ...]:
    """Drop one node per epoch skipped since the last known config, never the primary.

    Suspects go first (most often named, then lowest id); any remaining
    removals are a seeded random choice.
    """
    members = set(last_known_leaders) | {primary}
    removals = min(e - last_known_epoch, len(members) - 1)
    counts = Counter(s for s in suspects if s in members and s != primary)
    ranked = sorted(counts, key=lambda s: (-counts[s], s))
    removed = ranked[:removals]
    rest = sorted(members - {primary} - set(removed))
    rng = random.Random(seed)
    while len(removed) < removals:
        pick = rng.choice(rest)
        rest.remove(pick)
        removed.append(pick)
    return order_leaders(primary, members - set(removed))


# --- NEW-EPOCH derivation -------------------------------------------------


@dataclass(frozen=True)
class NewEpochPlan:
    e: int
    checkpoint: StableCheckpoint
    max_s: int
    batches: Tuple[Tuple[int, Batch], ...]
    last_config: EpochConfig
    leaders: Tuple[int, ...]

    @property
    def min_s(self) -> int:
        return self.checkpoint.sn

    @property
    def first(self) -> int:
        return max(self.min_s, self.max_s) + 1


def plan_new_epoch(
    echanges: Sequence[EpochChange],
    params: ProtocolParams,
    cert_ok: Callable[[PreparedCert], bool] = lambda _c: True,
) -> NewEpochPlan:
    """What a NEW-EPOCH for ``echanges`` must contain.

    Pure: every node recomputes this from the same EPOCH-CHANGE set.
    """
    if len({ec.sender for ec in echanges}) < params.quorum:
        raise InsufficientEpochChanges(f"{len(echanges)} < {params.quorum}")
    targets = {ec.e for ec in echanges}
    if len(targets) != 1:
        raise InvalidNewEpoch(f"mixed targets {sorted(targets)}")
    e = targets.pop()
    ordered = sorted(echanges, key=lambda ec: ec.sender)
    checkpoint = max((ec.checkpoint for ec in ordered), key=lambda c: c.sn)
    best: Dict[int, PreparedCert] = {}
    for ec in ordered:
        for cert in ec.prepared:
            if cert.sn <= checkpoint.sn or not cert_ok(cert):
                continue
            cur = best.get(cert.sn)
            if cur is None or cert.e > cur.e:
                best[cert.sn] = cert
    max_s = max(best, default=checkpoint.sn)
    batches = tuple(
        (sn, best[sn].preprepare.batch if sn in best else EMPTY_BATCH) for sn in range(checkpoint.sn + 1, max_s + 1)
    )
    last_config = max((ec.last_config for ec in ordered), key=lambda c: c.e)
    suspects = [ec.suspect for ec in ordered if ec.suspect is not None]
    seed = int.from_bytes(digest_many(str(e).encode(), *(str(ec.sender).encode() for ec in ordered))[:8], "big")
    leaders = next_leader_set_ungracious(
        primary_of(e, params.n), e, last_config.e, last_config.leaders, suspects, seed
    )
    leaders = cap_leaders(leaders[0], leaders, params)
    return NewEpochPlan(e, checkpoint, max_s, batches, last_config, leaders)


def resurrect(
    inflight: Mapping[bytes, int],
    threshold: int,
    reproposed: Set[bytes],
    committed_sns: Set[int],
) -> List[bytes]:
    """Digests of preprepared requests to hand back to their bucket queues.

    A request comes back when it was preprepared above ``threshold``, its
    batch did not commit, and the NEW-EPOCH does not carry it.
    """
    return sorted(
        d for d, sn in inflight.items() if sn > threshold and sn not in committed_sns and d not in reproposed
    )


# --- reliable broadcast of configurations ---------------------------------


@dataclass
class _RBInstance:
    echoes: Dict[int, EpochConfig] = field(default_factory=dict)
    readies: Dict[int, EpochConfig] = field(default_factory=dict)
    echoed: bool = False
    readied: bool = False
    delivered: Optional[EpochConfig] = None


class ReliableBroadcast:
    """Bracha broadcast, one instance per epoch, sender fixed to the epoch primary."""

    def __init__(
        self,
        node_id: int,
        params: ProtocolParams,
        send_all: Callable[[object], None],
        deliver: Callable[[EpochConfig], None],
        well_formed: Callable[[EpochConfig], bool],
    ):
        self.id = node_id
        self.params = params
        self._send_all = send_all
        self._deliver = deliver
        self._well_formed = well_formed
        self._instances: Dict[int, _RBInstance] = {}

    def _inst(self, e: int) -> _RBInstance:
        return self._instances.setdefault(e, _RBInstance())

    def delivered(self, e: int) -> Optional[EpochConfig]:
        inst = self._instances.get(e)
        return inst.delivered if inst else None

    def broadcast(self, config: EpochConfig) -> None:
        self._send_all(RBSend(config.e, config, self.id))

    def on_message(self, src: int, msg) -> Optional[EpochConfig]:
        if msg.sender != src or msg.config.e != msg.e or not self._well_formed(msg.config):
            return None
        inst = self._inst(msg.e)
        if isinstance(msg, RBSend):
            if src == primary_of(msg.e, self.params.n) and not inst.echoed:
                inst.echoed = True
                self._send_all(RBEcho(msg.e, msg.config, self.id))
        elif isinstance(msg, RBEcho):
            inst.echoes.setdefault(src, msg.config)
        elif isinstance(msg, RBReady):
            inst.readies.setdefault(src, msg.config)
        return self._progress(msg.e, inst)

    def _progress(self, e: int, inst: _RBInstance) -> Optional[EpochConfig]:
        p = self.params
        if not inst.readied:
            for cfg, count in _tally(inst.echoes).items():
                if count >= p.quorum:
                    self._ready(e, inst, cfg)
                    break
        if not inst.readied:
            for cfg, count in _tally(inst.readies).items():
                if count >= p.weak_quorum:
                    self._ready(e, inst, cfg)
                    break
        if inst.delivered is None:
            for cfg, count in _tally(inst.readies).items():
                if count >= p.quorum:
                    inst.delivered = cfg
                    self._deliver(cfg)
                    return cfg
        return None

    def _ready(self, e: int, inst: _RBInstance, cfg: EpochConfig) -> None:
        inst.readied = True
        self._send_all(RBReady(e, cfg, self.id))

    def forget_below(self, e: int) -> None:
        for k in [k for k in self._instances if k < e]:
            del self._instances[k]


def _tally(votes: Mapping[int, EpochConfig]) -> Dict[EpochConfig, int]:
    out: Dict[EpochConfig, int] = {}
    for sender in sorted(votes):
        cfg = votes[sender]
        out[cfg] = out.get(cfg, 0) + 1
    return out


class EpochMixin:
    """Epoch transitions for :class:`~mirbft.replica.Replica`."""

    def _init_epoch_change(self) -> None:
        self.ec_timeout_cur = self.p.epoch_change_timeout
        self.promised = 0
        self.ec_target: Optional[int] = None
        self.ec_msgs: Dict[int, Dict[int, EpochChange]] = {}
        self.valid_ne: Dict[int, Tuple[NewEpoch, NewEpochPlan]] = {}
        self.config_sent: Set[int] = set()
        self.reproposals_applied: Set[int] = set()
        self.reset_timeout_on_delivery = False
        self._batch_sigs: Dict[bytes, bool] = {}

    def _rb_broadcast(self, cfg: EpochConfig) -> None:
        self.rb.broadcast(cfg)

    # --- timers ---------------------------------------------------------------

    def _on_progress_timeout(self) -> None:
        if self.status == RECOVERING:
            self._send_hello()
            return
        if self.status == EPOCH_CHANGE:
            return
        self._start_epoch_change(max(self.epoch, self.promised) + 1)

    def _on_escalation_timeout(self) -> None:
        if self.status != EPOCH_CHANGE:
            return
        self.ec_timeout_cur *= 2
        self._start_epoch_change(self.ec_target + 1)

    def _on_delivered_epoch_hook(self, sn: int) -> None:
        if self.reset_timeout_on_delivery:
            self.reset_timeout_on_delivery = False
            self.ec_timeout_cur = self.p.epoch_change_timeout

    def _maybe_arm_escalation(self) -> None:
        if self.status != EPOCH_CHANGE or self._armed("escalate"):
            return
        if len(self.ec_msgs.get(self.ec_target, {})) >= self.q:
            self._arm("escalate", self.ec_timeout_cur)

    # --- sending EPOCH-CHANGE ---------------------------------------------------

    def _suspect(self) -> Optional[int]:
        """The leader of the lowest undelivered slot we never got a proposal for.

        Falls back to the peer we heard from least recently.
        """
        cfg = self.config
        sn = self.last_delivered + 1
        if sn < cfg.first:
            return cfg.primary
        if cfg.last is not None and sn > cfg.last:
            return primary_of(self.epoch + 1, self.n)
        top = min(max(self.max_seen_sn, sn), self.high)
        if cfg.last is not None:
            top = min(top, cfg.last)
        for s in range(sn, top + 1):
            inst = self.instances.get(s)
            if inst is None or inst.pp is None:
                return leader_of(s, cfg)
        others = [j for j in self.peers if j != self.id]
        return min(others, key=lambda j: (self.last_heard.get(j, -1), j))

    def _start_epoch_change(self, target: int) -> None:
        if self.status == RECOVERING or target <= self.epoch:
            return
        if self.status == EPOCH_CHANGE and target <= self.ec_target:
            return
        self.status = EPOCH_CHANGE
        self.ec_target = target
        self.promised = max(self.promised, target)
        for tag in ("escalate", "batch", "ec"):
            self._disarm(tag)
        self.batch_due = False
        certs = tuple(self.pcerts[sn] for sn in sorted(self.pcerts) if sn > self.stable.sn)
        last_cfg = self.configs[max(e for e in self.configs if e <= self.epoch)]
        ec = EpochChange(target, self.stable, certs, self._suspect(), last_cfg, self.id)
        ec = EpochChange(ec.e, ec.checkpoint, ec.prepared, ec.suspect, ec.last_config, ec.sender, self._sign(ec))
        self.env.trace("epoch_change", node=self.id, target=target, suspect=ec.suspect, timeout=self.ec_timeout_cur)
        self._send_all_local(ec)

    # --- validation -------------------------------------------------------------

    def _batch_signatures_ok(self, batch: Batch) -> bool:
        ok = self._batch_sigs.get(batch.digest)
        if ok is None:
            ok = all(self.registry.verify_from(r.sig, r.c, r.signed_bytes()) for r in batch.requests)
            self._batch_sigs[batch.digest] = ok
        return ok

    def _cert_usable(self, cert: PreparedCert) -> bool:
        return self._batch_signatures_ok(cert.preprepare.batch)

    def _valid_pcert(self, cert: PreparedCert) -> bool:
        pp = cert.preprepare
        if not self._verify_node(pp, pp.leader):
            return False
        senders: Set[int] = set()
        for prep in cert.prepares:
            if (prep.e, prep.sn, prep.digest) != (pp.e, pp.sn, pp.batch.digest):
                return False
            if prep.sender == pp.leader or prep.sender in senders or not self._verify_node(prep, prep.sender):
                return False
            senders.add(prep.sender)
        return len(senders) >= self.q - 1

    def _valid_ec(self, ec: EpochChange) -> bool:
        if not self._verify_node(ec, ec.sender):
            return False
        if not self._verify_cert(ec.checkpoint) or not config_well_formed(ec.last_config, self.p):
            return False
        if ec.last_config.e >= ec.e:
            return False
        sns = [c.sn for c in ec.prepared]
        if len(set(sns)) != len(sns) or any(sn <= ec.checkpoint.sn for sn in sns):
            return False
        return all(c.e < ec.e and self._valid_pcert(c) for c in ec.prepared)

    # --- receiving EPOCH-CHANGE -------------------------------------------------

    def on_epoch_change(self, src, ec: EpochChange) -> None:
        if ec.sender != src or ec.e <= self.epoch:
            return
        store = self.ec_msgs.setdefault(ec.e, {})
        if ec.sender in store:
            return
        if src != self.id and not self._valid_ec(ec):
            return
        store[ec.sender] = ec
        self._maybe_join()
        self._maybe_build_new_epoch(ec.e)
        self._maybe_arm_escalation()

    def _maybe_join(self) -> None:
        """Move along once f+1 nodes ask for a later epoch."""
        if self.status == RECOVERING:
            return
        floor = max(self.epoch, self.promised)
        highest: Dict[int, int] = {}
        for target, by_sender in self.ec_msgs.items():
            if target > floor:
                for s in by_sender:
                    highest[s] = max(highest.get(s, 0), target)
        if len(highest) >= self.f + 1:
            target = sorted(highest.values(), reverse=True)[self.f]
            self._start_epoch_change(target)

    def _maybe_build_new_epoch(self, target: int) -> None:
        if primary_of(target, self.n) != self.id or target in self.config_sent:
            return
        if self.status != EPOCH_CHANGE or self.ec_target != target:
            return
        by_sender = self.ec_msgs.get(target, {})
        if len(by_sender) < self.q:
            return
        chosen = tuple(by_sender[s] for s in sorted(by_sender))
        plan = plan_new_epoch(chosen, self.p, self._cert_usable)
        reproposals = []
        for sn, batch in plan.batches:
            pp = PrePrepare(target, sn, batch, self.id)
            reproposals.append(PrePrepare(target, sn, batch, self.id, self._sign(pp)))
        ne = NewEpoch(target, chosen, tuple(reproposals), self.id)
        ne = NewEpoch(ne.e, ne.echanges, ne.reproposals, ne.sender, self._sign(ne))
        oldest = self.oldest_pending()
        start = (
            default_bucket_start(self.id, self.p)
            if oldest is None
            else bucket_of(oldest.t, oldest.c, self.p.num_buckets)
        )
        cfg = make_config(target, plan.first, plan.leaders, start, self.p)
        self.config_sent.add(target)
        self.env.trace(
            "new_epoch", node=self.id, e=target, min_s=plan.min_s, max_s=plan.max_s, leaders=list(plan.leaders)
        )
        self._send_all_local(ne)
        self._rb_broadcast(cfg)

    # --- receiving NEW-EPOCH ----------------------------------------------------

    def _validate_new_epoch(self, ne: NewEpoch) -> NewEpochPlan:
        if not self._verify_node(ne, ne.sender):
            raise InvalidNewEpoch("bad signature")
        if any(ec.e != ne.e for ec in ne.echanges):
            raise InvalidNewEpoch("mixed targets")
        senders = [ec.sender for ec in ne.echanges]
        if len(set(senders)) != len(senders):
            raise InvalidNewEpoch("repeated sender")
        for ec in ne.echanges:
            if ec.sender != self.id and (ec.e, ec.sender) not in self._ec_seen(ec) and not self._valid_ec(ec):
                raise InvalidNewEpoch(f"invalid EPOCH-CHANGE from {ec.sender}")
        plan = plan_new_epoch(ne.echanges, self.p, self._cert_usable)
        if len(ne.reproposals) != len(plan.batches):
            raise InvalidNewEpoch("re-proposal count")
        for pp, (sn, batch) in zip(ne.reproposals, plan.batches):
            if (pp.e, pp.sn, pp.leader, pp.batch.digest) != (ne.e, sn, ne.sender, batch.digest):
                raise InvalidNewEpoch(f"re-proposal mismatch at {sn}")
            if not self._verify_node(pp, pp.leader):
                raise InvalidNewEpoch(f"re-proposal signature at {sn}")
        return plan

    def _ec_seen(self, ec: EpochChange):
        """EPOCH-CHANGEs already validated on arrival, keyed (target, sender)."""
        known = self.ec_msgs.get(ec.e, {}).get(ec.sender)
        return {(ec.e, ec.sender)} if known is not None and known.sig == ec.sig else set()

    def on_new_epoch(self, src, ne: NewEpoch) -> None:
        target = ne.e
        if ne.sender != src or src != primary_of(target, self.n):
            return
        if target in self.valid_ne:
            return
        already_in = target == self.epoch and target not in self.reproposals_applied
        if target < max(self.epoch + 1, self.promised) and not already_in:
            return
        try:
            plan = self._validate_new_epoch(ne)
        except (InvalidNewEpoch, InsufficientEpochChanges) as exc:
            log.info("node %d: rejecting NEW-EPOCH %d: %s", self.id, target, exc)
            return
        self.valid_ne[target] = (ne, plan)
        if already_in:
            self._apply_reproposals(ne)
        else:
            self._try_enter_ungracious(target)

    def _on_config_delivered(self, cfg: EpochConfig) -> None:
        if cfg.e in self.configs and cfg.e <= self.epoch:
            return
        self.configs.setdefault(cfg.e, cfg)
        self.env.trace("config", node=self.id, **cfg.to_json())
        self._try_enter_gracious(cfg.e)
        self._try_enter_ungracious(cfg.e)
        self._dirty = True

    def _try_enter_ungracious(self, target: int) -> None:
        entry = self.valid_ne.get(target)
        cfg = self.configs.get(target)
        if entry is None or cfg is None:
            return
        if target < max(self.epoch + 1, self.promised):
            return
        ne, plan = entry
        if cfg.first != plan.first or tuple(cfg.leaders) != plan.leaders:
            log.info("node %d: config %d does not match its NEW-EPOCH", self.id, target)
            return
        if plan.checkpoint.sn > self.stable.sn:
            self._adopt_stable(plan.checkpoint)
        threshold = max(plan.min_s, self.last_delivered)
        carried = {r.digest for pp in ne.reproposals for r in pp.batch.requests}
        for d in resurrect(self.inflight, threshold, carried, set(self.committed)):
            self._requeue(d)
        self._enter_epoch(target, "ungracious")
        self._apply_reproposals(ne)

    def _apply_reproposals(self, ne: NewEpoch) -> None:
        if ne.e in self.reproposals_applied:
            return
        self.reproposals_applied.add(ne.e)
        for pp in ne.reproposals:
            if pp.sn <= self.low:
                continue
            inst = self._instance(pp.sn)
            if inst.pp is None:
                self._install_preprepare(pp)

    # --- gracious transitions ---------------------------------------------------

    def _on_epoch_exhausted(self) -> None:
        target = self.epoch + 1
        if self.status == ACTIVE:
            self.status = AWAIT_CONFIG
        if (
            primary_of(target, self.n) == self.id
            and target not in self.config_sent
            and self.status != EPOCH_CHANGE
        ):
            cfg = next_epoch_config_gracious(self.id, self.config, self.oldest_pending(), self.p)
            self.config_sent.add(target)
            self._rb_broadcast(cfg)
        self._try_enter_gracious(target)

    def _try_enter_gracious(self, target: int) -> None:
        cfg = self.configs.get(target)
        prev = self.configs.get(target - 1)
        if cfg is None or prev is None or prev.last is None or target != self.epoch + 1:
            return
        if cfg.first != prev.last + 1 or self.last_delivered < prev.last:
            return
        if self.promised > target or (self.status == EPOCH_CHANGE and self.ec_target != target):
            return
        self._enter_epoch(target, "gracious")

    def _enter_epoch(self, target: int, kind: str) -> None:
        self.epoch = target
        self.status = RECOVERING if self.status == RECOVERING and kind != "gracious" else ACTIVE
        self.promised = max(self.promised, target)
        self.ec_target = None
        self.instances = {}
        self.max_seen_sn = -1
        self.batch_due = False
        for tag in ("escalate", "batch", "ec"):
            self._disarm(tag)
        self._set_leader_position()
        self._advance_next_sn_past(self.last_delivered)
        self.reset_timeout_on_delivery = True
        self.deferred = [(src, m) for src, m in self.deferred if m.e >= target]
        self.deferred.extend(self.future.pop(target, []))
        for d in (self.future, self.ec_msgs, self.valid_ne):
            for k in [k for k in d if k < target]:
                del d[k]
        self.rb.forget_below(target - 1)
        cfg = self.config
        self.env.trace(
            "epoch",
            node=self.id,
            e=target,
            change=kind,
            leaders=list(cfg.leaders),
            first=cfg.first,
            last=cfg.last,
            primary=cfg.primary,
        )
        self._dirty = True

"""Seeded discrete-event network simulator and scripted adversaries.

Time is an integer tick.  Events sit in a heap ordered by
``(time, insertion counter)``, so equal-time events fire in insertion order
and a run is a pure function of the scenario and the seed.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from .crypto import Signature, digest
from .messages import Batch, PrePrepare, RBSend, Request
from .replica import Replica

log = logging.getLogger(__name__)


class Quiescent(Exception):
    """The event queue is empty."""


class TooManyByzantine(ValueError):
    pass


@dataclass(frozen=True)
class NetworkModel:
    delta: int = 5
    delta_pre: int = 100
    gst: int = 0
    reorder: float = 0.0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NetworkModel":
        return cls(**dict(d))


@dataclass(frozen=True)
class NodeBehavior:
    kind: str = "correct"  # correct | crash | censor | straggler | equivocate
    at: int = 0  # crash time, or when the misbehaviour starts
    recover_at: Optional[int] = None
    fraction: float = 1.0
    delay: int = 0

    @property
    def byzantine(self) -> bool:
        return self.kind in ("censor", "straggler", "equivocate")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NodeBehavior":
        d = dict(d)
        if "from" in d:
            d["at"] = d.pop("from")
        return cls(**d)


@dataclass(frozen=True)
class AdversaryScript:
    nodes: Mapping[int, NodeBehavior] = field(default_factory=dict)
    clients: Mapping[str, str] = field(default_factory=dict)  # correct | duplicate-to-all
    network: NetworkModel = NetworkModel()

    def faulty(self) -> List[int]:
        return sorted(i for i, b in self.nodes.items() if b.kind != "correct")

    def validate(self, n: int, f: int) -> None:
        if len(self.faulty()) > f:
            raise TooManyByzantine(f"{len(self.faulty())} faulty nodes scripted, at most f={f} allowed")
        for i, b in self.nodes.items():
            if not 0 <= i < n:
                raise ValueError(f"node {i} out of range")
            if b.kind not in ("correct", "crash", "censor", "straggler", "equivocate"):
                raise ValueError(f"unknown behaviour {b.kind!r}")
        for c, kind in self.clients.items():
            if kind not in ("correct", "duplicate-to-all"):
                raise ValueError(f"unknown client behaviour {kind!r}")


DELIVER, TIMER, ACTION = 0, 1, 2


class Simulator:
    def __init__(self, seed: int, network: NetworkModel = NetworkModel(), trace_messages: bool = False):
        self.seed = seed
        self.rng = random.Random(seed)
        self.net = network
        self.trace_messages = trace_messages
        self.now = 0
        self.events: List[dict] = []
        self.entities: Dict[Any, Any] = {}
        self.down: set = set()
        self._queue: List[Tuple[int, int, int, tuple]] = []
        self._counter = 0
        self._busy_until: Dict[Any, int] = {}
        self._current: Any = None
        self._charge = 0
        self.fired = 0
        self.messages = 0

    # --- setup -----------------------------------------------------------

    def register(self, eid, entity) -> None:
        self.entities[eid] = entity

    def start(self) -> None:
        for eid in sorted(self.entities, key=_eid_key):
            self._run_as(eid, self.entities[eid].on_start)

    def schedule(self, at: int, action: Callable[[], None]) -> None:
        self._push(at, ACTION, (action,))

    def crash(self, eid, at: int, recover_at: Optional[int] = None) -> None:
        self.schedule(at, lambda: self._crash(eid))
        if recover_at is not None:
            self.schedule(recover_at, lambda: self._recover(eid))

    def _crash(self, eid) -> None:
        self.down.add(eid)
        self.trace("crash", node=eid)

    def _recover(self, eid) -> None:
        self.down.discard(eid)
        self.trace("recover", node=eid)
        self._run_as(eid, self.entities[eid].on_recover)

    # --- environment API used by nodes and clients ------------------------

    def _push(self, at: int, kind: int, payload: tuple) -> None:
        self._counter += 1
        heapq.heappush(self._queue, (at, self._counter, kind, payload))

    def _departure(self, src) -> int:
        return self.now + (self._charge if src == self._current else 0)

    def delay(self, depart: int) -> int:
        """Arrival tick of a message leaving at ``depart``."""
        net = self.net
        if depart < net.gst:
            d = self.rng.randint(1, net.delta_pre)
            if net.reorder and self.rng.random() < net.reorder:
                d += self.rng.randint(0, net.delta_pre)
            return min(depart + d, net.gst + net.delta)
        return depart + self.rng.randint(1, net.delta)

    def send(self, src, dst, msg) -> None:
        if dst not in self.entities or src in self.down:
            return
        depart = self._departure(src)
        at = self.delay(depart)
        self.messages += 1
        if self.trace_messages:
            self.trace("send", src=src, dst=dst, msg=type(msg).__name__, at=at)
        self._push(at, DELIVER, (src, dst, msg))

    def set_timer(self, owner, tag, delay: int, token: int) -> None:
        self._push(self._departure(owner) + max(1, delay), TIMER, (owner, tag, token))

    def charge(self, owner, ticks: int) -> None:
        if owner == self._current:
            self._charge += ticks

    def trace(self, kind: str, **fields) -> None:
        ev = {"time": self.now, "kind": kind}
        ev.update(fields)
        self.events.append(ev)

    # --- running -----------------------------------------------------------

    def _run_as(self, eid, fn, *args) -> None:
        self._current, self._charge = eid, 0
        try:
            fn(*args)
        finally:
            if self._charge:
                self._busy_until[eid] = self.now + self._charge
            self._current, self._charge = None, 0

    def pending_events(self) -> int:
        return len(self._queue)

    def step(self) -> Tuple[int, int, tuple]:
        if not self._queue:
            raise Quiescent()
        at, _, kind, payload = heapq.heappop(self._queue)
        self.now = at
        self.fired += 1
        if kind == ACTION:
            payload[0]()
            return at, kind, payload
        owner = payload[1] if kind == DELIVER else payload[0]
        if owner in self.down:
            return at, kind, payload
        busy = self._busy_until.get(owner, 0)
        if busy > at:
            self._push(busy, kind, payload)
            return at, kind, payload
        entity = self.entities[owner]
        if kind == DELIVER:
            src, dst, msg = payload
            if self.trace_messages:
                self.trace("recv", src=src, dst=dst, msg=type(msg).__name__)
            self._run_as(dst, entity.handle, src, msg)
        else:
            _, tag, token = payload
            self._run_as(owner, entity.on_timer, tag, token)
        return at, kind, payload

    def run(self, horizon: Optional[int] = None, max_events: Optional[int] = None) -> bool:
        """Run until quiescence (True) or a horizon / event budget is hit (False)."""
        budget = max_events
        while self._queue:
            if horizon is not None and self._queue[0][0] > horizon:
                return False
            if budget is not None:
                if budget <= 0:
                    return False
                budget -= 1
            self.step()
        return True


def _eid_key(eid):
    return (0, eid, "") if isinstance(eid, int) else (1, 0, str(eid))


# --- adversary behaviours ---------------------------------------------------


class _Scripted(Replica):
    behavior: NodeBehavior

    def _misbehaving(self) -> bool:
        return self.env.now >= self.behavior.at


class CensoringReplica(_Scripted):
    """Leaves a deterministic fraction of its requests out of its batches."""

    def _censored(self, r: Request) -> bool:
        h = int.from_bytes(digest(b"censor" + r.digest + bytes([self.id]))[:8], "big")
        return h < self.behavior.fraction * 2**64

    def select_requests(self, sn: int):
        chosen = super().select_requests(sn)
        if self._misbehaving():
            chosen = [r for r in chosen if not self._censored(r)]
        return chosen


class StragglerReplica(_Scripted):
    """Proposes only empty batches and holds each PRE-PREPARE back for ``delay`` ticks."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._held: Dict[str, PrePrepare] = {}

    def select_requests(self, sn: int):
        if self._misbehaving():
            return []
        return super().select_requests(sn)

    def _broadcast_preprepare(self, pp: PrePrepare) -> None:
        if not self._misbehaving():
            return super()._broadcast_preprepare(pp)
        tag = f"straggle:{pp.e}:{pp.sn}"
        self._held[tag] = pp
        self.env.set_timer(self.id, tag, self.behavior.delay, -1)

    def on_timer(self, tag: str, token: int) -> None:
        if tag in self._held:
            self.send_others(self._held.pop(tag))
            self._after_event()
            return
        super().on_timer(tag, token)


class EquivocatingReplica(_Scripted):
    """Sends different batches (or configs) for the same slot to two halves of the nodes."""

    def _halves(self):
        others = [j for j in self.peers if j != self.id]
        mid = len(others) // 2
        return others[:mid], others[mid:]

    def _forged_request(self, sn: int) -> Request:
        clients = sorted({r.c for r in self.preprepared.values()} | {e.request.c for b in self.buckets.values() for e in b.values()})
        c = clients[0] if clients else "client-0"
        low = self.client_low.get(c, 0)
        active = set(self.active_buckets(self.epoch, sn, self.id))
        from .bucketing import bucket_of

        t = next(
            (t for t in range(low + 1, low + self.p.client_window + 1) if bucket_of(t, c, self.p.num_buckets) in active),
            low + 1,
        )
        return Request(b"forged:%d" % sn, t, c, Signature(self.registry.scheme, digest(b"forgery%d" % sn)))

    def _broadcast_preprepare(self, pp: PrePrepare) -> None:
        if not self._misbehaving():
            return super()._broadcast_preprepare(pp)
        a, b = self._halves()
        if pp.batch.requests and pp.sn % 2 == 0:
            alt = Batch(pp.batch.requests[:-1])
        else:
            alt = Batch(pp.batch.requests + (self._forged_request(pp.sn),))
        alt_pp = PrePrepare(pp.e, pp.sn, alt, self.id)
        alt_pp = PrePrepare(pp.e, pp.sn, alt, self.id, self._sign(alt_pp))
        for j in a:
            self.send(j, pp)
        for j in b:
            self.send(j, alt_pp)

    def _rb_broadcast(self, cfg) -> None:
        if not self._misbehaving():
            return super()._rb_broadcast(cfg)
        from dataclasses import replace

        from .epoch import preferred_run

        shifted = preferred_run((cfg.primary_buckets[0] + 1) % self.p.num_buckets, len(cfg.leaders), self.p.num_buckets)
        alt = replace(cfg, primary_buckets=shifted)
        a, b = self._halves()
        for j in a:
            self.send(j, RBSend(cfg.e, cfg, self.id))
        for j in b:
            self.send(j, RBSend(alt.e, alt, self.id))
        self.rb.on_message(self.id, RBSend(cfg.e, cfg, self.id))


BEHAVIOURS = {
    "correct": Replica,
    "crash": Replica,
    "censor": CensoringReplica,
    "straggler": StragglerReplica,
    "equivocate": EquivocatingReplica,
}


def apply_adversary(behavior: NodeBehavior, *args, **kwargs) -> Replica:
    """Build the replica implementing ``behavior``; crashes are driven by the simulator."""
    cls = BEHAVIOURS[behavior.kind]
    node = cls(*args, **kwargs)
    node.behavior = behavior
    return node

"""Client protocol: windowed timestamps, targeted submission, retries until f+1 acks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Optional, Set

from .crypto import SigningKey
from .messages import CommitAck, Request, RequestMsg, WatermarkNotice, request_bytes
from .params import ProtocolParams

log = logging.getLogger(__name__)


class WindowExhausted(Exception):
    """Every timestamp in the client window is in use."""


@dataclass
class PendingRequest:
    request: Request
    created_at: int = 0
    acks: Set[int] = field(default_factory=set)


@dataclass
class ClientState:
    c: str
    window: int = 16
    t_low: int = 0
    next_t: int = 1
    pending: Dict[int, PendingRequest] = field(default_factory=dict)
    reported_lows: Dict[int, int] = field(default_factory=dict)

    @property
    def t_high(self) -> int:
        return self.t_low + self.window


def create_request(state: ClientState, payload: bytes, key: SigningKey, now: int = 0) -> Request:
    if state.next_t > state.t_high:
        raise WindowExhausted(f"{state.c}: next t={state.next_t} > high watermark {state.t_high}")
    t = state.next_t
    sig = key.sign(request_bytes(payload, t, state.c))
    r = Request(payload, t, state.c, sig)
    state.next_t += 1
    state.pending[t] = PendingRequest(r, now)
    return r


def destinations(holder: int, phase: str, n: int, f: int) -> FrozenSet[int]:
    """f+1 consecutive nodes centred on the likely bucket holder, or everyone on retry."""
    if phase == "retry":
        return frozenset(range(n))
    start = holder - (f + 1) // 2
    return frozenset((start + k) % n for k in range(f + 1))


def on_commit_ack(state: ClientState, t: int, node: int) -> None:
    entry = state.pending.get(t)
    if entry is not None:
        entry.acks.add(node)


def is_settled(state: ClientState, t: int, f: int) -> bool:
    entry = state.pending.get(t)
    if entry is None:
        return t <= state.next_t - 1
    return len(entry.acks) >= f + 1


def on_low_report(state: ClientState, node: int, low: int, f: int) -> bool:
    """Record a node's view of our low watermark; True if ours moved."""
    if low <= state.reported_lows.get(node, 0):
        return False
    state.reported_lows[node] = low
    ranked = sorted(state.reported_lows.values(), reverse=True)
    if len(ranked) <= f:
        return False
    new_low = ranked[f]
    if new_low <= state.t_low:
        return False
    state.t_low = min(new_low, state.next_t - 1)
    return True


class Client:
    """A simulated client submitting a fixed number of requests."""

    def __init__(
        self,
        cid: str,
        key: SigningKey,
        params: ProtocolParams,
        env,
        total: int,
        payload_size: int = 8,
        holder_hint: Optional[Callable[[int, str], int]] = None,
        duplicate_to_all: bool = False,
        start_at: int = 0,
    ):
        self.id = cid
        self.key = key
        self.p = params
        self.env = env
        self.total = total
        self.payload_size = payload_size
        self.holder_hint = holder_hint
        self.duplicate_to_all = duplicate_to_all
        self.start_at = start_at
        self.state = ClientState(cid, params.client_window)
        self.created = 0
        self.settled: Set[int] = set()
        self._timers: Dict[str, int] = {}
        self._seq = 0

    @property
    def done(self) -> bool:
        return self.created >= self.total and len(self.settled) >= self.total

    def on_start(self) -> None:
        if self.start_at > 0:
            self._arm("start", self.start_at)
        else:
            self._fill()

    def on_recover(self) -> None:
        pass

    def _payload(self, t: int) -> bytes:
        body = f"{self.id}:{t}:".encode()
        return (body * (self.payload_size // max(len(body), 1) + 1))[: max(self.payload_size, len(body))]

    def _fill(self) -> None:
        while self.created < self.total:
            try:
                r = create_request(self.state, self._payload(self.state.next_t), self.key, self.env.now)
            except WindowExhausted:
                return
            self.created += 1
            self.env.trace("bcast", client=self.id, t=r.t, digest=r.digest.hex(), correct=not self.duplicate_to_all)
            phase = "retry" if self.duplicate_to_all else "initial"
            self._submit(r, phase)
            self._arm(f"retry:{r.t}", self.p.client_retry_timeout)

    def _submit(self, r: Request, phase: str) -> None:
        holder = self.holder_hint(r.t, r.c) if self.holder_hint else 0
        for dst in sorted(destinations(holder, phase, self.p.n, self.p.f)):
            self.env.send(self.id, dst, RequestMsg(r))

    def _arm(self, tag: str, delay: int) -> None:
        self._seq += 1
        self._timers[tag] = self._seq
        self.env.set_timer(self.id, tag, delay, self._seq)

    def on_timer(self, tag: str, token: int) -> None:
        if self._timers.get(tag) != token:
            return
        del self._timers[tag]
        if tag == "start":
            self._fill()
            return
        t = int(tag.split(":")[1])
        entry = self.state.pending.get(t)
        if entry is None or t in self.settled:
            return
        self._submit(entry.request, "retry")
        self._arm(tag, self.p.client_retry_timeout)

    def handle(self, src, msg) -> None:
        if isinstance(msg, CommitAck):
            if msg.sender != src or msg.c != self.id:
                return
            entry = self.state.pending.get(msg.t)
            if entry is not None and entry.request.digest == msg.req_digest:
                on_commit_ack(self.state, msg.t, src)
                if is_settled(self.state, msg.t, self.p.f) and msg.t not in self.settled:
                    self.settled.add(msg.t)
                    self._timers.pop(f"retry:{msg.t}", None)
            self._low_report(src, msg.client_low)
        elif isinstance(msg, WatermarkNotice):
            if msg.sender == src and msg.c == self.id:
                self._low_report(src, msg.client_low)

    def _low_report(self, node: int, low: int) -> None:
        if on_low_report(self.state, node, low, self.p.f):
            for t in [t for t in self.state.pending if t <= self.state.t_low]:
                if t in self.settled:
                    del self.state.pending[t]
            self._fill()

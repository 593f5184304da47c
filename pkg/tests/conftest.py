from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import pytest

from mirbft.bucketing import bucket_of
from mirbft.crypto import KeyRegistry
from mirbft.messages import Request, request_bytes
from mirbft.params import ProtocolParams
from mirbft.replica import Replica
from mirbft.status import node_identity

# Small windows so that checkpoints, rotation and epoch ends show up in short runs.
SMALL = dict(
    n=4,
    f=1,
    checkpoint_period=8,
    watermark_window=16,
    ephemeral_epoch_len=16,
    rotation_period=16,
    batch_size_max=16,
    batch_timeout=10,
    epoch_change_timeout=200,
)


@dataclass
class FakeEnv:
    """Records what a replica does instead of delivering it anywhere."""

    now: int = 0
    sent: List[Tuple[object, object, object]] = field(default_factory=list)
    timers: List[Tuple[object, str, int, int]] = field(default_factory=list)
    events: List[dict] = field(default_factory=list)
    charged: int = 0

    def send(self, src, dst, msg) -> None:
        self.sent.append((src, dst, msg))

    def set_timer(self, owner, tag, delay, token) -> None:
        self.timers.append((owner, tag, delay, token))

    def trace(self, kind, **fields) -> None:
        self.events.append({"time": self.now, "kind": kind, **fields})

    def charge(self, owner, ticks) -> None:
        self.charged += ticks

    def of_type(self, cls) -> List[Tuple[object, object]]:
        return [(dst, m) for _, dst, m in self.sent if isinstance(m, cls)]

    def clear(self) -> None:
        self.sent.clear()
        self.events.clear()


@dataclass
class Cluster:
    params: ProtocolParams
    registry: KeyRegistry
    keys: dict
    replicas: List[Replica]
    envs: List[FakeEnv]

    def client_key(self, c: str):
        if c not in self.keys:
            self.keys[c] = self.registry.generate(c)
        return self.keys[c]

    def request(self, c: str, t: int, payload: Optional[bytes] = None) -> Request:
        payload = payload if payload is not None else f"{c}:{t}".encode()
        sig = self.client_key(c).sign(request_bytes(payload, t, c))
        return Request(payload, t, c, sig)

    def request_in(self, c: str, buckets, skip=(), start: int = 1) -> Request:
        """A signed request from ``c`` whose bucket is in ``buckets``."""
        B = self.params.num_buckets
        for t in range(start, start + 1000):
            if t not in skip and bucket_of(t, c, B) in buckets:
                return self.request(c, t)
        raise AssertionError("no timestamp found")

    def sign_as(self, node: int, msg):
        return self.keys[node_identity(node)].sign(msg.signed_bytes())


def make_cluster(**overrides) -> Cluster:
    params = ProtocolParams(**{**SMALL, **overrides})
    registry = KeyRegistry("test", seed=7)
    keys = {node_identity(i): registry.generate(node_identity(i)) for i in range(params.n)}
    envs = [FakeEnv() for _ in range(params.n)]
    replicas = [Replica(i, params, envs[i], registry, keys[node_identity(i)]) for i in range(params.n)]
    return Cluster(params, registry, keys, replicas, envs)


@pytest.fixture
def cluster() -> Cluster:
    return make_cluster()


@pytest.fixture
def small_params() -> ProtocolParams:
    return ProtocolParams(**SMALL)


# --- acceptance report --------------------------------------------------------


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion, then return ``ok``."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        print(line)
        request.config._acceptance_lines.append(line)
        return ok

    return record

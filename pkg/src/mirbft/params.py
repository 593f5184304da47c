"""Protocol parameters and the constants derived from them."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Mapping, Optional


class ParamsError(ValueError):
    """Base class for rejected parameter sets."""


class InvalidResilience(ParamsError):
    pass


class InvalidWindow(ParamsError):
    pass


class NonPositiveParam(ParamsError):
    pass


@dataclass(frozen=True)
class ProtocolParams:
    n: int = 4
    f: int = 1
    checkpoint_period: int = 128
    watermark_window: int = 256
    buckets_per_leader: int = 2
    rotation_period: int = 256
    ephemeral_epoch_len: int = 256
    batch_size_max: int = 4000
    # Durations are in simulator ticks.
    batch_timeout: int = 20
    epoch_change_timeout: int = 400
    client_window: int = 16
    # None means "all nodes": only full leader sets are stable.
    stable_leaders: Optional[int] = None
    svs_enabled: bool = True
    dedup_enabled: bool = True

    @property
    def quorum(self) -> int:
        # Equals 2f+1 when n = 3f+1; stays intersection-safe for larger n.
        return quorum_size(self.n, self.f)

    @property
    def weak_quorum(self) -> int:
        return self.f + 1

    @property
    def num_buckets(self) -> int:
        return self.buckets_per_leader * self.n

    @property
    def stable_leader_count(self) -> int:
        return self.n if self.stable_leaders is None else min(self.stable_leaders, self.n)

    @property
    def client_retry_timeout(self) -> int:
        return 4 * self.epoch_change_timeout

    def replace(self, **changes: Any) -> "ProtocolParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ProtocolParams":
        known = {fld.name for fld in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParamsError(f"unknown parameters: {sorted(unknown)}")
        return cls(**dict(data))


_POSITIVE = (
    "n",
    "checkpoint_period",
    "watermark_window",
    "buckets_per_leader",
    "rotation_period",
    "ephemeral_epoch_len",
    "batch_size_max",
    "batch_timeout",
    "epoch_change_timeout",
    "client_window",
)


def validate(params: ProtocolParams) -> None:
    """Raise the first violated invariant of ``params``; return None if valid."""
    if params.f < 0:
        raise NonPositiveParam("f must be non-negative")
    for name in _POSITIVE:
        if getattr(params, name) <= 0:
            raise NonPositiveParam(f"{name} must be positive, got {getattr(params, name)}")
    if params.stable_leaders is not None and params.stable_leaders <= 0:
        raise NonPositiveParam("stable_leaders must be positive")
    if params.n < 3 * params.f + 1:
        raise InvalidResilience(f"n={params.n} < 3f+1={3 * params.f + 1}")
    if params.watermark_window % params.checkpoint_period:
        raise InvalidWindow(
            f"watermark window {params.watermark_window} is not a multiple of "
            f"checkpoint period {params.checkpoint_period}"
        )
    assert params.quorum <= params.n
    assert 2 * params.quorum - params.n >= params.f + 1
    assert params.num_buckets >= params.n


def quorum_size(n: int, f: int) -> int:
    """Smallest q with 2q - n >= f + 1."""
    return (n + f + 2) // 2

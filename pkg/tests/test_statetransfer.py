import pytest

from mirbft.checkpointing import state_digest
from mirbft.messages import Batch, Request, StableCheckpoint
from mirbft.statetransfer import (
    InsufficientConfirmation,
    adopted_epoch,
    confirm_batches,
    detect_lag,
    ingest_state,
)


def _b(k: int) -> Batch:
    return Batch((Request(b"p%d" % k, k + 1, "c"),))


GOOD = {s: _b(s) for s in range(0, 9)}


def test_detect_lag():
    assert detect_lag({2: 5, 3: 5}, 4, f=1)
    assert not detect_lag({2: 9}, 4, f=1)
    assert not detect_lag({2: 4, 3: 3}, 4, f=1)


def test_adopted_epoch():
    assert adopted_epoch([7, 9, 3], f=1) == 7
    assert adopted_epoch([7], f=1) is None


def test_confirmed_by_f_plus_one():
    offers = {0: {0: GOOD[0], 1: GOOD[1]}, 2: {0: GOOD[0], 1: _b(99)}}
    got = confirm_batches(offers, 0, 1, {}, 8)
    assert got == [(0, GOOD[0])]


def test_single_offer_is_held():
    assert confirm_batches({0: dict(GOOD)}, 0, 1, {}, 8) == []


def test_single_offer_matching_certificate():
    cert = StableCheckpoint(8, state_digest([GOOD[s].digest for s in range(1, 9)]), ())
    got = confirm_batches({3: dict(GOOD)}, 1, 1, {8: cert}, 8, known=lambda s: GOOD.get(s) if s < 1 else None)
    assert [sn for sn, _ in got] == list(range(1, 9))
    tampered = dict(GOOD)
    tampered[4] = _b(44)
    assert confirm_batches({3: tampered}, 1, 1, {8: cert}, 8) == []


def test_certificate_span_uses_known_prefix():
    cert = StableCheckpoint(8, state_digest([GOOD[s].digest for s in range(1, 9)]), ())
    offers = {3: {s: GOOD[s] for s in range(5, 9)}}
    got = confirm_batches(offers, 5, 1, {8: cert}, 8, known=lambda s: GOOD[s] if s < 5 else None)
    assert [sn for sn, _ in got] == [5, 6, 7, 8]


def test_ingest_requires_target():
    offers = {0: dict(GOOD), 1: {0: GOOD[0]}}
    assert ingest_state(offers, 0, 1, {}, 8, want=0) == [(0, GOOD[0])]
    with pytest.raises(InsufficientConfirmation):
        ingest_state(offers, 0, 1, {}, 8, want=3)

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mirbft.client import (
    Client,
    ClientState,
    WindowExhausted,
    create_request,
    destinations,
    is_settled,
    on_commit_ack,
    on_low_report,
)
from mirbft.crypto import KeyRegistry
from mirbft.messages import CommitAck, RequestMsg, WatermarkNotice
from mirbft.params import ProtocolParams

from conftest import FakeEnv


@pytest.fixture
def key():
    return KeyRegistry("test").generate("client-0")


def test_window_slides_after_low_advances(key):
    s = ClientState("client-0", window=16)
    ts = [create_request(s, b"x", key).t for _ in range(16)]
    assert ts == list(range(1, 17))
    with pytest.raises(WindowExhausted):
        create_request(s, b"x", key)
    assert not on_low_report(s, 0, 16, f=1)  # one report is not enough
    assert on_low_report(s, 2, 16, f=1)
    assert s.t_low == 16
    assert create_request(s, b"x", key).t == 17


def test_low_report_uses_f_plus_first_highest():
    s = ClientState("c", window=4, next_t=20)
    on_low_report(s, 0, 12, f=1)
    on_low_report(s, 1, 3, f=1)
    assert s.t_low == 3
    on_low_report(s, 2, 9, f=1)
    assert s.t_low == 9
    assert not on_low_report(s, 1, 2, f=1)  # regressions are ignored


def test_requests_are_signed(key):
    reg = key._registry
    r = create_request(ClientState("client-0"), b"pay", key)
    assert reg.verify_from(r.sig, "client-0", r.signed_bytes())


def test_destinations():
    assert destinations(2, "initial", 4, 1) == {1, 2}
    assert destinations(0, "initial", 4, 1) == {3, 0}
    assert destinations(2, "retry", 4, 1) == {0, 1, 2, 3}
    assert destinations(3, "initial", 4, 0) == {3}
    assert destinations(5, "initial", 7, 2) == {4, 5, 6}


def test_settles_after_f_plus_one_acks(key):
    s = ClientState("client-0")
    r = create_request(s, b"x", key)
    on_commit_ack(s, r.t, 0)
    on_commit_ack(s, r.t, 0)
    assert not is_settled(s, r.t, f=1)
    on_commit_ack(s, r.t, 3)
    assert is_settled(s, r.t, f=1)


def _client(total=3, duplicate_to_all=False):
    p = ProtocolParams()
    reg = KeyRegistry("test")
    env = FakeEnv()
    cl = Client("client-0", reg.generate("client-0"), p, env, total, holder_hint=lambda t, c: 2, duplicate_to_all=duplicate_to_all)
    return cl, env, p


def test_client_sends_to_f_plus_one_then_retries_to_all():
    cl, env, p = _client(total=1)
    cl.on_start()
    assert sorted(d for d, _ in env.of_type(RequestMsg)) == [1, 2]
    (_, tag, delay, token), = [t for t in env.timers if t[1].startswith("retry")]
    assert delay == p.client_retry_timeout
    env.clear()
    cl.on_timer(tag, token)
    assert sorted(d for d, _ in env.of_type(RequestMsg)) == [0, 1, 2, 3]


def test_duplicate_to_all_client():
    cl, env, _ = _client(total=2, duplicate_to_all=True)
    cl.on_start()
    assert len(env.of_type(RequestMsg)) == 8
    assert all(ev["correct"] is False for ev in env.events if ev["kind"] == "bcast")


def test_acks_settle_and_cancel_retry():
    cl, env, _ = _client(total=1)
    cl.on_start()
    r = env.of_type(RequestMsg)[0][1].request
    (_, tag, _, token), = [t for t in env.timers if t[1].startswith("retry")]
    cl.handle(1, CommitAck(1, "client-0", r.t, r.digest, 0))
    cl.handle(2, CommitAck(3, "client-0", r.t, r.digest, 0))  # forged sender, ignored
    assert not cl.done
    cl.handle(3, CommitAck(3, "client-0", r.t, r.digest, 0))
    assert cl.done
    env.clear()
    cl.on_timer(tag, token)
    assert env.sent == []


def test_watermark_notice_refills_window():
    cl, env, p = _client(total=40)
    cl.on_start()
    assert cl.created == p.client_window
    for node in (0, 1):
        cl.handle(node, WatermarkNotice(node, "client-0", 5))
    assert cl.created == p.client_window + 5


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 3), st.integers(0, 40)), max_size=80))
def test_timestamps_never_repeat(ops):
    key = KeyRegistry("test").generate("c")
    s = ClientState("c", window=8)
    seen = set()
    for create, node, low in ops:
        if create:
            try:
                r = create_request(s, b"p", key)
            except WindowExhausted:
                continue
            assert r.t not in seen
            assert s.t_low < r.t <= s.t_high
            seen.add(r.t)
        else:
            on_low_report(s, node, low, f=1)
            assert s.t_low <= s.next_t - 1

import pytest

from mirbft.crypto import KeyRegistry
from mirbft.harness import Scenario, run_scenario
from mirbft.messages import Batch, PrePrepare
from mirbft.netsim import (
    AdversaryScript,
    NetworkModel,
    NodeBehavior,
    Quiescent,
    Simulator,
    TooManyByzantine,
    apply_adversary,
)
from mirbft.params import ProtocolParams
from mirbft.status import node_identity

from conftest import SMALL, FakeEnv


class Recorder:
    def __init__(self, log, name):
        self.log, self.name = log, name

    def on_start(self):
        pass

    def handle(self, src, msg):
        self.log.append((self.name, src, msg))

    def on_timer(self, tag, token):
        self.log.append((self.name, "timer", tag))


def test_empty_queue_is_quiescent():
    sim = Simulator(1)
    with pytest.raises(Quiescent):
        sim.step()
    assert sim.run()


def test_same_tick_fires_in_insertion_order():
    sim = Simulator(1)
    order = []
    for k in range(5):
        sim.schedule(10, lambda k=k: order.append(k))
    sim.schedule(3, lambda: order.append("early"))
    sim.run()
    assert order == ["early", 0, 1, 2, 3, 4]


def test_time_never_decreases_and_horizon_stops():
    sim = Simulator(4, NetworkModel(delta=5, delta_pre=50, gst=100, reorder=0.5))
    log = []
    sim.register("a", Recorder(log, "a"))
    sim.register("b", Recorder(log, "b"))
    for k in range(50):
        sim.schedule(k * 7, lambda k=k: sim.send("a", "b", k))
    seen = []
    while sim.pending_events():
        at, _, _ = sim.step()
        seen.append(at)
    assert seen == sorted(seen)
    sim2 = Simulator(4)
    sim2.schedule(500, lambda: None)
    assert sim2.run(horizon=100) is False


def test_post_gst_delay_bound():
    net = NetworkModel(delta=5, delta_pre=200, gst=1000, reorder=0.9)
    sim = Simulator(9, net)
    for depart in range(0, 3000, 13):
        at = sim.delay(depart)
        assert at > depart
        if depart >= net.gst:
            assert at <= depart + net.delta
        else:
            assert at <= max(depart + 2 * net.delta_pre, 0) and at <= net.gst + net.delta


def test_same_seed_same_delays():
    net = NetworkModel(delta_pre=100, gst=500, reorder=0.3)
    a, b = Simulator(3, net), Simulator(3, net)
    assert [a.delay(t) for t in range(0, 800, 9)] == [b.delay(t) for t in range(0, 800, 9)]


def test_crashed_destination_drops():
    sim = Simulator(1)
    log = []
    sim.register(0, Recorder(log, 0))
    sim.register(1, Recorder(log, 1))
    sim.crash(1, at=0)
    sim.schedule(1, lambda: sim.send(0, 1, "hi"))
    sim.schedule(1, lambda: sim.send(1, 0, "from-crashed"))
    sim.run()
    assert log == []
    assert 1 in sim.down


def test_too_many_byzantine():
    script = AdversaryScript({1: NodeBehavior("censor"), 2: NodeBehavior("crash", at=5)})
    with pytest.raises(TooManyByzantine):
        script.validate(4, 1)
    AdversaryScript({1: NodeBehavior("censor")}).validate(4, 1)
    with pytest.raises(ValueError):
        AdversaryScript({1: NodeBehavior("teleport")}).validate(4, 1)


def _scripted(kind, **kw):
    p = ProtocolParams(**SMALL)
    reg = KeyRegistry("test")
    keys = {i: reg.generate(node_identity(i)) for i in range(4)}
    env = FakeEnv(now=10)
    node = apply_adversary(NodeBehavior(kind, **kw), 0, p, env, reg, keys[0])
    return node, env, reg


def _fill_own_buckets(node, reg, count=6):
    from mirbft.bucketing import bucket_of
    from mirbft.messages import Request, request_bytes

    key = reg.generate("client-0")
    own = set(node.active_buckets(0, 0, 0))
    for t in range(1, 17):
        if bucket_of(t, "client-0", 8) in own and len(node.pending) < count:
            payload = b"x%d" % t
            node.on_request("client-0", Request(payload, t, "client-0", key.sign(request_bytes(payload, t, "client-0"))))
    return len(node.pending)


def test_full_censor_drops_everything():
    node, _, reg = _scripted("censor", fraction=1.0)
    assert _fill_own_buckets(node, reg) > 0
    assert node.select_requests(0) == []


def test_partial_censor_is_deterministic():
    node, _, reg = _scripted("censor", fraction=0.5)
    _fill_own_buckets(node, reg)
    assert node.select_requests(0) == node.select_requests(0)


def test_straggler_holds_back_empty_batches():
    node, env, reg = _scripted("straggler", delay=300)
    _fill_own_buckets(node, reg)
    assert node.select_requests(0) == []
    node.propose(0, Batch(()))
    assert not env.of_type(PrePrepare)
    (owner, tag, delay, token), = [t for t in env.timers if t[1].startswith("straggle")]
    assert delay == 300
    node.on_timer(tag, token)
    assert len(env.of_type(PrePrepare)) == 3


def test_equivocator_splits_peers():
    node, env, reg = _scripted("equivocate")
    node.propose(0, Batch(()))
    pps = {dst: m for dst, m in env.of_type(PrePrepare)}
    assert sorted(pps) == [1, 2, 3]
    assert len({m.batch.digest for m in pps.values()}) == 2


def test_messages_arrive_within_delta_after_gst():
    p = ProtocolParams(**SMALL)
    net = NetworkModel(delta=5, delta_pre=80, gst=300, reorder=0.5)
    res = run_scenario(Scenario(params=p, clients=2, requests_per_client=10, network=net, seed=2), trace_messages=True)
    sends = [ev for ev in res.trace if ev["kind"] == "send"]
    assert sends
    for ev in sends:
        if ev["time"] >= net.gst:
            assert ev["at"] - ev["time"] <= net.delta
        else:
            assert ev["at"] <= net.gst + net.delta

import pytest

from mirbft.bucketing import bucket_of
from mirbft.crypto import Signature
from mirbft.messages import (
    Batch,
    Commit,
    CommitAck,
    PrePrepare,
    Prepare,
    Request,
    RequestMsg,
    StableCheckpoint,
)
from mirbft.replica import ACCEPT, DEFER, request_commit_numbers

from conftest import make_cluster

OWN_0 = (0, 1)  # node 0's buckets at epoch 0, before the first rotation


def pump(cl, limit=100_000):
    """Deliver node-to-node messages synchronously until none are left; return client-bound ones."""
    to_clients = []
    for _ in range(limit):
        batch = [(src, dst, m) for env in cl.envs for (src, dst, m) in env.sent]
        if not batch:
            return to_clients
        for env in cl.envs:
            env.sent.clear()
        for src, dst, msg in batch:
            if isinstance(dst, int):
                cl.replicas[dst].handle(src, msg)
            else:
                to_clients.append((src, dst, msg))
    raise AssertionError("message storm")


def fire(cl, node, tag):
    r = cl.replicas[node]
    r.on_timer(tag, r._timers[tag])


def signed_pp(cl, e, sn, requests, leader):
    pp = PrePrepare(e, sn, Batch(tuple(requests)), leader)
    return PrePrepare(e, sn, pp.batch, leader, cl.sign_as(leader, pp))


def deliveries(cl, node):
    return [ev for ev in cl.envs[node].events if ev["kind"] == "deliver"]


def test_commit_number_example():
    assert request_commit_numbers([3, 0, 2], 2, 1) == 4
    assert request_commit_numbers([3, 0, 2], 0, 0) == 0
    with pytest.raises(IndexError):
        request_commit_numbers([3, 0, 2], 1, 0)


# --- admission --------------------------------------------------------------


def test_request_admission(cluster):
    node = cluster.replicas[0]
    r = cluster.request_in("client-0", OWN_0)
    assert node.on_request("client-0", r) == "accept"
    assert node.on_request("client-0", r) == "discard:pending"
    assert node.on_request("client-9", r) == "discard:sender"
    node.client_low["client-1"] = 5
    stale = cluster.request("client-1", 5)
    assert node.on_request("client-1", stale) == "discard:stale-window"


def test_bad_signature_rejected_in_own_bucket(cluster):
    node = cluster.replicas[0]
    r = cluster.request_in("client-0", OWN_0)
    forged = Request(r.payload, r.t, r.c, Signature("test", b"\x00" * 32))
    assert node.on_request("client-0", forged) == "discard:bad-signature"
    assert not node.pending


def test_early_requests_are_held_until_the_window_moves(cluster):
    node = cluster.replicas[0]
    wc = cluster.params.client_window
    ahead = cluster.request("client-0", wc + 3)
    assert node.on_request("client-0", ahead) == "early"
    assert node.on_request("client-0", cluster.request("client-0", 2 * wc + 1)) == "discard:beyond-window"
    assert ahead.digest not in node.pending
    node.client_low["client-0"] = 3
    node._admit_early("client-0")
    assert ahead.digest in node.pending
    assert "client-0" not in node.early


# --- PRE-PREPARE validation ---------------------------------------------------


def test_valid_preprepare_broadcasts_prepare(cluster):
    r = cluster.request_in("client-0", OWN_0)
    pp = signed_pp(cluster, 0, 0, [r], 0)
    node = cluster.replicas[1]
    assert node.on_preprepare(pp) == ACCEPT
    prepares = cluster.envs[1].of_type(Prepare)
    assert sorted(d for d, _ in prepares) == [0, 2, 3]
    assert prepares[0][1].digest == pp.batch.digest


def test_reject_already_preprepared(cluster):
    r = cluster.request_in("client-0", OWN_0)
    node = cluster.replicas[1]
    assert node.on_preprepare(signed_pp(cluster, 0, 0, [r], 0)) == ACCEPT
    assert node.check_preprepare(signed_pp(cluster, 0, 4, [r], 0)) == 5
    twice = cluster.request_in("client-1", OWN_0)
    assert node.check_preprepare(signed_pp(cluster, 0, 8, [twice, twice], 0)) == 5


def test_reject_foreign_bucket(cluster):
    r = cluster.request_in("client-0", (2, 3))  # node 1's buckets
    assert cluster.replicas[2].check_preprepare(signed_pp(cluster, 0, 0, [r], 0)) == 7


def test_reject_wrong_slot_and_bad_leader_signature(cluster):
    node = cluster.replicas[2]
    assert node.check_preprepare(signed_pp(cluster, 0, 1, [], 0)) == 3
    unsigned = PrePrepare(0, 0, Batch(()), 0)
    assert node.check_preprepare(unsigned) == 2
    assert node.on_preprepare(signed_pp(cluster, 0, 0, [], 0)) == ACCEPT
    assert node.check_preprepare(signed_pp(cluster, 0, 0, [], 0)) == 1  # slot already taken


def test_reject_stale_timestamp_and_defer_future(cluster):
    node = cluster.replicas[1]
    node.client_low["client-0"] = 40
    stale = cluster.request_in("client-0", OWN_0, start=1)
    assert node.check_preprepare(signed_pp(cluster, 0, 0, [stale], 0)) == 6
    far = cluster.request_in("client-0", OWN_0, start=40 + cluster.params.client_window + 1)
    assert node.check_preprepare(signed_pp(cluster, 0, 0, [far], 0)) == DEFER
    assert node.check_preprepare(signed_pp(cluster, 1, 1, [], 1)) == DEFER


def test_reject_below_low_watermark(cluster):
    node = cluster.replicas[1]
    node.stable = StableCheckpoint(8, b"\x00" * 32, ())
    assert node.check_preprepare(signed_pp(cluster, 0, 8, [], 0)) == 4
    assert node.check_preprepare(signed_pp(cluster, 0, 28, [], 0)) == DEFER  # above low + W


def test_only_verifiers_check_client_signatures():
    cl = make_cluster()
    r = cl.request_in("client-0", OWN_0)
    forged = Request(r.payload, r.t, r.c, Signature("test", b"\x01" * 32))
    pp = signed_pp(cl, 0, 0, [forged], 0)
    # verifiers of leader 0 are nodes 1 and 2
    assert cl.replicas[1].check_preprepare(pp) == 8
    assert cl.replicas[2].check_preprepare(pp) == 8
    assert cl.replicas[3].check_preprepare(pp) == ACCEPT
    assert cl.replicas[3].stats["verifications"] == 0

    plain = make_cluster(svs_enabled=False)
    forged2 = Request(forged.payload, forged.t, forged.c, forged.sig)
    assert plain.replicas[3].check_preprepare(signed_pp(plain, 0, 0, [forged2], 0)) == 8


def test_forged_request_never_commits():
    cl = make_cluster()
    r = cl.request_in("client-0", OWN_0)
    forged = Request(r.payload, r.t, r.c, Signature("test", b"\x01" * 32))
    pp = signed_pp(cl, 0, 0, [forged], 0)
    for j in (1, 2, 3):
        cl.replicas[j].handle(0, pp)
    pump(cl)
    assert all(not deliveries(cl, j) for j in range(4))


# --- agreement ------------------------------------------------------------------


def test_prepare_and_commit_quorums(cluster):
    node = cluster.replicas[3]
    pp = signed_pp(cluster, 0, 0, [], 0)
    node.on_preprepare(pp)
    env = cluster.envs[3]
    env.clear()

    def prep(s):
        m = Prepare(0, 0, pp.batch.digest, s)
        return Prepare(0, 0, m.digest, s, cluster.sign_as(s, m))

    node.on_prepare(prep(1))
    node.on_prepare(prep(1))
    assert not env.of_type(Commit)
    node.on_prepare(prep(2))
    assert len(env.of_type(Commit)) == 3
    node.on_commit(Commit(0, 0, pp.batch.digest, 1))
    node.on_commit(Commit(0, 0, pp.batch.digest, 1))
    assert not node.instances[0].committed
    node.on_commit(Commit(0, 0, pp.batch.digest, 2))
    assert node.instances[0].committed
    node._try_deliver()
    assert node.last_delivered == 0


def test_svs_gate_waits_for_every_verifier(cluster):
    node = cluster.replicas[3]
    pp = signed_pp(cluster, 0, 0, [], 0)
    node.on_preprepare(pp)
    cluster.envs[3].clear()
    m = Prepare(0, 0, pp.batch.digest, 1)
    node.on_prepare(Prepare(0, 0, m.digest, 1, cluster.sign_as(1, m)))
    # leader 0, self 3 and verifier 1 make 2f+1, but verifier 2 has not prepared
    assert not node.instances[0].prepared
    m = Prepare(0, 0, pp.batch.digest, 2)
    node.on_prepare(Prepare(0, 0, m.digest, 2, cluster.sign_as(2, m)))
    assert node.instances[0].prepared


def test_end_to_end_delivery_and_acks(cluster):
    reqs = [cluster.request_in("client-0", OWN_0, start=1)]
    reqs.append(cluster.request_in("client-0", OWN_0, skip={reqs[0].t}, start=1))
    for r in reqs:
        for j in (0, 1):
            cluster.replicas[j].handle("client-0", RequestMsg(r))
    fire(cluster, 0, "batch")
    out = pump(cluster)
    for j in range(4):
        ev = deliveries(cluster, j)[0]
        assert ev["sn"] == 0
        assert sorted(ev["requests"]) == sorted(r.digest.hex() for r in reqs)
    acks = [m for _, _, m in out if isinstance(m, CommitAck)]
    assert len(acks) == 8 and {a.sender for a in acks} == {0, 1, 2, 3}
    verifications = [cluster.replicas[j].stats["verifications"] for j in range(4)]
    assert verifications == [2, 2, 2, 0]


def test_full_batch_cut_without_timer(cluster):
    B = cluster.params.batch_size_max
    node = cluster.replicas[0]
    wc = cluster.params.client_window
    reqs = [
        cluster.request(f"client-{c}", t)
        for c in range(20)
        for t in range(1, wc + 1)
        if bucket_of(t, f"client-{c}", cluster.params.num_buckets) in OWN_0
    ][:B]
    for r in reqs:
        node.handle(r.c, RequestMsg(r))
    pps = cluster.envs[0].of_type(PrePrepare)
    assert len(pps) == 3  # one batch, sent to the three peers
    assert len(pps[0][1].batch) == B and not node.pending


def test_no_proposal_beyond_high_watermark(cluster):
    node = cluster.replicas[0]
    node.on_request("client-0", cluster.request_in("client-0", OWN_0))
    node.next_sn = node.high + 1
    node.batch_due = True
    node._try_propose()
    assert not cluster.envs[0].of_type(PrePrepare)


def test_delivery_skips_a_second_copy(cluster):
    node = cluster.replicas[0]
    r = cluster.request("client-0", 1)
    node._deliver(0, Batch((r,)))
    node._deliver(1, Batch((r, cluster.request("client-0", 2))))
    second = deliveries(cluster, 0)[1]
    assert second["skipped"] == [0]
    assert node.contig["client-0"] == 2


def test_recovery_enters_recovering_and_says_hello(cluster):
    from mirbft.messages import Hello
    from mirbft.status import RECOVERING

    node = cluster.replicas[2]
    node.on_recover()
    assert node.status == RECOVERING
    assert len(cluster.envs[2].of_type(Hello)) == 3

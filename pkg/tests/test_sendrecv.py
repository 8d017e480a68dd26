from __future__ import annotations

import pytest

from rdmachan.channels.core import ChannelError, NoCredit, open_fanin
from rdmachan.datapath import PayloadPool, run_stream
from rdmachan.fabric import EFA, IB_ROCE, IDLE, Fabric, WaitCQ
from rdmachan.metrics import capacity, memory_scaling, sync_run

from helpers import channel, delivered_in_order, stream
from oracles import H


def test_small_message_takes_a_whole_slot():
    cfg = {"slot_size": 4096, "recv_depth": 8}
    f, s, r = channel("sendrecv.normal", config=cfg)
    reg = s.alloc_region(64)
    reg.fill(b"a" * 64)
    s.send_region(reg)
    f.run()
    m = r.receive_region()
    assert m.tobytes() == b"a" * 64
    # the remaining 4032 bytes of that buffer are unusable until it is freed
    assert capacity("sendrecv.normal", IB_ROCE, 8, config=cfg) == capacity("sendrecv.normal", IB_ROCE, 4096, config=cfg)


def test_depth_exhaustion_is_no_credit_not_a_fabric_error():
    f, s, r = channel("sendrecv.normal", config={"recv_depth": 4})
    for _ in range(4):
        s.send_region(s.alloc_region(16))
    f.run()
    assert not s.has_credit()
    with pytest.raises(NoCredit):
        s.send_region(s.alloc_region(16))
    assert all(ev.ok for ev in s.cq.poll(100))


def test_free_and_repost_return_credit_after_ack_hop():
    f, s, r = channel("sendrecv.normal", config={"recv_depth": 1})
    s.send_region(s.alloc_region(16))
    f.run()
    assert not s.has_credit()
    t = f.now
    r.free_receive_region(r.receive_region())
    f.run()
    assert s.has_credit()
    assert f.now - t == H


def test_repost_beyond_depth_rejected():
    f, s, r = channel("sendrecv.normal", config={"recv_depth": 2})
    with pytest.raises(ChannelError):
        r.repost_receives(1)


def test_shared_pool_serves_two_senders():
    f = Fabric(IB_ROCE, 0, hrt_cost=H)
    eps = [f.endpoint("s0"), f.endpoint("s1")]
    rep = f.endpoint("r")
    ss, r = open_fanin("sendrecv.shared", f, eps, rep, {"recv_depth": 4})
    assert len(ss) == 2 and r.depth == 4
    res = run_stream(f, ss, [r], [[32] * 10, [48] * 10], PayloadPool(1))
    per = res.per_source()
    assert per[0] == res.sent[0] and per[1] == res.sent[1]
    assert rep.counters["registered_bytes.channel"] == 4 * r.slot


def test_bufferless_notifications():
    f, s, r = channel("sendrecv.bufferless", config={"recv_depth": 16})
    got = []

    def receiver():
        while len(got) < 1000:
            v = r.receive_imm()
            if v is None:
                yield WaitCQ(r.wait_queue)
                continue
            got.append(v)

    def sender():
        for i in range(1000):
            while not s.has_credit():
                yield IDLE
            s.send_imm(7 + i)

    f.spawn(receiver(), "r", r.ep)
    f.spawn(sender(), "s", s.ep)
    f.run()
    assert got == [7 + i for i in range(1000)]
    assert r.ep.counters["registered_bytes.channel"] == 0


def test_bufferless_carries_up_to_three_bytes():
    f, s, r, res = stream("sendrecv.bufferless", count=300)
    assert s.max_message == 3 and delivered_in_order(res)


def test_bufferless_on_efa():
    f, s, r, res = stream("sendrecv.bufferless", "efa", count=50)
    assert delivered_in_order(res)


def test_bufferless_latency_one_hop():
    f, s, r = channel("sendrecv.bufferless")
    h = s.send_imm(1)
    assert not s.test_send_request(h)
    f.run()
    assert s.test_send_request(h) and f.now == H


@pytest.mark.parametrize("sel,cls", [("sendrecv.normal", "O(N)"), ("sendrecv.shared", "O(1)"),
                                     ("sendrecv.bufferless", "O(1)")])
def test_receive_memory_scaling(sel, cls):
    c, values = memory_scaling(sel, "Nto1")
    assert c.value == cls
    if cls == "O(N)":
        assert values[-1] > values[0]


def test_not_zero_copy_on_receive():
    res = sync_run("sendrecv.normal", EFA, count=8, size=128)
    assert res.copies_recv == 8 * 128
    assert res.copies_send == 0

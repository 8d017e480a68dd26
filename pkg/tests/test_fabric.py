from __future__ import annotations

import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rdmachan.fabric import (
    EFA,
    IB_ROCE,
    IDLE,
    ONE_RMA,
    Fabric,
    GlobalStall,
    Op,
    ReorderRejected,
    Sleep,
    Status,
    WaitCQ,
    WorkRequest,
    create_fabric,
)
from rdmachan.memory import Access, Location

from oracles import H, PROFILE_REQUESTS, TRACE_LINE

RW = Access.LOCAL_WRITE | Access.REMOTE_WRITE | Access.REMOTE_READ | Access.REMOTE_ATOMIC


def two(profile=IB_ROCE, seed=0, **kw):
    f = Fabric(profile, seed, hrt_cost=H, **kw)
    a, b = f.endpoint("a"), f.endpoint("b")
    qa, qb = f.connect(a, b)
    return f, a, b, qa, qb


def first_event(f, cq):
    f.run()
    evs = cq.poll(16)
    assert len(evs) == 1
    return evs[0]


@pytest.mark.parametrize("profile", [IB_ROCE, EFA, ONE_RMA])
def test_profiles_match_transport_table(profile):
    assert {op.value for op in profile.supported_requests} == PROFILE_REQUESTS[profile.name]


def test_profile_flags():
    assert IB_ROCE.multi_packet_messages and not EFA.multi_packet_messages
    assert ONE_RMA.write_emulated_as_read and not IB_ROCE.write_emulated_as_read
    assert EFA.message_order.value == "out-of-order"


def test_create_fabric_rejects_bad_clock():
    with pytest.raises(ValueError):
        create_fabric(hrt_cost=0)
    with pytest.raises(ValueError):
        create_fabric(pcie_rt=-1)


def test_write_on_efa_is_unsupported():
    f, a, b, qa, qb = two(EFA)
    src = a.register(64, Access.LOCAL_WRITE)
    dst = b.register(64, RW)
    qa.post(WorkRequest(Op.WRITE, 7, ((src, 0, 64),), (dst, 0)))
    ev = first_event(f, a.cq)
    assert ev.status is Status.UNSUPPORTED and ev.wr_id == 7
    assert a.counters["posted.WRITE"] == 1


def test_write_lands_after_one_hop_and_is_silent():
    f, a, b, qa, qb = two()
    src = a.register(64, Access.LOCAL_WRITE)
    src.cpu_write(0, b"x" * 64)
    dst = b.register(64, RW)
    qa.post(WorkRequest(Op.WRITE, 1, ((src, 0, 64),), (dst, 0)))
    ev = first_event(f, a.cq)
    assert ev.ok and ev.tick == H and ev.byte_len == 64
    assert bytes(dst.data) == b"x" * 64
    assert b.cq.poll() == []


def test_read_takes_a_round_trip():
    f, a, b, qa, qb = two()
    dst = a.register(64, Access.LOCAL_WRITE)
    src = b.register(64, Access.REMOTE_READ)
    src.cpu_write(0, b"y" * 64)
    qa.post(WorkRequest(Op.READ, 2, ((dst, 0, 64),), (src, 0)))
    ev = first_event(f, a.cq)
    assert ev.tick == 2 * H and bytes(dst.data) == b"y" * 64


def test_one_rma_write_is_two_round_trips():
    f, a, b, qa, qb = two(ONE_RMA)
    src = a.register(8, Access.LOCAL_WRITE)
    dst = b.register(8, RW)
    qa.post(WorkRequest(Op.WRITE, 3, ((src, 0, 8),), (dst, 0)))
    ev = first_event(f, a.cq)
    assert ev.tick == 4 * H
    assert a.counters["read_trips"] == 2


@pytest.mark.parametrize("p", [0, 3, 7])
def test_pcie_cost_on_host_memory_only(p):
    ticks = {}
    for loc in (Location.HOST, Location.DEVICE):
        f, a, b, qa, qb = two(pcie_rt=p)
        res = a.register(8, Access.LOCAL_WRITE)
        ctr = b.register(8, Access.REMOTE_ATOMIC, loc)
        qa.post(WorkRequest(Op.FETCH_ADD, 0, ((res, 0, 8),), (ctr, 0), atomic_operand=1))
        ticks[loc] = first_event(f, a.cq).tick
    assert ticks[Location.DEVICE] == 2 * H
    assert ticks[Location.HOST] - ticks[Location.DEVICE] == p


def test_unsignaled_write_has_no_completion():
    f, a, b, qa, qb = two()
    src = a.register(8, Access.LOCAL_WRITE)
    dst = b.register(8, RW)
    qa.post(WorkRequest(Op.WRITE, 0, ((src, 0, 8),), (dst, 0), signaled=False))
    f.run()
    assert a.cq.poll() == [] and b.cq.poll() == []


def test_write_imm_into_bufferless_recv():
    f, a, b, qa, qb = two()
    src = a.register(64, Access.LOCAL_WRITE)
    dst = b.register(64, RW)
    qb.post_recv(WorkRequest(Op.RECV, 5))
    qa.post(WorkRequest(Op.WRITE_IMM, 1, ((src, 0, 48),), (dst, 0), imm=0xABCD))
    f.run()
    (ev,) = b.cq.poll()
    assert ev.imm == 0xABCD and ev.byte_len == 48 and ev.wr_id == 5 and ev.opcode is Op.RECV_IMM


def test_send_without_receive_fails_at_sender():
    f, a, b, qa, qb = two()
    src = a.register(8, Access.LOCAL_WRITE)
    qa.post(WorkRequest(Op.SEND, 9, ((src, 0, 8),)))
    ev = first_event(f, a.cq)
    assert ev.status is Status.REMOTE_NO_RECEIVE


def test_send_into_recv_carries_payload_and_imm():
    f, a, b, qa, qb = two()
    src = a.register(16, Access.LOCAL_WRITE)
    src.cpu_write(0, b"0123456789abcdef")
    buf = b.register(32, Access.LOCAL_WRITE)
    qb.post_recv(WorkRequest(Op.RECV, 4, ((buf, 0, 32),)))
    qa.post(WorkRequest(Op.SEND, 1, ((src, 0, 16),), imm=3))
    f.run()
    (ev,) = b.cq.poll()
    assert ev.byte_len == 16 and ev.imm == 3 and ev.tick == H
    assert bytes(buf.data[:16]) == b"0123456789abcdef"


def test_work_request_shape_errors():
    f, a, b, qa, qb = two()
    src = a.register(16, Access.LOCAL_WRITE)
    dst = b.register(16, RW)
    with pytest.raises(ValueError):
        qa.post(WorkRequest(Op.WRITE, 0, ((src, 0, 8),)))  # no target
    with pytest.raises(ValueError):
        qa.post(WorkRequest(Op.SEND, 0, ((src, 0, 8),), (dst, 0)))  # SEND with target
    with pytest.raises(ValueError):
        qa.post(WorkRequest(Op.FETCH_ADD, 0, ((src, 0, 8),), (dst, 4), atomic_operand=1))  # misaligned
    with pytest.raises(ValueError):
        qa.post(WorkRequest(Op.FETCH_ADD, 0, ((src, 0, 16),), (dst, 0), atomic_operand=1))  # 16 bytes
    with pytest.raises(ValueError):
        qa.post(WorkRequest(Op.WRITE, 0, ((src, 0, 1),) * 17, (dst, 0)))  # gather list too long


REMOTE_OPS = [Op.WRITE, Op.WRITE_IMM, Op.READ, Op.FETCH_ADD, Op.CMP_SWAP]
NEEDED = {
    Op.WRITE: Access.REMOTE_WRITE,
    Op.WRITE_IMM: Access.REMOTE_WRITE,
    Op.READ: Access.REMOTE_READ,
    Op.FETCH_ADD: Access.REMOTE_ATOMIC,
    Op.CMP_SWAP: Access.REMOTE_ATOMIC,
}
FLAGS = [Access.LOCAL_WRITE, Access.REMOTE_WRITE, Access.REMOTE_READ, Access.REMOTE_ATOMIC]


@pytest.mark.parametrize("flag", FLAGS, ids=lambda x: x.name)
@pytest.mark.parametrize("op", REMOTE_OPS, ids=lambda x: x.value)
def test_access_matrix(op, flag):
    f, a, b, qa, qb = two()
    local = a.register(8, Access.LOCAL_WRITE)
    target = b.register(8, flag)
    qb.post_recv(WorkRequest(Op.RECV, 0))
    wr = WorkRequest(op, 1, ((local, 0, 8),), (target, 0))
    if op in (Op.FETCH_ADD, Op.CMP_SWAP):
        wr.atomic_operand = 1
    qa.post(wr)
    ev = first_event(f, a.cq)
    allowed = flag == NEEDED[op]
    assert (ev.status is Status.OK) == allowed
    if not allowed:
        assert ev.status is Status.ACCESS_ERROR


def test_read_into_read_only_buffer_fails():
    f, a, b, qa, qb = two()
    local = a.register(8, Access.NONE)
    target = b.register(8, Access.REMOTE_READ)
    qa.post(WorkRequest(Op.READ, 1, ((local, 0, 8),), (target, 0)))
    assert first_event(f, a.cq).status is Status.ACCESS_ERROR


def test_wait_cq_wakes_at_send_time_plus_one_hop():
    f, a, b, qa, qb = two()
    src = a.register(8, Access.LOCAL_WRITE)
    buf = b.register(8, Access.LOCAL_WRITE)
    qb.post_recv(WorkRequest(Op.RECV, 0, ((buf, 0, 8),)))
    got = []

    def receiver():
        ev = yield from f.wait_cq(b)
        got.append((f.now, ev.byte_len))

    def sender():
        yield Sleep(1)
        qa.post(WorkRequest(Op.SEND, 0, ((src, 0, 8),), signaled=False))

    f.spawn(receiver(), "r", b)
    f.spawn(sender(), "s", a)
    f.run()
    assert got == [(1 + H, 8)]
    assert b.counters["idle_polls"] == 0


def test_blocked_receivers_without_traffic_stall():
    f, a, b, qa, qb = two()

    def waiter(ep):
        yield from f.wait_cq(ep)

    f.spawn(waiter(a), "wa", a)
    f.spawn(waiter(b), "wb", b)
    with pytest.raises(GlobalStall):
        f.run()


def test_blocking_and_polling_see_the_same_events():
    def script(block):
        f, a, b, qa, qb = two()
        src = a.register(8, Access.LOCAL_WRITE)
        buf = b.register(64, Access.LOCAL_WRITE)
        for i in range(4):
            qb.post_recv(WorkRequest(Op.RECV, i, ((buf, 16 * i, 16),)))
        seen = []

        def receiver():
            while len(seen) < 4:
                evs = b.cq.poll(1)
                if evs:
                    ev = evs[0]
                    seen.append((f.now, ev.wr_id, ev.byte_len))
                    continue
                yield WaitCQ(b.cq) if block else IDLE

        def sender():
            for _ in range(4):
                qa.post(WorkRequest(Op.SEND, 0, ((src, 0, 8),), signaled=False))
                yield Sleep(3)

        f.spawn(receiver(), "r", b)
        f.spawn(sender(), "s", a)
        f.run()
        return seen, b.counters["idle_polls"]

    blocked, polls_blocked = script(True)
    polled, polls_polled = script(False)
    assert blocked == polled
    assert polls_blocked == 0 < polls_polled


def test_reorder_rejected_on_in_order_profile():
    f, *_ = two()
    with pytest.raises(ReorderRejected):
        f.inject_reorder("shuffle_messages", 2)
    f.inject_reorder("none")
    f.inject_reorder("shuffle_messages", 2, force=True)
    g, *_ = two(EFA)
    g.inject_reorder("shuffle_messages", 2)


def _write_order(policy, window, seed, n=2):
    f, a, b, qa, qb = two(EFA if policy != "none" else IB_ROCE, seed)
    f.inject_reorder(policy, window, force=True)
    f.enable_trace()
    src = a.register(8 * n, Access.LOCAL_WRITE)
    buf = b.register(8 * n, Access.LOCAL_WRITE)
    for i in range(n):
        qb.post_recv(WorkRequest(Op.RECV, i, ((buf, 8 * i, 8),)))
    for i in range(n):
        qa.post(WorkRequest(Op.SEND, 100 + i, ((src, 8 * i, 8),)))
    f.run()
    return [ev.wr_id for ev in a.cq.poll(n)], f.dump_trace()


def test_no_reorder_keeps_post_order():
    order, _ = _write_order("none", 1, 0, n=8)
    assert order == list(range(100, 108))


def test_message_shuffle_swaps_in_some_seed_and_is_reproducible():
    swapped = [s for s in range(32) if _write_order("shuffle_messages", 2, s)[0] == [101, 100]]
    assert swapped
    s = swapped[0]
    assert _write_order("shuffle_messages", 2, s) == _write_order("shuffle_messages", 2, s)


def _chunk_order(seed):
    f, a, b, qa, qb = two(seed=seed, chunk_size=64)
    f.inject_reorder("shuffle_bytes", 1, force=True)
    src = a.register(128, Access.LOCAL_WRITE)
    src.cpu_write(0, b"L" * 64 + b"H" * 64)
    dst = b.register(128, RW)
    first = []

    def watcher():
        while not first:
            lo, hi = dst.data[0] != 0, dst.data[64] != 0
            if lo or hi:
                first.append("high" if hi and not lo else "low" if lo and not hi else "both")
            else:
                yield IDLE

    f.spawn(watcher(), "w", b)
    qa.post(WorkRequest(Op.WRITE, 0, ((src, 0, 128),), (dst, 0)))
    f.run()
    assert bytes(dst.data) == b"L" * 64 + b"H" * 64
    return first[0]


def test_byte_shuffle_can_expose_high_chunk_first():
    outcomes = {_chunk_order(s) for s in range(32)}
    assert "high" in outcomes


def test_chunk_only_shuffle_keeps_messages_in_order():
    f, a, b, qa, qb = two(seed=3, chunk_size=16)
    f.inject_reorder("shuffle_bytes", 1, force=True)
    src = a.register(64, Access.LOCAL_WRITE)
    dst = b.register(64 * 8, RW)
    for i in range(8):
        qa.post(WorkRequest(Op.WRITE, i, ((src, 0, 64),), (dst, 64 * i)))
    f.run()
    assert [ev.wr_id for ev in a.cq.poll(16)] == list(range(8))


def test_same_seed_same_trace_and_counters():
    def script():
        f, a, b, qa, qb = two(EFA, seed=11)
        f.inject_reorder("shuffle_messages", 3)
        f.enable_trace()
        src = a.register(64, Access.LOCAL_WRITE)
        buf = b.register(64, Access.LOCAL_WRITE)
        for i in range(8):
            qb.post_recv(WorkRequest(Op.RECV, i, ((buf, 8 * i, 8),)))
            qa.post(WorkRequest(Op.SEND, i, ((src, 8 * i, 8),), imm=i))
        f.run()
        return f.dump_trace(), f.dump_counters()

    t1, c1 = script()
    t2, c2 = script()
    assert t1 == t2 and c1 == c2
    for line in t1.strip().splitlines():
        assert re.match(TRACE_LINE, line), line
    assert c1.splitlines()[0] == "endpoint,metric,value"


def test_counters_reset_only_between_workloads():
    f, a, b, qa, qb = two()
    src = a.register(8, Access.LOCAL_WRITE)
    dst = b.register(8, RW)
    qa.post(WorkRequest(Op.WRITE, 0, ((src, 0, 8),), (dst, 0)))
    with pytest.raises(RuntimeError):
        f.reset_counters()
    f.run()
    f.reset_counters()
    assert a.counters.posted() == 0


@given(k=st.integers(1, 6), m=st.integers(1, 5), incs=st.lists(st.integers(1, 64), min_size=1, max_size=5),
       seed=st.integers(0, 1000))
def test_fetch_add_chain_is_gap_free(k, m, incs, seed):
    f = Fabric(IB_ROCE, seed, hrt_cost=H)
    owner = f.endpoint("owner")
    ctr = owner.register(8, Access.REMOTE_ATOMIC)
    olds = []
    for i in range(k):
        ep = f.endpoint(f"e{i}")
        q, _ = f.connect(ep, owner)
        res = ep.register(8, Access.LOCAL_WRITE)

        def actor(q=q, res=res, ep=ep, i=i):
            for j in range(m):
                inc = incs[(i + j) % len(incs)]
                q.post(WorkRequest(Op.FETCH_ADD, inc, ((res, 0, 8),), (ctr, 0), atomic_operand=inc))
                yield Sleep(f._sched_rng.randrange(3))
            got = 0
            while got < m:
                for ev in ep.cq.poll(16):
                    olds.append((ev.atomic_old_value, ev.wr_id))
                    got += 1
                if got < m:
                    yield IDLE

        f.spawn(actor(), f"a{i}", ep)
    f.run()
    olds.sort()
    pos = 0
    for old, inc in olds:
        assert old == pos
        pos += inc
    assert ctr.load_u64(0) == pos


@given(ops=st.lists(st.sampled_from(["write", "read", "send", "fa", "write_u"]), min_size=1, max_size=30),
       seed=st.integers(0, 50))
def test_every_signaled_request_completes_once(ops, seed):
    f, a, b, qa, qb = two(seed=seed)
    f.inject_reorder("shuffle_messages", 3, force=True)
    loc = a.register(64, Access.LOCAL_WRITE)
    rem = b.register(64, RW)
    rbuf = b.register(64, Access.LOCAL_WRITE)
    signaled = []
    for i, op in enumerate(ops):
        if op == "send":
            qb.post_recv(WorkRequest(Op.RECV, i, ((rbuf, 0, 64),)))
            wr = WorkRequest(Op.SEND, i, ((loc, 0, 8),))
        elif op == "read":
            wr = WorkRequest(Op.READ, i, ((loc, 8, 8),), (rem, 8))
        elif op == "fa":
            wr = WorkRequest(Op.FETCH_ADD, i, ((loc, 16, 8),), (rem, 16), atomic_operand=1)
        else:
            wr = WorkRequest(Op.WRITE, i, ((loc, 24, 8),), (rem, 24), signaled=op == "write")
        if wr.signaled:
            signaled.append(i)
        qa.post(wr)
    f.run()
    assert sorted(ev.wr_id for ev in a.cq.poll(1000)) == sorted(signaled)

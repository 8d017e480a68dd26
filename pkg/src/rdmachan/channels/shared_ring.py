"""Shared ring: many senders reserve space in one ring with FETCH_ADD on a byte-counting head."""

from __future__ import annotations

import bisect
from collections import deque

from ..fabric import Op, WorkRequest
from ..memory import Access, Location, Provenance, Region, pad4, ring_view
from .core import (
    ChannelError,
    DoubleFree,
    NoCredit,
    ReadAckLink,
    Receiver,
    Sender,
    check_status,
    connect_handles,
    register_family,
)
from .ring import OffsetTail

_FA = 1 << 48
_DATA = 2 << 48


def sring_record_size(variant: str, n: int) -> int:
    p = pad4(n)
    if variant == "imm":
        return p if n else 4
    return 8 + p


class SharedRingSender(Sender):
    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.C = config.ring_capacity
        self.variant = spec.variant
        self.max_message = config.max_message or self.C // 4
        self.limit = config.recv_depth
        self.write_delay = config.write_delay
        # fetch-add results (one word per reservation in flight), then [len][0 0][done]
        self.scratch = ep.register(8 * self.limit + 16, Access.LOCAL_WRITE, owner="channel")
        self.hdr_off = 8 * self.limit
        self.scratch.store_u32(self.hdr_off + 12, 1)
        self.qp = None
        self.link = None
        self.ring = None
        self.head_mr = None
        self.reserving = {}  # handle -> (region, size, slot, t0) awaiting FETCH_ADD results
        self.blocked = []  # (offset, handle, region, size) waiting for tail space, lowest offset first
        self.reservations = []  # (offset, size) as returned by FETCH_ADD, for oracles
        self.reserve_latency = []
        self._fa_slot = 0

    @property
    def cached_tail(self) -> int:
        return self.link.latest()

    def has_credit(self, length: int = 1) -> bool:
        self.progress()
        return len(self.reserving) + len(self.blocked) < self.limit

    def send_region(self, r: Region) -> int:
        n = r.length
        self._check_size(n)
        if n == 0 and self.variant != "imm":
            raise ChannelError("a length bell cannot signal an empty message")
        if not self.has_credit(n):
            raise NoCredit(f"{self.spec.selector}: {self.limit} reservations in flight")
        size = sring_record_size(self.variant, n)
        h = self._new_handle()
        slot = self._fa_slot
        self._fa_slot = (slot + 1) % self.limit
        self.reserving[h] = (r, size, slot, self.fabric.now)
        self.qp.post(
            WorkRequest(Op.FETCH_ADD, _FA + h, ((self.scratch, 8 * slot, 8),), (self.head_mr, 0), atomic_operand=size)
        )
        self.sent += 1
        return h

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            if self.link.on_completion(ev):
                self._unblock()
                continue
            check_status(ev)
            if ev.opcode is Op.FETCH_ADD:
                h = ev.wr_id - _FA
                r, size, slot, t0 = self.reserving.pop(h)
                old = ev.atomic_old_value
                self.reservations.append((old, size))
                self.reserve_latency.append(self.fabric.now - t0)
                bisect.insort(self.blocked, (old, h, r, size), key=lambda e: e[0])
                self._unblock()
            else:
                self._done(ev.wr_id - _DATA)

    def _unblock(self) -> None:
        C = self.C
        while self.blocked:
            old, h, r, size = self.blocked[0]
            room = self.link.latest() + C - (old + size)
            if room < 0:
                self.link.refresh()
                return
            self.blocked.pop(0)
            if room < C // 2:
                # refresh early so the tail READ stays off the critical path
                self.link.refresh()
            if self.write_delay:
                self.fabric.schedule(self.write_delay, self._write, h, r, size, old)
            else:
                self._write(h, r, size, old)

    def _write(self, h, r, size, old) -> None:
        pos = old % self.C
        n = r.length
        if self.variant == "imm":
            self.qp.post(WorkRequest(Op.WRITE_IMM, _DATA + h, (r.sge(),), (self.ring, pos), pos))
            return
        p = pad4(n)
        sc, o = self.scratch, self.hdr_off
        sc.store_u32(o, n)
        gl = ((sc, o, 4), r.sge(), (sc, o + 12 - (p - n), 4 + p - n))
        self.qp.post(WorkRequest(Op.WRITE, _DATA + h, gl, (self.ring, pos)))


class SharedRingReceiver(Receiver):
    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.C = config.ring_capacity
        self.variant = spec.variant
        self.blocking = self.variant == "imm"
        self.region = ep.register(self.C, Access.LOCAL_WRITE | Access.REMOTE_WRITE, owner="channel")
        self.ring = ring_view(self.region)
        self.head_mr = ep.register(8, Access.REMOTE_ATOMIC, config.head_loc, owner="channel")
        self.tail_mr = ep.register(8, Access.REMOTE_READ, config.tail_loc, owner="channel")
        self.qps = []
        self.pos = 0
        self.tail = OffsetTail()
        self.out = {}
        self.unacked = 0
        self.arrived = deque()
        self.tail_history = []

    def head_value(self) -> int:
        return int.from_bytes(self.head_mr.data[:8], "little")

    def progress(self) -> None:
        if self.variant != "imm":
            return
        for ev in self.cq.poll(64):
            check_status(ev)
            ev.qp.post_recv(WorkRequest(Op.RECV, 0))
            start = self.tail.tail + ((ev.imm - self.tail.tail) % self.C)
            self.arrived.append((start, ev.byte_len, self.qps.index(ev.qp)))

    def receive_region(self):
        mr = self.region
        if self.variant == "imm":
            self.progress()
            if not self.arrived:
                self._flush()
                return None
            start, n, src = self.arrived.popleft()
            off = start
        else:
            start, src = self.pos, None
            n = mr.load_u32(start)
            if not n or not mr.load_u32(start + 4 + pad4(n)):
                self._flush()
                return None
            off = start + 4
        size = sring_record_size(self.variant, n)
        self.pos = max(self.pos, start + size)
        self.delivered += 1
        r = Region(mr, off % self.C, n, Provenance.CHANNEL_POOL, source=src, tag=(start, size))
        self.out[id(r)] = r
        return r

    def free_receive_region(self, r: Region) -> None:
        if self.out.pop(id(r), None) is None:
            raise DoubleFree("region was not handed out or is already free")
        start, size = r.tag
        if self.variant == "zeroing":
            self.ring.zero_window(start, size)
            self.ep.counters.add("zeroed_bytes", size)
        self.tail.mark(start, start + size)
        self.freed += 1
        self.unacked += 1
        if self.unacked >= self.config.ack_batch:
            self._flush()

    def _flush(self) -> None:
        if self.unacked:
            self.unacked = 0
            self.tail_mr.store_u64(0, self.tail.tail)
            self.tail_history.append((self.tail.tail, self.head_value()))

    advance_tail = flush = _flush

    @property
    def wait_queue(self):
        return self.cq if self.blocking else None


@register_family("sring")
def build(spec, fabric, sender_eps, receiver_eps, cfg, mode):
    senders, receivers = [], []
    for rep in receiver_eps:
        r = SharedRingReceiver(fabric, rep, spec, cfg)
        for sep in sender_eps:
            s = SharedRingSender(fabric, sep, spec, cfg)
            s.qp, rq = connect_handles(s, r)
            s.ring, s.head_mr = r.region, r.head_mr
            s.link = ReadAckLink(s.qp, rep, word=r.tail_mr)
            r.qps.append(rq)
            if spec.variant == "imm":
                # one bufferless receive per possible record in the ring (records are at least 4 bytes)
                for _ in range(r.C // 4):
                    rq.post_recv(WorkRequest(Op.RECV, 0))
            senders.append(s)
        receivers.append(r)
    return senders, receivers

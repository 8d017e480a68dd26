"""Ring-buffer channels: variable-size records written into a remote circular buffer."""

from __future__ import annotations

from collections import deque

from ..fabric import Op, WorkRequest
from ..memory import Access, Provenance, Region, pad4, ring_view
from .core import (
    ChannelError,
    DoubleFree,
    NoCredit,
    Receiver,
    Sender,
    WriteAckLink,
    build_private,
    check_status,
    connect_handles,
    register_family,
)

_DATA = 1 << 48


class OffsetTail:
    """Contiguous-prefix tail over records released in any order (absolute byte offsets)."""

    __slots__ = ("tail", "done")

    def __init__(self, start: int = 0):
        self.tail = start
        self.done = {}

    def mark(self, start: int, end: int) -> int:
        if start < self.tail or start in self.done:
            raise DoubleFree(f"record at {start} released twice")
        self.done[start] = end
        done = self.done
        while self.tail in done:
            self.tail = done.pop(self.tail)
        return self.tail


def record_size(variant: str, n: int) -> int:
    p = pad4(n)
    if variant == "imm":
        return p if n else 4
    if variant == "detached":
        return 4 + p
    if variant == "zeroing":
        return 8 + p
    return 4 + p  # nozeroing: zero word + payload; the len word aliases the previous zero word


class RingSender(Sender):
    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.C = config.ring_capacity
        self.variant = spec.variant
        self.max_message = config.max_message or self.C // 4
        # header scratch: len at 0, eight zero bytes at 4, done word at 12, detached head at 24
        self.hdr = ep.register(32, Access.LOCAL_WRITE, owner="channel")
        self.hdr.store_u32(12, 1)
        self.qp = None
        self.link = None
        self.ring = None
        self.bell = None
        self.head = 0  # absolute bytes produced

    def _fits(self, size: int) -> bool:
        slack = 4 if self.variant == "nozeroing" else 0
        return self.head + size + slack - self.link.latest() <= self.C

    def has_credit(self, length: int = 1) -> bool:
        return self._fits(record_size(self.variant, length))

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            check_status(ev)
            self._done(ev.wr_id - _DATA)

    def send_region(self, r: Region) -> int:
        n = r.length
        self._check_size(n)
        v = self.variant
        if n == 0 and v != "imm":
            raise ChannelError("a length bell cannot signal an empty message")
        size = record_size(v, n)
        if not self._fits(size):
            raise NoCredit(f"{self.spec.selector}: ring has no room for a {size}-byte record")
        h = self._new_handle()
        C, hdr, qp = self.C, self.hdr, self.qp
        pos = self.head % C
        p = pad4(n)
        if v == "imm":
            qp.post(WorkRequest(Op.WRITE_IMM, _DATA + h, (r.sge(),), (self.ring, pos), pos))
        elif v == "zeroing":
            hdr.store_u32(0, n)
            gl = ((hdr, 0, 4), r.sge(), (hdr, 12 - (p - n), 4 + p - n))
            qp.post(WorkRequest(Op.WRITE, _DATA + h, gl, (self.ring, pos)))
        elif v == "detached":
            hdr.store_u32(0, n)
            gl = ((hdr, 0, 4), r.sge()) + (((hdr, 4, p - n),) if p > n else ())
            self._pending[h] = 2
            qp.post(WorkRequest(Op.WRITE, _DATA + h, gl, (self.ring, pos)))
            hdr.store_u64(24, self.head + size)
            qp.post(WorkRequest(Op.WRITE, _DATA + h, ((hdr, 24, 8),), (self.bell, 0)))
        else:
            # reverse record [zero][pad][payload][len] ending 4 bytes above the current bell
            b = (C - 4 - self.head) % C
            hdr.store_u32(0, n)
            gl = ((hdr, 4, 4 + p - n), r.sge(), (hdr, 0, 4))
            qp.post(WorkRequest(Op.WRITE, _DATA + h, gl, (self.ring, (b - p - 4) % C)))
        self.head += size
        self.sent += 1
        return h


class RingReceiver(Receiver):
    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.C = config.ring_capacity
        self.variant = spec.variant
        self.blocking = self.variant == "imm"
        flags = Access.LOCAL_WRITE | Access.REMOTE_WRITE
        self.region = ep.register(self.C, flags, owner="channel")
        self.ring = ring_view(self.region)
        self.bell = ep.register(8, flags, owner="channel") if self.variant == "detached" else None
        self.qp = None
        self.link = None
        self.pos = 0  # absolute bytes consumed by the parser
        self.tail = OffsetTail()
        self.out = {}
        self.unacked = 0
        self.arrived = deque()

    def progress(self) -> None:
        if self.variant != "imm":
            return
        for ev in self.cq.poll(64):
            check_status(ev)
            self.qp.post_recv(WorkRequest(Op.RECV, 0))
            start = self.tail.tail + ((ev.imm - self.tail.tail) % self.C)
            self.arrived.append((start, ev.byte_len))

    def _peek_record(self):
        """(start, payload offset, len, size) of the next complete record, or None."""
        mr, C, v = self.region, self.C, self.variant
        if v == "imm":
            self.progress()
            if not self.arrived:
                return None
            start, n = self.arrived.popleft()
            return start, start, n, record_size(v, n)
        start = self.pos
        if v == "nozeroing":
            b = (C - 4 - start) % C
            n = mr.load_u32(b)
            if not n:
                return None
            return start, b - n, n, record_size(v, n)
        if v == "detached":
            if self.bell.load_u64(0) <= start:
                return None
            n = mr.load_u32(start)
            return start, start + 4, n, record_size(v, n)
        n = mr.load_u32(start)
        if not n:
            return None
        if not mr.load_u32(start + 4 + pad4(n)):
            return None
        return start, start + 4, n, record_size(v, n)

    def receive_region(self):
        rec = self._peek_record()
        if rec is None:
            if self.unacked:
                self._publish()
            return None
        start, off, n, size = rec
        self.pos = max(self.pos, start + size)
        self.delivered += 1
        r = Region(self.region, off % self.C, n, Provenance.CHANNEL_POOL, tag=(start, size))
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
            self._publish()

    def _publish(self) -> None:
        self.unacked = 0
        self.link.publish(self.tail.tail)

    def flush(self) -> None:
        if self.unacked:
            self._publish()

    @property
    def wait_queue(self):
        return self.cq if self.blocking else None


def _pair(spec, fabric, sep, rep, cfg):
    s = RingSender(fabric, sep, spec, cfg)
    r = RingReceiver(fabric, rep, spec, cfg)
    s.qp, r.qp = connect_handles(s, r)
    s.ring, s.bell = r.region, r.bell
    s.link = r.link = WriteAckLink(r.qp, sep)
    if spec.variant == "imm":
        for _ in range(r.C // 4):
            r.qp.post_recv(WorkRequest(Op.RECV, 0))
    return s, r


@register_family("ring")
def build(spec, fabric, sender_eps, receiver_eps, cfg, mode):
    return build_private(_pair, spec, fabric, sender_eps, receiver_eps, cfg)

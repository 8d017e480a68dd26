"""Send/Recv channels: private receive pools, a shared receive queue, and bufferless IMM sends."""

from __future__ import annotations

from ..fabric import Op, WorkRequest
from ..memory import Access, MemoryRegion, Provenance, Region
from .core import (
    ChannelError,
    DoubleFree,
    NoCredit,
    Receiver,
    SendAckLink,
    Sender,
    build_private,
    check_status,
    connect_handles,
    register_family,
)

_DATA = 1 << 48


class SRSender(Sender):
    def __init__(self, fabric, ep, spec, config, bufferless=False):
        super().__init__(fabric, ep, spec, config)
        self.bufferless = bufferless
        self.max_message = 3 if bufferless else config.slot_size
        self.qp = None
        self.link = None
        self.granted = 0  # credits handed out by the receiver so far

    def has_credit(self, length: int = 1) -> bool:
        self.progress()
        return self.sent < self.granted + self.link.latest()

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            if self.link.on_completion(ev):
                continue
            check_status(ev)
            self._done(ev.wr_id - _DATA)

    def send_region(self, r: Region) -> int:
        self._check_size(r.length)
        if not self.has_credit(r.length):
            raise NoCredit(f"{self.spec.selector}: no posted receive buffers left at the receiver")
        h = self._new_handle()
        if self.bufferless:
            # up to three payload bytes travel in the IMM word, the top byte holds the length
            raw = r.mr._read(r.offset, r.length) if r.length else b""
            imm = int.from_bytes(raw.ljust(3, b"\0"), "little") | (r.length << 24)
            self.qp.post(WorkRequest(Op.SEND, _DATA + h, (), None, imm))
        else:
            self.qp.post(WorkRequest(Op.SEND, _DATA + h, (r.sge(),)))
        self.sent += 1
        return h

    def send_imm(self, value: int) -> int:
        """Bufferless notification carrying a raw 32-bit integer."""
        if not self.has_credit():
            raise NoCredit(f"{self.spec.selector}: no posted receive buffers left at the receiver")
        h = self._new_handle()
        self.qp.post(WorkRequest(Op.SEND, _DATA + h, (), None, value & 0xFFFFFFFF))
        self.sent += 1
        return h


class SRReceiver(Receiver):
    blocking = True

    def __init__(self, fabric, ep, spec, config, bufferless=False):
        super().__init__(fabric, ep, spec, config)
        self.bufferless = bufferless
        self.slot = config.slot_size
        self.depth = config.recv_depth
        self.pool = None if bufferless else ep.register(self.slot * self.depth, Access.LOCAL_WRITE, owner="channel")
        self.qp = None
        self.link = None
        self.ready = []
        self.out = set()
        self.posted = 0

    def _post(self, idx: int) -> None:
        if self.posted >= self.depth:
            raise ChannelError("receive queue depth exceeded")
        if self.bufferless:
            wr = WorkRequest(Op.RECV, idx)
        else:
            wr = WorkRequest(Op.RECV, idx, ((self.pool, idx * self.slot, self.slot),))
        self.qp.post_recv(wr)
        self.posted += 1

    def repost_receives(self, n: int = 1) -> None:
        for _ in range(n):
            self._post(0)

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            check_status(ev)
            if ev.opcode is Op.RECV:
                self.posted -= 1
                self.ready.append(ev)

    def receive_imm(self):
        self.progress()
        if not self.ready:
            return None
        ev = self.ready.pop(0)
        self.delivered += 1
        self._post(0)
        self.freed += 1
        self._ack()
        return ev.imm

    def receive_region(self):
        self.progress()
        if not self.ready:
            self._ack(lazy=True)
            return None
        ev = self.ready.pop(0)
        self.delivered += 1
        if self.bufferless:
            n = ev.imm >> 24
            mr = MemoryRegion(0, self.ep, 4, Access.NONE)  # unregistered scratch word
            mr.data[:3] = (ev.imm & 0xFFFFFF).to_bytes(3, "little")
            r = Region(mr, 0, n, Provenance.CHANNEL_POOL, tag=ev.wr_id)
        else:
            r = Region(self.pool, ev.wr_id * self.slot, ev.byte_len, Provenance.CHANNEL_POOL, tag=ev.wr_id)
        self.out.add(id(r))
        return r

    def free_receive_region(self, r: Region) -> None:
        if id(r) not in self.out:
            raise DoubleFree("region was not handed out or is already free")
        self.out.discard(id(r))
        self._post(r.tag)
        self.freed += 1
        self._ack()

    def flush(self) -> None:
        self._ack(lazy=True)

    def _ack(self, lazy=False) -> None:
        if self.freed - self.link.published >= (1 if lazy else self.config.ack_batch):
            self.link.publish(self.freed)

    @property
    def wait_queue(self):
        return self.cq


def _pair(spec, fabric, sep, rep, cfg):
    bl = spec.variant == "bufferless"
    s = SRSender(fabric, sep, spec, cfg, bl)
    r = SRReceiver(fabric, rep, spec, cfg, bl)
    s.qp, r.qp = connect_handles(s, r)
    r.link = s.link = SendAckLink(r.qp, s.qp, cfg.recv_depth)
    for i in range(r.depth):
        r._post(i)
    s.granted = r.depth
    return s, r


def _shared(spec, fabric, sender_eps, receiver_eps, cfg):
    receivers, senders = [], []
    for rep in receiver_eps:
        n = len(sender_eps)
        r = _SRQReceiver(fabric, rep, spec, cfg, n)
        for i, sep in enumerate(sender_eps):
            s = SRSender(fabric, sep, spec, cfg)
            sq, rq = connect_handles(s, r, r_srq=r.srq)
            s.qp = sq
            s.link = SendAckLink(rq, sq, r.depth)
            r.qps.append(rq)
            r.links.append(s.link)
            senders.append(s)
        r.start()
        for s, g in zip(senders[-n:], r.initial):
            s.granted = g
        receivers.append(r)
    return senders, receivers


class _SRQReceiver(SRReceiver):
    """Receive pool shared by every connected sender; credits return to the sender whose message was freed."""

    def __init__(self, fabric, ep, spec, config, nsenders):
        Receiver.__init__(self, fabric, ep, spec, config)
        self.bufferless = False
        self.slot = config.slot_size
        self.depth = max(config.recv_depth, nsenders)
        self.pool = ep.register(self.slot * self.depth, Access.LOCAL_WRITE, owner="channel")
        self.srq = ep.create_srq()
        self.qps = []
        self.links = []
        self.ready = []
        self.out = set()
        self.posted = 0
        self.nsenders = nsenders
        self.freed_by = [0] * nsenders
        self.initial = []

    def start(self):
        n = self.nsenders
        self.initial = [self.depth // n + (1 if i < self.depth % n else 0) for i in range(n)]
        for i in range(self.depth):
            self._post(i)

    def _post(self, idx: int) -> None:
        if self.posted >= self.depth:
            raise ChannelError("receive queue depth exceeded")
        self.srq.post_recv(WorkRequest(Op.RECV, idx, ((self.pool, idx * self.slot, self.slot),)))
        self.posted += 1

    def receive_region(self):
        self.progress()
        if not self.ready:
            self._flush()
            return None
        ev = self.ready.pop(0)
        self.delivered += 1
        src = self.qps.index(ev.qp)
        r = Region(self.pool, ev.wr_id * self.slot, ev.byte_len, Provenance.CHANNEL_POOL, source=src,
                   tag=ev.wr_id)
        self.out.add(id(r))
        return r

    def free_receive_region(self, r: Region) -> None:
        if id(r) not in self.out:
            raise DoubleFree("region was not handed out or is already free")
        self.out.discard(id(r))
        self._post(r.tag)
        self.freed += 1
        self.freed_by[r.source] += 1
        link = self.links[r.source]
        if self.freed_by[r.source] - link.published >= self.config.ack_batch:
            link.publish(self.freed_by[r.source])

    def flush(self) -> None:
        self._flush()

    def _flush(self):
        for i, link in enumerate(self.links):
            if self.freed_by[i] > link.published:
                link.publish(self.freed_by[i])


@register_family("sendrecv")
def build(spec, fabric, sender_eps, receiver_eps, cfg, mode):
    if spec.variant == "shared":
        return _shared(spec, fabric, sender_eps, receiver_eps, cfg)
    return build_private(_pair, spec, fabric, sender_eps, receiver_eps, cfg)

"""Write-slot channels: fixed mailboxes written remotely, signalled by a bell or an IMM."""

from __future__ import annotations

from collections import deque

from ..fabric import Op, WorkRequest
from ..memory import Access, Provenance, Region, copy_instrumented
from .core import (
    ChannelError,
    DoubleFree,
    MessageTooLarge,
    NoCredit,
    OptionConsumed,
    Receiver,
    RegionOption,
    Sender,
    WriteAckLink,
    build_private,
    check_status,
    connect_handles,
    register_family,
)

_DATA = 1 << 48
_GRANT = 2 << 48


class SeqWindow:
    """Tracks out-of-order completion of a numbered sequence; ``base`` is the contiguous prefix."""

    __slots__ = ("base", "done")

    def __init__(self):
        self.base = 0
        self.done = set()

    def mark(self, seq: int) -> int:
        if seq < self.base or seq in self.done:
            raise DoubleFree(f"message {seq} released twice")
        if seq == self.base:
            self.base += 1
            done = self.done
            while self.base in done:
                done.remove(self.base)
                self.base += 1
        else:
            self.done.add(seq)
        return self.base


class SlotSender(Sender):
    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.S = config.slot_size
        self.K = config.slot_count
        v = spec.variant
        self.max_message = self.S - 4 if v == "inlined" else self.S
        self.hdr = ep.register(8, Access.LOCAL_WRITE, owner="channel")
        self.qp = None
        self.link = None
        self.slots = None  # remote slot array
        self.bells = None  # remote bell array (detached)

    def has_credit(self, length: int = 1) -> bool:
        return self.sent - self.link.latest() < self.K

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            check_status(ev)
            self._done(ev.wr_id - _DATA)

    def send_region(self, r: Region) -> int:
        n = r.length
        self._check_size(n)
        v = self.spec.variant
        if n == 0 and v != "imm":
            raise ChannelError("a bell cannot signal an empty message")
        if not self.has_credit(n):
            raise NoCredit(f"{self.spec.selector}: all {self.K} slots are unacknowledged")
        k = self.sent % self.K
        base = k * self.S
        h = self._new_handle()
        qp = self.qp
        if v == "inlined":
            # payload right-aligned against the bell word at the end of the slot
            self.hdr.store_u32(0, n)
            gl = (r.sge(), (self.hdr, 0, 4))
            qp.post(WorkRequest(Op.WRITE, _DATA + h, gl, (self.slots, base + self.S - 4 - n)))
        elif v == "detached":
            self._pending[h] = 2
            qp.post(WorkRequest(Op.WRITE, _DATA + h, (r.sge(),), (self.slots, base)))
            self.hdr.store_u32(0, n)
            qp.post(WorkRequest(Op.WRITE, _DATA + h, ((self.hdr, 0, 4),), (self.bells, 4 * k)))
        else:
            qp.post(WorkRequest(Op.WRITE_IMM, _DATA + h, (r.sge(),), (self.slots, base), k))
        self.sent += 1
        return h


class SlotReceiver(Receiver):
    zero_copy_recv = True

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.S = config.slot_size
        self.K = config.slot_count
        self.variant = spec.variant
        self.blocking = self.variant == "imm"
        flags = Access.LOCAL_WRITE | Access.REMOTE_WRITE
        self.slots = ep.register(self.S * self.K, flags, owner="channel")
        self.bells = ep.register(4 * self.K, flags, owner="channel") if self.variant == "detached" else None
        self.qp = None
        self.link = None
        self.window = SeqWindow()
        self.gen = [0] * self.K
        self.arrived = deque()  # (seq, slot, len) for IMM completions
        self.offered = None

    def progress(self) -> None:
        if self.variant != "imm":
            return
        for ev in self.cq.poll(64):
            check_status(ev)
            k = ev.imm
            seq = self.gen[k] * self.K + k
            self.gen[k] += 1
            self.arrived.append((seq, k, ev.byte_len))
            self.qp.post_recv(WorkRequest(Op.RECV, 0))

    def _peek(self):
        """(seq, slot, payload offset, len) of the next readable message, or None."""
        if self.variant == "imm":
            self.progress()
            if not self.arrived:
                return None
            seq, k, n = self.arrived[0]
            return seq, k, k * self.S, n
        seq = self.delivered
        if seq - self.window.base >= self.K:
            return None
        k = seq % self.K
        if self.variant == "inlined":
            n = self.slots.load_u32(k * self.S + self.S - 4)
            if not n:
                return None
            return seq, k, k * self.S + self.S - 4 - n, n
        n = self.bells.load_u32(4 * k)
        if not n:
            return None
        return seq, k, k * self.S, n

    def can_receive_region(self):
        if self.offered is not None:
            return self.offered
        p = self._peek()
        if p is None:
            if self.window.base > self.link.published:
                self.link.publish(self.window.base)
            return None
        seq, k, off, n = p
        if self.variant == "imm":
            self.arrived.popleft()
        self.delivered += 1
        slot = Region(self.slots, off, n, Provenance.CHANNEL_POOL, tag=(seq, k))
        self.offered = RegionOption((self.ep.id, self.slots.id, off), n, (seq, k), slot)
        return self.offered

    def receive_region_into(self, o: RegionOption, dst: Region) -> int:
        if o.consumed:
            raise OptionConsumed("option already consumed")
        if dst.length < o.length:
            raise MessageTooLarge(f"destination of {dst.length} bytes is smaller than the {o.length}-byte message")
        o.consumed = True
        if o is self.offered:
            self.offered = None
        slot = o.region
        if dst.mr is slot.mr and dst.offset == slot.offset:
            out = slot
        else:
            out = Region(dst.mr, dst.offset, o.length, dst.provenance, tag=o.token)
            copy_instrumented(slot, out.sub(0, o.length))
            self._release(o.token)
            out.tag = None
        h = self._new_handle()
        self._finished[h] = out
        return h

    def release_option(self, r: Region) -> None:
        if r.tag is None:
            return
        self._release(r.tag)
        r.tag = None

    def _release(self, token) -> None:
        seq, k = token
        if self.variant == "inlined":
            self.slots.store_u32(k * self.S + self.S - 4, 0)
        elif self.variant == "detached":
            self.bells.store_u32(4 * k, 0)
        self.freed += 1
        base = self.window.mark(seq)
        if base - self.link.published >= self.config.ack_batch:
            self.link.publish(base)

    def flush(self) -> None:
        if self.window.base > self.link.published:
            self.link.publish(self.window.base)

    @property
    def wait_queue(self):
        return self.cq if self.blocking else None


def _pair(spec, fabric, sep, rep, cfg):
    s = SlotSender(fabric, sep, spec, cfg)
    r = SlotReceiver(fabric, rep, spec, cfg)
    s.qp, r.qp = connect_handles(s, r)
    s.slots, s.bells = r.slots, r.bells
    s.link = r.link = WriteAckLink(r.qp, sep)
    if spec.variant == "imm":
        for _ in range(r.K):
            r.qp.post_recv(WorkRequest(Op.RECV, 0))
    return s, r


# -- reserve: a shared slot pool locked per message over bufferless sends ---------------


class ReserveSender(Sender):
    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.S = config.slot_size
        self.max_message = self.S
        self.limit = config.recv_depth
        self.waiting = deque()  # (handle, region) awaiting a grant
        self.inflight = 0
        self.qp = None
        self.slots = None

    def has_credit(self, length: int = 1) -> bool:
        self.progress()
        return len(self.waiting) + self.inflight < self.limit

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            check_status(ev)
            if ev.opcode is Op.RECV:
                # grant: imm names the locked slot
                self.qp.post_recv(WorkRequest(Op.RECV, _GRANT))
                h, r = self.waiting.popleft()
                k = ev.imm
                self.qp.post(WorkRequest(Op.WRITE_IMM, _DATA + h, (r.sge(),), (self.slots, k * self.S), k))
            elif ev.opcode is Op.WRITE_IMM:
                self.inflight -= 1
                self._done(ev.wr_id - _DATA)

    def send_region(self, r: Region) -> int:
        self._check_size(r.length)
        if not self.has_credit(r.length):
            raise NoCredit(f"{self.spec.selector}: {self.limit} reservations outstanding")
        h = self._new_handle()
        self.waiting.append((h, r))
        self.inflight += 1
        self.qp.post(WorkRequest(Op.SEND, 0, (), None, r.length, signaled=False, tag="ctrl"))
        self.sent += 1
        return h


class ReserveReceiver(Receiver):
    zero_copy_recv = True
    blocking = True

    def __init__(self, fabric, ep, spec, config, nsenders):
        super().__init__(fabric, ep, spec, config)
        self.S = config.slot_size
        self.K = max(config.slot_count, nsenders)
        self.slots = ep.register(self.S * self.K, Access.LOCAL_WRITE | Access.REMOTE_WRITE, owner="channel")
        self.free = deque(range(self.K))
        self.requests = deque()  # sender indices awaiting a slot
        self.qps = []
        self.owner = {}
        self.arrived = deque()
        self.offered = None

    def _grant(self) -> None:
        while self.free and self.requests:
            i = self.requests.popleft()
            k = self.free.popleft()
            self.owner[k] = i
            self.qps[i].post(WorkRequest(Op.SEND, 0, (), None, k, signaled=False, tag="ctrl"))

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            check_status(ev)
            i = self.qps.index(ev.qp)
            ev.qp.post_recv(WorkRequest(Op.RECV, 0))
            if ev.opcode is Op.RECV:
                self.requests.append(i)
            else:
                self.arrived.append((ev.imm, ev.byte_len, i))
        self._grant()

    def reserve_slot(self, sender_index: int = 0) -> None:
        self.requests.append(sender_index)
        self._grant()

    def release_slot(self, k: int) -> None:
        """Unlock slot ``k`` so the next waiting sender can take it."""
        if k not in self.owner:
            raise DoubleFree(f"slot {k} is not reserved")
        del self.owner[k]
        self.free.append(k)
        self.freed += 1
        self._grant()

    def can_receive_region(self):
        if self.offered is not None:
            return self.offered
        self.progress()
        if not self.arrived:
            return None
        k, n, i = self.arrived.popleft()
        self.delivered += 1
        slot = Region(self.slots, k * self.S, n, Provenance.CHANNEL_POOL, source=i, tag=k)
        self.offered = RegionOption((self.ep.id, self.slots.id, k * self.S), n, k, slot)
        return self.offered

    def receive_region_into(self, o: RegionOption, dst: Region) -> int:
        if o.consumed:
            raise OptionConsumed("option already consumed")
        if dst.length < o.length:
            raise MessageTooLarge(f"destination of {dst.length} bytes is smaller than the {o.length}-byte message")
        o.consumed = True
        if o is self.offered:
            self.offered = None
        slot = o.region
        if dst.mr is slot.mr and dst.offset == slot.offset:
            out = slot
        else:
            out = Region(dst.mr, dst.offset, o.length, dst.provenance, source=slot.source)
            copy_instrumented(slot, out)
            self.release_slot(o.token)
        h = self._new_handle()
        self._finished[h] = out
        return h

    def release_option(self, r: Region) -> None:
        if r.tag is None:
            return
        self.release_slot(r.tag)
        r.tag = None


def _reserve(spec, fabric, sender_eps, receiver_eps, cfg):
    senders, receivers = [], []
    for rep in receiver_eps:
        r = ReserveReceiver(fabric, rep, spec, cfg, len(sender_eps))
        for sep in sender_eps:
            s = ReserveSender(fabric, sep, spec, cfg)
            s.qp, rq = connect_handles(s, r)
            s.slots = r.slots
            r.qps.append(rq)
            for _ in range(2 * s.limit):
                rq.post_recv(WorkRequest(Op.RECV, 0))
            for _ in range(s.limit):
                s.qp.post_recv(WorkRequest(Op.RECV, _GRANT))
            senders.append(s)
        receivers.append(r)
    return senders, receivers


@register_family("wslot")
def build(spec, fabric, sender_eps, receiver_eps, cfg, mode):
    if spec.variant == "reserve":
        return _reserve(spec, fabric, sender_eps, receiver_eps, cfg)
    return build_private(_pair, spec, fabric, sender_eps, receiver_eps, cfg)

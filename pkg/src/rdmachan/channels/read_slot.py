"""Read-slot channels: the sender exposes messages, the receiver pulls them with READ."""

from __future__ import annotations

from collections import deque

from ..fabric import Op, WorkRequest
from ..memory import Access, Provenance, Region, copy_instrumented, pad4, ring_view
from .core import (
    ChannelError,
    MessageTooLarge,
    NoCredit,
    OptionConsumed,
    ReadAckLink,
    Receiver,
    RegionOption,
    Sender,
    UnknownHandle,
    build_private,
    check_status,
    connect_handles,
    make_ack_link,
    register_family,
)
from .ring import OffsetTail
from .write_slot import SeqWindow

_DATA = 1 << 48
_BELL = 2 << 48
_MASK32 = 0xFFFFFFFF
BELL_ENTRY = 16  # [seq][offset][len][pad]
AD_SIZE = 16  # [region id][offset][length][ad id]


def arena_size(n: int) -> int:
    return max(4, pad4(n))


class PublishSender(Sender):
    """Exposes messages in local readable memory; readers pull and acknowledge by count or by bytes."""

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.variant = spec.variant
        self.K = config.slot_count
        self.S = config.slot_size
        self.qps = []
        self.links = []
        flags = Access.LOCAL_WRITE | Access.REMOTE_READ
        if self.variant == "inlined":
            self.stride = self.S + 8
            self.slots = ep.register(self.K * self.stride, flags, owner="channel")
            self.max_message = self.S
        else:
            self.A = config.ring_capacity
            if self.variant == "notify" and self.A > 4 << 16:
                raise ChannelError("notify arena is limited to 256 KiB by the IMM encoding")
            self.arena = ep.register(self.A, flags, owner="channel")
            ring_view(self.arena)
            self.bells = ep.register(self.K * BELL_ENTRY, flags, owner="channel") if self.variant == "detached" else None
            self.max_message = config.max_message or self.A // 4
            if self.variant == "notify":
                self.max_message = min(self.max_message, 0xFFFF)
            self.head = 0
            self.ends = deque()  # (seq, absolute end) for count-acknowledged arenas
        self.staged = None

    # credit ----------------------------------------------------------------
    def acked(self) -> int:
        return min(l.latest() for l in self.links)

    def _arena_tail(self, acked: int) -> int:
        if self.variant == "notify":
            return acked
        ends = self.ends
        tail = getattr(self, "_tail", 0)
        while ends and ends[0][0] < acked:
            tail = ends.popleft()[1]
        self._tail = tail
        return tail

    def _room(self, length: int) -> bool:
        a = self.acked()
        if self.variant == "inlined":
            return self.sent - a < self.K
        if self.variant == "detached" and self.sent - a >= self.K:
            return False
        return self.head + arena_size(length) - self._arena_tail(a) <= self.A

    def has_credit(self, length: int = 1) -> bool:
        self.progress()
        if self._room(length):
            return True
        for l in self.links:
            l.refresh()
        return False

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            for l in self.links:
                if l.on_completion(ev):
                    break
            else:
                check_status(ev)

    def test_send_request(self, handle: int) -> bool:
        if handle < 0 or handle >= self._next:
            raise UnknownHandle(f"unknown send handle {handle}")
        self.progress()
        if self.variant == "notify":
            done = self._arena_tail(self.acked()) >= self._handle_end[handle]
        else:
            done = handle < self.acked()
        if not done:
            for l in self.links:
                l.refresh()
        return done

    # staging -----------------------------------------------------------------
    def alloc_region(self, length: int) -> Region:
        self._check_size(length)
        if not self.has_credit(length):
            raise NoCredit(f"{self.spec.selector}: no free slot for the next message")
        if self.variant == "inlined":
            off = (self.sent % self.K) * self.stride
            r = Region(self.slots, off, length, Provenance.CHANNEL_POOL)
        else:
            r = Region(self.arena, self.head % self.A, length, Provenance.CHANNEL_POOL)
        self.staged = r
        return r

    def send_region(self, r: Region) -> int:
        n = r.length
        self._check_size(n)
        staged = self.staged
        self.staged = None
        if staged is None or staged.mr is not r.mr or staged.offset != r.offset:
            if not self.has_credit(n):
                raise NoCredit(f"{self.spec.selector}: no free slot for the next message")
            dst = self.alloc_region(n)
            self.staged = None
            copy_instrumented(r, dst)
        seq = self.sent
        h = self._new_handle(waits=0)
        v = self.variant
        if v == "inlined":
            base = (seq % self.K) * self.stride
            self.slots.store_u32(base + self.S, n)
            self.slots.store_u32(base + self.S + 4, (seq + 1) & _MASK32)
        else:
            off = self.head % self.A
            size = arena_size(n)
            self.head += size
            if v == "detached":
                self.ends.append((seq, self.head))
                b = (seq % self.K) * BELL_ENTRY
                self.bells.store_u32(b + 4, off)
                self.bells.store_u32(b + 8, n)
                self.bells.store_u32(b, (seq + 1) & _MASK32)
            else:
                self.__dict__.setdefault("_handle_end", {})[h] = self.head
                imm = (off >> 2) << 16 | n
                for qp in self.qps:
                    qp.post(WorkRequest(Op.SEND, 0, (), None, imm, signaled=False))
        self.sent += 1
        return h


class _PullReceiver(Receiver):
    zero_copy_recv = True

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.variant = spec.variant
        self.K = config.slot_count
        self.S = config.slot_size
        self.qp = None
        self.link = None
        self.sender = None
        self.offered = None
        self.retry = True
        self.unacked = 0

    def _check_option(self, o, dst):
        if o.consumed:
            raise OptionConsumed("option already consumed")
        if dst.length < o.length:
            raise MessageTooLarge(f"destination of {dst.length} bytes is smaller than the {o.length}-byte option")
        o.consumed = True
        if o is self.offered:
            self.offered = None

    def _ack(self, value: int) -> None:
        self.freed += 1
        self.unacked += 1
        self._ack_value = value
        if self.unacked >= self.config.ack_batch:
            self._lazy_ack()

    def flush(self) -> None:
        self._lazy_ack()

    def _lazy_ack(self) -> None:
        # also called whenever the receiver runs dry, so a batch larger than the window cannot stall
        if self.unacked:
            self.unacked = 0
            self.link.publish(self._ack_value)


class InlinedReceiver(_PullReceiver):
    """Speculatively READs the next slot with its bell; the bell is checked in the fetched bytes."""

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.scratch = ep.register(8, Access.LOCAL_WRITE, owner="channel")
        self.window = SeqWindow()
        self.next_seq = 0
        self.reads = {}

    def can_receive_region(self):
        if self.offered is not None:
            return self.offered
        seq = self.next_seq
        if self.reads or seq - self.window.base >= self.K:
            self._lazy_ack()
            return None
        s = self.sender
        self.offered = RegionOption((s.ep.id, s.slots.id, (seq % self.K) * s.stride), self.S, seq)
        return self.offered

    def receive_region_into(self, o, dst) -> int:
        self._check_option(o, dst)
        h = self._new_handle()
        self._pending[h] = True
        self._read(h, o.token, dst)
        return h

    def _read(self, h, seq, dst):
        s = self.sender
        self.reads[h] = (seq, dst, self.fabric.now)
        gl = ((dst.mr, dst.offset, self.S), (self.scratch, 0, 8))
        self.qp.post(WorkRequest(Op.READ, _DATA + h, gl, (s.slots, (seq % self.K) * s.stride)))

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            if self.link.on_completion(ev):
                continue
            check_status(ev)
            h = ev.wr_id - _DATA
            seq, dst, t0 = self.reads.pop(h)
            n = self.scratch.load_u32(0)
            if self.scratch.load_u32(4) == (seq + 1) & _MASK32:
                self.next_seq = seq + 1
                self.delivered += 1
                del self._pending[h]
                self._finished[h] = Region(dst.mr, dst.offset, n, dst.provenance, tag=seq, pulled_at=t0)
            elif self.retry:
                self._lazy_ack()
                self._read(h, seq, dst)
            else:
                del self._pending[h]
                self._finished[h] = None

    def release_option(self, r: Region) -> None:
        if r.tag is None:
            return
        base = self.window.mark(r.tag)
        r.tag = None
        self._ack(base)


class DetachedReceiver(_PullReceiver):
    """READs the bell entry, then READs the message it names."""

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.scratch = ep.register(BELL_ENTRY, Access.LOCAL_WRITE, owner="channel")
        self.window = SeqWindow()
        self.next_seq = 0
        self.bell_at = None
        self.ready = None
        self.reads = {}

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            if self.link.on_completion(ev):
                continue
            check_status(ev)
            if ev.wr_id == _BELL:
                t0, self.bell_at = self.bell_at, None
                seq = self.next_seq
                sc = self.scratch
                if sc.load_u32(0) == (seq + 1) & _MASK32:
                    self.next_seq = seq + 1
                    s = self.sender
                    off, n = sc.load_u32(4), sc.load_u32(8)
                    self.ready = RegionOption((s.ep.id, s.arena.id, off), n, (seq, t0))
                continue
            h = ev.wr_id - _DATA
            self._complete(h)

    def _complete(self, h):
        seq, dst, n, t0 = self.reads.pop(h)
        del self._pending[h]
        self.delivered += 1
        self._finished[h] = Region(dst.mr, dst.offset, n, dst.provenance, tag=seq, pulled_at=t0)

    def can_receive_region(self):
        if self.offered is not None:
            return self.offered
        self.progress()
        if self.ready is not None:
            self.offered, self.ready = self.ready, None
            return self.offered
        if self.bell_at is None and self.next_seq - self.window.base < self.K:
            self.bell_at = self.fabric.now
            s = self.sender
            b = (self.next_seq % self.K) * BELL_ENTRY
            self.qp.post(WorkRequest(Op.READ, _BELL, ((self.scratch, 0, BELL_ENTRY),), (s.bells, b)))
        self._lazy_ack()
        return None

    def receive_region_into(self, o, dst) -> int:
        self._check_option(o, dst)
        h = self._new_handle()
        self._pending[h] = True
        seq, t0 = o.token
        self.reads[h] = (seq, dst, o.length, t0)
        if o.length == 0:
            self._complete(h)
        else:
            s = self.sender
            self.qp.post(WorkRequest(Op.READ, _DATA + h, ((dst.mr, dst.offset, o.length),), (s.arena, o.source[2])))
        return h

    def release_option(self, r: Region) -> None:
        if r.tag is None:
            return
        base = self.window.mark(r.tag)
        r.tag = None
        self._ack(base)


class NotifyReceiver(_PullReceiver):
    """Waits for a bufferless notification naming the message, then READs it."""

    blocking = True

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.tail = OffsetTail()
        self.arrived = deque()
        self.reads = {}
        self.A = config.ring_capacity

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            if self.link.on_completion(ev):
                continue
            check_status(ev)
            if ev.opcode is Op.RECV:
                self.qp.post_recv(WorkRequest(Op.RECV, 0))
                off, n = (ev.imm >> 16) << 2, ev.imm & 0xFFFF
                start = self.tail.tail + ((off - self.tail.tail) % self.A)
                self.arrived.append((start, n))
            else:
                self._complete(ev.wr_id - _DATA)

    def _complete(self, h):
        start, dst, n, t0 = self.reads.pop(h)
        del self._pending[h]
        self.delivered += 1
        self._finished[h] = Region(dst.mr, dst.offset, n, dst.provenance, tag=(start, arena_size(n)), pulled_at=t0)

    def can_receive_region(self):
        if self.offered is not None:
            return self.offered
        self.progress()
        if not self.arrived:
            self._lazy_ack()
            return None
        start, n = self.arrived.popleft()
        s = self.sender
        self.offered = RegionOption((s.ep.id, s.arena.id, start % self.A), n, start)
        return self.offered

    def receive_region_into(self, o, dst) -> int:
        self._check_option(o, dst)
        h = self._new_handle()
        self._pending[h] = True
        self.reads[h] = (o.token, dst, o.length, self.fabric.now)
        if o.length == 0:
            self._complete(h)
        else:
            s = self.sender
            self.qp.post(WorkRequest(Op.READ, _DATA + h, ((dst.mr, dst.offset, o.length),), (s.arena, o.source[2])))
        return h

    def release_option(self, r: Region) -> None:
        if r.tag is None:
            return
        start, size = r.tag
        r.tag = None
        self._ack(self.tail.mark(start, start + size))

    @property
    def wait_queue(self):
        return self.cq


_RECEIVERS = {"inlined": InlinedReceiver, "detached": DetachedReceiver, "notify": NotifyReceiver}


def _publish_channel(spec, fabric, sender_ep, receiver_eps, cfg):
    """One exposed slot pool or arena read by every receiver."""
    s = PublishSender(fabric, sender_ep, spec, cfg)
    receivers = []
    for rep in receiver_eps:
        r = _RECEIVERS[spec.variant](fabric, rep, spec, cfg)
        sq, r.qp = connect_handles(s, r)
        s.qps.append(sq)
        # readers' counters are pulled by default; a pushed link keeps the publisher fully passive
        r.link = make_ack_link(cfg.ack, sq, r.qp, s.K) if cfg.ack else ReadAckLink(sq, rep)
        s.links.append(r.link)
        r.sender = s
        if spec.variant == "notify":
            for _ in range(s.A // 4):
                r.qp.post_recv(WorkRequest(Op.RECV, 0))
        receivers.append(r)
    return s, receivers


# -- indirect read: the receiver advertises buffers the sender writes into -------------


class IndirectSender(Sender):
    def __init__(self, fabric, ep, spec, config, srq, ad_pool):
        super().__init__(fabric, ep, spec, config)
        self.max_message = config.slot_size
        self.limit = config.recv_depth
        self.srq = srq
        self.ad_pool = ad_pool
        self.ads = deque()  # (region, offset, length, ad id)
        self.waiting = deque()
        self.qp = None
        self.peer_regions = None

    def has_credit(self, length: int = 1) -> bool:
        self.progress()
        return len(self.waiting) < self.limit

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            check_status(ev)
            if ev.opcode is Op.RECV:
                i = ev.wr_id
                p = self.ad_pool
                rid, off, ln, ad = (p.load_u32(i * AD_SIZE + 4 * j) for j in range(4))
                self.srq.post_recv(WorkRequest(Op.RECV, i, ((p, i * AD_SIZE, AD_SIZE),)))
                self.ads.append((self.peer_regions[rid], off, ln, ad))
            else:
                self._done(ev.wr_id - _DATA)
        while self.ads and self.waiting:
            mr, off, ln, ad = self.ads.popleft()
            h, r = self.waiting.popleft()
            if r.length > ln:
                raise MessageTooLarge(f"{r.length} bytes do not fit an advertised {ln}-byte buffer")
            self.qp.post(WorkRequest(Op.WRITE_IMM, _DATA + h, (r.sge(),), (mr, off), ad))

    def send_region(self, r: Region) -> int:
        self._check_size(r.length)
        if not self.has_credit(r.length):
            raise NoCredit(f"{self.spec.selector}: {self.limit} messages already wait for buffers")
        h = self._new_handle()
        self.waiting.append((h, r))
        self.sent += 1
        self.progress()
        return h


class IndirectReceiver(Receiver):
    """Pool of receive buffers advertised to senders on demand and reused across senders."""

    zero_copy_recv = True
    blocking = True

    def __init__(self, fabric, ep, spec, config, nsenders):
        super().__init__(fabric, ep, spec, config)
        self.S = config.slot_size
        self.K = max(config.slot_count, nsenders)
        self.pool = ep.register(self.S * self.K, Access.LOCAL_WRITE | Access.REMOTE_WRITE, owner="channel")
        self.ad_src = ep.register(AD_SIZE, Access.LOCAL_WRITE, owner="channel")
        self.free = deque(range(self.K))
        self.qps = []
        self.per_sender = 1
        self.out_ads = []
        self.rr = 0
        self.arrived = deque()
        self.offered = None
        self.held = set()
        self.ad_at = {}

    def _advertise(self) -> None:
        n = len(self.qps)
        for _ in range(n):
            if not self.free:
                return
            i = self.rr
            self.rr = (i + 1) % n
            while self.free and self.out_ads[i] < self.per_sender:
                k = self.free.popleft()
                self.out_ads[i] += 1
                src = self.ad_src
                for j, v in enumerate((self.pool.id, k * self.S, self.S, k)):
                    src.store_u32(4 * j, v)
                self.ad_at[k] = self.fabric.now
                self.qps[i].post(WorkRequest(Op.SEND, 0, ((src, 0, AD_SIZE),), signaled=False, tag="ctrl"))

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            check_status(ev)
            ev.qp.post_recv(WorkRequest(Op.RECV, 0))
            i = self.qps.index(ev.qp)
            self.out_ads[i] -= 1
            self.arrived.append((ev.imm, ev.byte_len, i))

    def can_receive_region(self):
        if self.offered is not None:
            return self.offered
        self.progress()
        if not self.arrived:
            self._advertise()
            return None
        k, n, i = self.arrived.popleft()
        self.held.add(k)
        slot = Region(self.pool, k * self.S, n, Provenance.CHANNEL_POOL, source=i, tag=k,
                      pulled_at=self.ad_at.pop(k, None))
        self.offered = RegionOption((self.ep.id, self.pool.id, k * self.S), n, k, slot)
        return self.offered

    def receive_region_into(self, o, dst) -> int:
        if o.consumed:
            raise OptionConsumed("option already consumed")
        if dst.length < o.length:
            raise MessageTooLarge(f"destination of {dst.length} bytes is smaller than the {o.length}-byte message")
        o.consumed = True
        if o is self.offered:
            self.offered = None
        slot = o.region
        self.delivered += 1
        if dst.mr is slot.mr and dst.offset == slot.offset:
            out = slot
        else:
            out = Region(dst.mr, dst.offset, o.length, dst.provenance, source=slot.source, pulled_at=slot.pulled_at)
            copy_instrumented(slot, out)
            self._free(o.token)
        h = self._new_handle()
        self._finished[h] = out
        return h

    def _free(self, k):
        if k not in self.held:
            raise ChannelError(f"buffer {k} is not held")
        self.held.discard(k)
        self.free.append(k)
        self.freed += 1

    def release_option(self, r: Region) -> None:
        if r.tag is None:
            return
        self._free(r.tag)
        r.tag = None


def _indirect(spec, fabric, sender_eps, receiver_eps, cfg):
    D = cfg.recv_depth
    senders = []
    receivers = [IndirectReceiver(fabric, rep, spec, cfg, len(sender_eps)) for rep in receiver_eps]
    for sep in sender_eps:
        depth = max(D, len(receiver_eps))
        pool = sep.register(AD_SIZE * depth, Access.LOCAL_WRITE, owner="channel")
        srq = sep.create_srq()
        for i in range(depth):
            srq.post_recv(WorkRequest(Op.RECV, i, ((pool, i * AD_SIZE, AD_SIZE),)))
        for r in receivers:
            s = IndirectSender(fabric, sep, spec, cfg, srq, pool)
            s.qp, rq = connect_handles(s, r, s_srq=srq)
            s.peer_regions = {r.pool.id: r.pool}
            r.qps.append(rq)
            r.out_ads.append(0)
            senders.append(s)
    for r in receivers:
        n = len(r.qps)
        # every sender's advertisement queue is bounded so the sender-side pool never underflows
        r.per_sender = max(1, min(D // len(receiver_eps), r.K // n))
        for rq in r.qps:
            for _ in range(r.per_sender):
                rq.post_recv(WorkRequest(Op.RECV, 0))
    return senders, receivers


@register_family("rslot")
def build(spec, fabric, sender_eps, receiver_eps, cfg, mode):
    if spec.variant == "indirect":
        return _indirect(spec, fabric, sender_eps, receiver_eps, cfg)
    senders, receivers = [], []
    for sep in sender_eps:
        s, rs = _publish_channel(spec, fabric, sep, receiver_eps, cfg)
        senders.append(s)
        receivers.extend(rs)
    if len(receiver_eps) > 1 and len(sender_eps) > 1:
        raise ChannelError("either the sender or the receiver side must be a single endpoint")
    if len(senders) > 1:
        for r in receivers:
            r.retry = False
    return senders, receivers

"""Read rings: the sender appends records to a local readable ring and readers pull them with READ."""

from __future__ import annotations

from collections import deque

from ..fabric import Op, WorkRequest
from ..memory import Access, Region, copy_instrumented, pad4, ring_view
from .core import (
    ChannelError,
    MessageTooLarge,
    NoCredit,
    OptionConsumed,
    Receiver,
    RegionOption,
    SendAckLink,
    Sender,
    WriteAckLink,
    check_status,
    connect_handles,
    default_ack_kind,
    register_family,
)
from .ring import OffsetTail

_HEAD = 1 << 48
_PREFETCH = 2 << 48
_DATA = 3 << 48
_MASK32 = 0xFFFFFFFF


class ReadRingSender(Sender):
    """Single publisher. Records are ``[len][payload][pad]`` (or bare payloads in fixed-size mode)."""

    zero_copy_send = False

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.variant = spec.variant
        self.C = config.ring_capacity
        self.fixed = config.fixed_size if self.variant != "inlined" else None
        self.max_message = self.fixed or config.max_message or self.C // 4
        self.region = ep.register(self.C, Access.LOCAL_WRITE | Access.REMOTE_READ, owner="channel")
        self.ring = ring_view(self.region)
        self.head_mr = None
        if self.variant == "detached":
            self.head_mr = ep.register(8, Access.REMOTE_READ, owner="channel")
        self.head = 0
        self.qps = []
        self.links = []
        self.unnotified = 0

    def record_size(self, n: int) -> int:
        return pad4(self.fixed) if self.fixed else 4 + pad4(n)

    def min_tail(self) -> int:
        return min(l.latest() for l in self.links)

    def _fits(self, n: int) -> bool:
        # the length slot after the record must be free too (it is zeroed before len is set)
        slack = 0 if self.fixed else 4
        return self.head + self.record_size(n) + slack - self.min_tail() <= self.C

    def has_credit(self, length: int = 1) -> bool:
        self.progress()
        return self._fits(length)

    def progress(self) -> None:
        for ev in self.cq.poll(64):
            for l in self.links:
                if l.on_completion(ev):
                    break
            else:
                check_status(ev)
        if self.unnotified:
            self._notify()

    def send_region(self, r: Region) -> int:
        n = r.length
        self._check_size(n)
        if self.fixed and n != self.fixed:
            raise ChannelError(f"fixed-size ring carries {self.fixed}-byte messages, got {n}")
        if n == 0 and not self.fixed:
            raise ChannelError("a zero length marks an empty slot; empty messages cannot be published")
        if not self.has_credit(n):
            raise NoCredit(f"{self.spec.selector}: the slowest reader has not freed enough ring space")
        mr, h0 = self.region, self.head
        size = self.record_size(n)
        if self.fixed:
            copy_instrumented(r, (mr, h0, n))
        else:
            # payload, then zero the next length slot, then set this length
            copy_instrumented(r, (mr, h0 + 4, n))
            mr.store_u32(h0 + size, 0)
            mr.store_u32(h0, n)
        self.head = h0 + size
        if self.head_mr is not None:
            self.head_mr.store_u64(0, self.head)
        h = self._new_handle(waits=0)
        self.sent += 1
        if self.variant == "notify":
            self.unnotified += 1
            if self.unnotified >= self.config.notify_batch:
                self._notify()
        return h

    def _notify(self) -> None:
        self.unnotified = 0
        for qp in self.qps:
            qp.post(WorkRequest(Op.SEND, 0, (), None, self.head & _MASK32, signaled=False))

    def flush(self) -> None:
        if self.unnotified:
            self._notify()


class ReadRingReader(Receiver):
    zero_copy_recv = True

    def __init__(self, fabric, ep, spec, config):
        super().__init__(fabric, ep, spec, config)
        self.variant = spec.variant
        self.blocking = self.variant == "notify"
        self.C = config.ring_capacity
        self.fixed = config.fixed_size if self.variant != "inlined" else None
        self.max_message = self.fixed or config.max_message or self.C // 4
        self.prefetch = max(4, min(config.prefetch_bytes, self.C))
        if config.prefetch_bytes < 4:
            raise ChannelError("prefetch must cover at least the length field")
        self.scratch = ep.register(8, Access.LOCAL_WRITE, owner="channel")
        self.staging = None
        if self.variant == "inlined":
            self.staging = ep.register(self.prefetch, Access.LOCAL_WRITE, owner="channel")
        self.qp = None
        self.link = None
        self.sender = None
        self.pos = 0  # next record to deliver
        self.scan = 0  # next byte not yet parsed (inlined)
        self.ready = deque()  # parsed records: (start, n, staging offset or None, chain start)
        self.fetching = False
        self.fetch_at = 0
        self.reads = 0
        self.empty_reads = 0
        self.records_fetched = 0
        self.known_head = 0
        self.reveals = deque()  # (head, tick the revealing READ was issued)
        self.tail = OffsetTail()
        self.unacked = 0
        self.offered = None
        self.inflight = {}

    # -- discovery ---------------------------------------------------------
    def progress(self) -> None:
        for ev in self.cq.poll(64):
            if self.link.on_completion(ev):
                continue
            check_status(ev)
            if ev.opcode is Op.RECV:
                self.qp.post_recv(WorkRequest(Op.RECV, 0))
                kh = self.known_head
                self.known_head = kh + ((ev.imm - kh) & _MASK32)
                self.reveals.append((self.known_head, None))
            elif ev.wr_id == _HEAD:
                self.fetching = False
                v = self.scratch.load_u64(0)
                if v > self.known_head:
                    self.known_head = v
                    self.reveals.append((v, self.fetch_at))
                else:
                    self.empty_reads += 1
            elif ev.wr_id == _PREFETCH:
                self.fetching = False
                self._parse(ev.byte_len)
            else:
                self._complete(ev.wr_id - _DATA)

    def _parse(self, got: int) -> None:
        st, off, found = self.staging, 0, 0
        while off + 4 <= got:
            n = st.load_u32(off)
            if n == 0:
                break
            size = 4 + pad4(n)
            if off + 4 + n <= got:
                self.ready.append((self.scan, n, off + 4, self.fetch_at))
            else:
                self.ready.append((self.scan, n, None, self.fetch_at))
                self.scan += size
                found += 1
                break
            self.scan += size
            off += size
            found += 1
        self.records_fetched += found
        if not found:
            self.empty_reads += 1

    def _start_fetch(self) -> None:
        s = self.sender
        self.fetching = True
        self.fetch_at = self.fabric.now
        self.reads += 1
        if self.variant == "inlined":
            gl = ((self.staging, 0, self.prefetch),)
            self.qp.post(WorkRequest(Op.READ, _PREFETCH, gl, (s.region, self.scan % self.C)))
        else:
            self.qp.post(WorkRequest(Op.READ, _HEAD, ((self.scratch, 0, 8),), (s.head_mr, 0)))

    def _chain_start(self, start):
        while self.reveals and self.reveals[0][0] <= start:
            self.reveals.popleft()
        return self.reveals[0][1] if self.reveals else None

    # -- zero-copy receive ---------------------------------------------------
    def can_receive_region(self):
        if self.offered is not None:
            return self.offered
        self.progress()
        s = self.sender
        if self.variant == "inlined":
            if not self.ready:
                if not self.fetching:
                    self._lazy_ack()
                    self._start_fetch()
                return None
            start, n, soff, t0 = self.ready.popleft()
            self.offered = RegionOption((s.ep.id, s.region.id, (start + 4) % self.C), n, (start, n, soff, t0))
            return self.offered
        if self.known_head <= self.pos:
            self._lazy_ack()
            if self.variant == "detached" and not self.fetching:
                self._start_fetch()
            return None
        start = self.pos
        if self.fixed:
            n = self.fixed
        else:
            n = min(self.known_head - start - 4, self.max_message)
        self.offered = RegionOption((s.ep.id, s.region.id, start % self.C), n, (start, n, None, self._chain_start(start)))
        return self.offered

    def receive_region_into(self, o, dst) -> int:
        if o.consumed:
            raise OptionConsumed("option already consumed")
        if dst.length < o.length:
            raise MessageTooLarge(f"destination of {dst.length} bytes is smaller than the {o.length}-byte option")
        o.consumed = True
        if o is self.offered:
            self.offered = None
        start, n, soff, t0 = o.token
        h = self._new_handle()
        self._pending[h] = True
        self.inflight[h] = (start, dst, n, t0)
        s = self.sender
        if soff is not None:
            # already fetched by a prefetching READ
            copy_instrumented((self.staging, soff, n), (dst.mr, dst.offset, n))
            self._complete(h)
        elif self.variant == "inlined" or self.fixed:
            off = start + (0 if self.fixed else 4)
            self.qp.post(WorkRequest(Op.READ, _DATA + h, ((dst.mr, dst.offset, n),), (s.region, off % self.C)))
        else:
            # the length is only known once this READ lands; any later records in the window are fetched again
            gl = ((self.scratch, 0, 4), (dst.mr, dst.offset, n))
            self.qp.post(WorkRequest(Op.READ, _DATA + h, gl, (s.region, start % self.C)))
        return h

    def _complete(self, h) -> None:
        start, dst, n, t0 = self.inflight.pop(h)
        self._pending.pop(h, None)
        if self.variant != "inlined" and not self.fixed:
            n = self.scratch.load_u32(0)
        size = pad4(n) if self.fixed else 4 + pad4(n)
        self.pos = start + size
        self.delivered += 1
        self._finished[h] = Region(dst.mr, dst.offset, n, dst.provenance, tag=None, pulled_at=t0)
        # the payload now lives in the reader's memory, so the ring space is freed right away
        self.tail.mark(start, start + size)
        self.freed += 1
        self.unacked += 1
        if self.unacked >= self.config.ack_batch:
            self._publish()

    def _publish(self) -> None:
        self.unacked = 0
        self.link.publish(self.tail.tail)

    def flush(self) -> None:
        self._lazy_ack()

    def _lazy_ack(self) -> None:
        if self.unacked:
            self._publish()

    def release_option(self, r: Region) -> None:
        pass

    @property
    def wait_queue(self):
        return self.cq if self.blocking else None


def _channel(spec, fabric, sep, receiver_eps, cfg):
    s = ReadRingSender(fabric, sep, spec, cfg)
    kind = cfg.ack or default_ack_kind(fabric.profile)
    readers = []
    for rep in receiver_eps:
        r = ReadRingReader(fabric, rep, spec, cfg)
        sq, r.qp = connect_handles(s, r)
        s.qps.append(sq)
        r.sender = s
        if kind == "send":
            link = SendAckLink(r.qp, sq, s.C // 4)
        elif kind == "write":
            link = WriteAckLink(r.qp, sep)
        else:
            raise ChannelError(f"read rings acknowledge with write or send, not {kind!r}")
        r.link = link
        s.links.append(link)
        if spec.variant == "notify":
            for _ in range(s.C // 4):
                r.qp.post_recv(WorkRequest(Op.RECV, 0))
        readers.append(r)
    return s, readers


@register_family("rring")
def build(spec, fabric, sender_eps, receiver_eps, cfg, mode):
    senders, receivers = [], []
    for sep in sender_eps:
        s, rs = _channel(spec, fabric, sep, receiver_eps, cfg)
        senders.append(s)
        receivers.extend(rs)
    if len(senders) > 1 and len(receivers) > len(senders):
        raise ChannelError("read rings have a single writer per ring")
    return senders, receivers

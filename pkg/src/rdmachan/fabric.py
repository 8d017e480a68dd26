"""Deterministic in-process RDMA fabric.

Time is measured in integer ticks. One network traversal (half round trip)
costs ``hrt_cost`` ticks; an RNIC access to a host-memory target region adds
``pcie_rt`` ticks, device-memory targets add nothing.

Application code runs as *actors*: generator functions that yield scheduling
commands (:data:`IDLE`, :class:`Sleep`, :class:`WaitCQ`, :data:`YIELD`).
Actors that are runnable at the same tick are interleaved by a seeded
scheduler, so every run is reproducible from ``(seed, script)``.
"""

from __future__ import annotations

import enum
import heapq
import io
import os
import random
import sys
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .memory import DEFAULT_DEVICE_CAP, MAX_GATHER, Access, Location, MemoryRegion

__all__ = [
    "Op",
    "Status",
    "MessageOrder",
    "ByteOrder",
    "TransportProfile",
    "IB_ROCE",
    "EFA",
    "ONE_RMA",
    "PROFILES",
    "profile_by_name",
    "WorkRequest",
    "CompletionEvent",
    "Counters",
    "CompletionQueue",
    "SharedReceiveQueue",
    "QueuePair",
    "Endpoint",
    "Fabric",
    "FabricClock",
    "GlobalStall",
    "ReorderRejected",
    "Sleep",
    "WaitCQ",
    "IDLE",
    "YIELD",
    "create_fabric",
]


class Op(enum.Enum):
    SEND = "SEND"
    WRITE = "WRITE"
    WRITE_IMM = "WRITE_IMM"
    READ = "READ"
    FETCH_ADD = "FETCH_ADD"
    CMP_SWAP = "CMP_SWAP"
    RECV = "RECV"
    RECV_IMM = "RECV_IMM"  # completion opcode only: a RECV consumed by WRITE_IMM


NETWORK_OPS = frozenset({Op.SEND, Op.WRITE, Op.WRITE_IMM, Op.READ, Op.FETCH_ADD, Op.CMP_SWAP})
ATOMIC_OPS = frozenset({Op.FETCH_ADD, Op.CMP_SWAP})
_REMOTE_FLAG = {
    Op.WRITE: Access.REMOTE_WRITE,
    Op.WRITE_IMM: Access.REMOTE_WRITE,
    Op.READ: Access.REMOTE_READ,
    Op.FETCH_ADD: Access.REMOTE_ATOMIC,
    Op.CMP_SWAP: Access.REMOTE_ATOMIC,
}
_POSTED_KEY = {op: "posted." + op.value for op in Op}
_MASK64 = (1 << 64) - 1


class Status(enum.Enum):
    OK = "OK"
    REMOTE_NO_RECEIVE = "REMOTE_NO_RECEIVE"
    UNSUPPORTED = "UNSUPPORTED"
    ACCESS_ERROR = "ACCESS_ERROR"


class MessageOrder(enum.Enum):
    IN_ORDER = "in-order"
    OUT_OF_ORDER = "out-of-order"


class ByteOrder(enum.Enum):
    IN_ORDER = "in-order"
    RELAXED = "relaxed"


@dataclass(frozen=True)
class TransportProfile:
    name: str
    supported_requests: frozenset
    message_order: MessageOrder
    byte_order_within_message: ByteOrder
    multi_packet_messages: bool
    write_emulated_as_read: bool = False

    def supports(self, op: Op) -> bool:
        return op in self.supported_requests


IB_ROCE = TransportProfile(
    "IB_ROCE", frozenset(NETWORK_OPS), MessageOrder.IN_ORDER, ByteOrder.IN_ORDER, True
)
EFA = TransportProfile(
    "EFA", frozenset({Op.SEND, Op.READ}), MessageOrder.OUT_OF_ORDER, ByteOrder.RELAXED, False
)
ONE_RMA = TransportProfile(
    "ONE_RMA",
    frozenset({Op.READ, Op.WRITE}),
    MessageOrder.OUT_OF_ORDER,
    ByteOrder.RELAXED,
    False,
    write_emulated_as_read=True,
)
PROFILES = {"ib": IB_ROCE, "efa": EFA, "1rma": ONE_RMA}


def profile_by_name(name: str) -> TransportProfile:
    key = name.lower()
    aliases = {"ib_roce": "ib", "roce": "ib", "one_rma": "1rma"}
    key = aliases.get(key, key)
    try:
        return PROFILES[key]
    except KeyError:
        raise ValueError(f"unknown transport profile {name!r}") from None


@dataclass(slots=True)
class WorkRequest:
    """One verb. ``gather_list`` holds ``(MemoryRegion, offset, length)`` triples;
    ``remote_target`` is ``(MemoryRegion, offset)`` on the peer endpoint."""

    kind: Op
    wr_id: int = 0
    gather_list: tuple = ()
    remote_target: Optional[tuple] = None
    imm: Optional[int] = None
    atomic_operand: Optional[int] = None
    swap_operand: Optional[int] = None
    signaled: bool = True
    tag: str = "data"

    @property
    def length(self) -> int:
        return sum(e[2] for e in self.gather_list)


@dataclass(slots=True)
class CompletionEvent:
    wr_id: int
    status: Status
    opcode: Op
    byte_len: int = 0
    imm: Optional[int] = None
    atomic_old_value: Optional[int] = None
    qp: Optional["QueuePair"] = None
    tick: int = 0

    @property
    def ok(self) -> bool:
        return self.status is Status.OK


@dataclass
class FabricClock:
    hrt_cost: int = 10
    pcie_rt: int = 0
    now: int = 0


class GlobalStall(RuntimeError):
    """Every live actor is blocked and no event is pending."""


class ReorderRejected(ValueError):
    pass


class Counters:
    """Monotone per-endpoint counters."""

    __slots__ = ("ep", "_c")

    def __init__(self, ep):
        self.ep = ep
        self._c = defaultdict(int)

    def add(self, key: str, n: int = 1) -> None:
        self._c[key] += n

    def __getitem__(self, key: str) -> int:
        return self._c.get(key, 0)

    def get(self, key: str, default: int = 0) -> int:
        return self._c.get(key, default)

    def snapshot(self) -> dict:
        return dict(self._c)

    def posted(self, tag: Optional[str] = None) -> int:
        """Network requests posted, optionally restricted to one tag."""
        if tag is not None:
            return self._c.get("posted.tag." + tag, 0)
        return sum(self._c.get(_POSTED_KEY[op], 0) for op in NETWORK_OPS)

    def verbs(self, tag: str) -> set:
        """Request kinds posted under ``tag``."""
        pre = "posted." + tag + "."
        return {Op(k[len(pre):]) for k, v in self._c.items() if v and k.startswith(pre)}

    def reset(self) -> None:
        self._c.clear()


class Sleep:
    __slots__ = ("ticks",)

    def __init__(self, ticks: int):
        if ticks < 0:
            raise ValueError("negative sleep")
        self.ticks = ticks


class WaitCQ:
    """Block the actor until the queue holds at least one event (not consumed)."""

    __slots__ = ("cq",)

    def __init__(self, cq: "CompletionQueue"):
        self.cq = cq


class _Marker:
    __slots__ = ("name",)

    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name


IDLE = _Marker("IDLE")  # busy-poll: resume after the next fabric event
YIELD = _Marker("YIELD")  # give other runnable actors a turn at the same tick


class CompletionQueue:
    __slots__ = ("ep", "name", "_q", "_waiters")

    def __init__(self, ep: "Endpoint", name: str = "cq"):
        self.ep = ep
        self.name = name
        self._q = deque()
        self._waiters = []

    def __len__(self) -> int:
        return len(self._q)

    def _push(self, ev: CompletionEvent) -> None:
        self._q.append(ev)
        if self._waiters:
            fab = self.ep.fabric
            for actor in self._waiters:
                fab._make_ready(actor)
            self._waiters.clear()

    def poll(self, max_events: int = 16) -> list:
        """Non-blocking poll; every call counts as one CPU polling loop."""
        self.ep.counters.add("cq_polls")
        q = self._q
        if not q:
            return []
        out = []
        while q and len(out) < max_events:
            out.append(q.popleft())
        return out

    def pop(self) -> CompletionEvent:
        return self._q.popleft()


class SharedReceiveQueue:
    __slots__ = ("ep", "_rq")

    def __init__(self, ep):
        self.ep = ep
        self._rq = deque()

    def __len__(self):
        return len(self._rq)

    def post_recv(self, wr: WorkRequest) -> None:
        self.ep.counters.add(_POSTED_KEY[Op.RECV])
        self._rq.append(wr)


class QueuePair:
    __slots__ = ("id", "ep", "peer", "send_cq", "recv_cq", "srq", "_rq", "_horizon")

    def __init__(self, qp_id, ep, send_cq, recv_cq, srq=None):
        self.id = qp_id
        self.ep = ep
        self.peer: Optional[QueuePair] = None
        self.send_cq = send_cq
        self.recv_cq = recv_cq
        self.srq = srq
        self._rq = deque()
        self._horizon = 0  # chunk-only reordering keeps messages of one QP in order

    def __repr__(self):
        return f"<QP {self.id} {self.ep.name}->{self.peer.ep.name if self.peer else '?'}>"

    @property
    def remote(self) -> "Endpoint":
        return self.peer.ep

    def post(self, wr: WorkRequest) -> None:
        self.ep.fabric._post(self, wr)

    def post_recv(self, wr: WorkRequest) -> None:
        if self.srq is not None:
            self.srq.post_recv(wr)
            return
        self.ep.counters.add(_POSTED_KEY[Op.RECV])
        self._rq.append(wr)

    @property
    def posted_recvs(self) -> int:
        return len(self.srq) if self.srq is not None else len(self._rq)

    def _take_recv(self):
        rq = self.srq._rq if self.srq is not None else self._rq
        return rq.popleft() if rq else None


class Endpoint:
    def __init__(self, fabric: "Fabric", ep_id: int, name: str):
        self.fabric = fabric
        self.id = ep_id
        self.name = name
        self.counters = Counters(self)
        self.regions: dict = {}
        self.cq = CompletionQueue(self, "default")
        self.device_used = 0
        self._default_qps: dict = {}

    def __repr__(self):
        return f"<Endpoint {self.id} {self.name}>"

    def register(self, length: int, access=Access.NONE, location=Location.HOST, owner: str = "app") -> MemoryRegion:
        """Register a zero-initialised region of ``length`` bytes."""
        if length <= 0:
            raise ValueError("region length must be positive")
        if isinstance(location, str):
            location = Location(location)
        if location is Location.DEVICE:
            if self.device_used + length > self.fabric.device_cap:
                raise MemoryError(
                    f"device memory cap of {self.fabric.device_cap} bytes exceeded on {self.name}"
                )
            self.device_used += length
        rid = self.fabric._next_region_id()
        mr = MemoryRegion(rid, self, length, access, location, owner)
        self.regions[rid] = mr
        self.counters.add("registered_bytes", length)
        self.counters.add("registered_bytes." + owner, length)
        return mr

    def create_cq(self, name: str = "cq") -> CompletionQueue:
        return CompletionQueue(self, name)

    def create_srq(self) -> SharedReceiveQueue:
        return SharedReceiveQueue(self)

    def connect(self, peer: "Endpoint", **kw):
        return self.fabric.connect(self, peer, **kw)

    def default_qp(self, peer: "Endpoint") -> QueuePair:
        qp = self._default_qps.get(peer.id)
        if qp is None:
            qp, rqp = self.fabric.connect(self, peer)
            self._default_qps[peer.id] = qp
            peer._default_qps[self.id] = rqp
        return qp

    def post(self, wr: WorkRequest, peer: Optional["Endpoint"] = None) -> None:
        """Post on the default connection; the peer is implied by a remote target."""
        if peer is None:
            if wr.remote_target is None:
                raise ValueError(f"{wr.kind.value} without remote target needs an explicit peer")
            peer = wr.remote_target[0].owner
        self.default_qp(peer).post(wr)

    def post_recv(self, wr: WorkRequest, peer: "Endpoint") -> None:
        self.default_qp(peer).post_recv(wr)

    def poll_cq(self, max_events: int = 16) -> list:
        return self.cq.poll(max_events)

    @property
    def registered_bytes(self) -> int:
        return self.counters["registered_bytes"]


class Actor:
    __slots__ = ("name", "gen", "ep", "state", "value", "done", "result")

    def __init__(self, name, gen, ep):
        self.name = name
        self.gen = gen
        self.ep = ep
        self.state = "ready"
        self.value = None
        self.done = False
        self.result = None

    def __repr__(self):
        return f"<Actor {self.name} {self.state}>"


_REORDER_POLICIES = ("none", "shuffle_messages", "shuffle_bytes")


class Fabric:
    """Event loop, clock, endpoints and request execution."""

    def __init__(
        self,
        profile: TransportProfile = IB_ROCE,
        seed: int = 0,
        hrt_cost: int = 10,
        pcie_rt: int = 0,
        chunk_size: int = 4096,
        device_cap: int = DEFAULT_DEVICE_CAP,
        trace: Optional[bool] = None,
    ):
        if hrt_cost <= 0:
            raise ValueError("hrt_cost must be positive")
        if pcie_rt < 0:
            raise ValueError("pcie_rt must be non-negative")
        self.profile = profile
        self.seed = seed
        self.hrt_cost = hrt_cost
        self.pcie_rt = pcie_rt
        self.chunk_size = chunk_size
        self.device_cap = device_cap
        self.now = 0
        self.endpoints: list = []
        self._heap: list = []
        self._seq = 0
        self._region_ids = 0
        self._qp_ids = 0
        self._ready: list = []
        self._idle: list = []
        self._actors: list = []
        self._live = 0
        self._sched_rng = random.Random(seed * 4 + 1)
        self._reorder_rng = random.Random(seed * 4 + 2)
        self.reorder_policy = "none"
        self.reorder_window = 1
        if trace is None:
            trace = os.environ.get("RDMA_CHAN_TRACE") == "1"
        self._trace_stderr = trace
        self.trace_lines: Optional[list] = [] if trace else None

    # -- construction -------------------------------------------------------

    @property
    def clock(self) -> FabricClock:
        return FabricClock(self.hrt_cost, self.pcie_rt, self.now)

    def endpoint(self, name: Optional[str] = None) -> Endpoint:
        ep = Endpoint(self, len(self.endpoints), name or f"ep{len(self.endpoints)}")
        self.endpoints.append(ep)
        return ep

    def _next_region_id(self) -> int:
        self._region_ids += 1
        return self._region_ids

    def connect(self, a: Endpoint, b: Endpoint, a_send_cq=None, a_recv_cq=None, b_send_cq=None,
                b_recv_cq=None, a_srq=None, b_srq=None):
        """Create a connected queue-pair pair; returns ``(qp_at_a, qp_at_b)``."""
        self._qp_ids += 1
        pick = lambda cq, ep: ep.cq if cq is None else cq  # noqa: E731  (an empty CQ is falsy)
        qa = QueuePair(self._qp_ids, a, pick(a_send_cq, a), pick(a_recv_cq, a), a_srq)
        self._qp_ids += 1
        qb = QueuePair(self._qp_ids, b, pick(b_send_cq, b), pick(b_recv_cq, b), b_srq)
        qa.peer = qb
        qb.peer = qa
        return qa, qb

    def enable_trace(self) -> None:
        if self.trace_lines is None:
            self.trace_lines = []

    def inject_reorder(self, policy: str, window: int = 2, force: bool = False) -> None:
        """Permute in-flight deliveries pseudo-randomly (fault injection).

        Each delivery is delayed by ``randrange(window)`` ticks and same-tick
        arrivals are tie-broken at random. ``shuffle_bytes`` additionally places
        the chunks of one message in a shuffled order on consecutive ticks.
        With ``window == 1`` only the chunks move: messages of one queue pair
        still land in posting order.
        """
        if policy not in _REORDER_POLICIES:
            raise ValueError(f"unknown reorder policy {policy!r}")
        if window < 1:
            raise ValueError("window must be at least 1")
        if not force:
            if policy != "none" and self.profile.message_order is MessageOrder.IN_ORDER:
                raise ReorderRejected(f"{self.profile.name} delivers messages in order")
            if policy == "shuffle_bytes" and self.profile.byte_order_within_message is ByteOrder.IN_ORDER:
                raise ReorderRejected(f"{self.profile.name} delivers bytes in order")
        self.reorder_policy = policy
        self.reorder_window = window

    # -- event machinery ----------------------------------------------------

    def schedule(self, delay: int, fn: Callable, *args, prio: float = 0.0) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.now + delay, prio, self._seq, fn, args))

    def _arrival(self):
        """Delay and tie-break key for one network delivery under the reorder policy."""
        if self.reorder_policy == "none":
            return 0, 0.0
        if self.reorder_window == 1:
            return 0, 0.0
        rng = self._reorder_rng
        return rng.randrange(self.reorder_window), rng.random()

    def _complete(self, cq: CompletionQueue, ev: CompletionEvent) -> None:
        ev.tick = self.now
        if self.trace_lines is not None:
            line = (
                f"tick={self.now} ep={cq.ep.id} kind={ev.opcode.value} wr={ev.wr_id} "
                f"status={ev.status.value} len={ev.byte_len} imm={'-' if ev.imm is None else ev.imm}"
            )
            self.trace_lines.append(line)
            if self._trace_stderr:
                print(line, file=sys.stderr)
        cq._push(ev)

    # -- request execution --------------------------------------------------

    def _post(self, qp: QueuePair, wr: WorkRequest) -> None:
        ep = qp.ep
        c = ep.counters
        k = wr.kind
        if k is Op.RECV or k is Op.RECV_IMM:
            raise ValueError("receive requests are posted with post_recv")
        c.add(_POSTED_KEY[k])
        c.add("posted.tag." + wr.tag)
        c.add("posted." + wr.tag + "." + k.value)
        if k not in self.profile.supported_requests:
            self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.UNSUPPORTED, k, qp=qp))
            return
        gl = wr.gather_list
        if len(gl) > MAX_GATHER:
            raise ValueError(f"gather list has {len(gl)} entries, limit is {MAX_GATHER}")
        total = 0
        for mr, off, ln in gl:
            if mr.owner is not ep:
                raise ValueError(f"gather region {mr.id} is not registered on {ep.name}")
            total += ln
        if total > 1 << 31:
            raise ValueError("message longer than 2^31 bytes")
        h = self.hrt_cost
        if k is Op.SEND:
            if wr.remote_target is not None:
                raise ValueError("SEND carries no remote target")
            payload = _gather(gl, total)
            delay, prio = self._arrival()
            c.add("hrts", 1)
            c.add("dma_bytes", total)
            # the payload lands in a posted receive buffer, which lives in host memory
            pcie = self.pcie_rt if total else 0
            if pcie:
                c.add("pcie_round_trips")
            at = h + delay + pcie
            if self.reorder_policy == "shuffle_bytes" and self.reorder_window == 1:
                at = max(at, qp._horizon - self.now)
                qp._horizon = self.now + at
            self.schedule(at, self._deliver_send, qp, wr, payload, prio=prio)
            return
        if wr.remote_target is None:
            raise ValueError(f"{k.value} requires a remote target")
        tmr, toff = wr.remote_target
        if tmr.owner is not qp.peer.ep:
            raise ValueError(f"target region {tmr.id} is not on the connected peer")
        pcie = self.pcie_rt if tmr.location is Location.HOST else 0
        delay, prio = self._arrival()
        if k in ATOMIC_OPS:
            if toff % 8:
                raise ValueError("atomic target must be 8-byte aligned")
            if total not in (0, 8):
                raise ValueError("atomics address exactly 8 bytes")
            if wr.atomic_operand is None:
                raise ValueError("atomic request without operand")
            if gl and not gl[0][0].access & Access.LOCAL_WRITE:
                self._fail_later(qp, wr, h, prio)
                return
            if not tmr.access & Access.REMOTE_ATOMIC:
                self._fail_later(qp, wr, h + delay, prio)
                return
            c.add("hrts", 2)
            if pcie:
                c.add("pcie_round_trips")
            self.schedule(h + delay + pcie, self._atomic_exec, qp, wr, prio=prio)
            return
        if k is Op.READ:
            for mr, _, _ in gl:
                if not mr.access & Access.LOCAL_WRITE:
                    self._fail_later(qp, wr, h, prio)
                    return
            if not tmr.access & Access.REMOTE_READ:
                self._fail_later(qp, wr, h + delay, prio)
                return
            c.add("hrts", 2)
            c.add("dma_bytes", total)
            if pcie:
                c.add("pcie_round_trips")
            self.schedule(h + delay + pcie, self._read_exec, qp, wr, total, prio=prio)
            return
        # WRITE / WRITE_IMM
        if not tmr.access & Access.REMOTE_WRITE:
            self._fail_later(qp, wr, h + delay, prio)
            return
        payload = _gather(gl, total)
        hops = 1
        if self.profile.write_emulated_as_read and k is Op.WRITE:
            hops = 4
            c.add("read_trips", 2)
        c.add("hrts", hops)
        c.add("dma_bytes", total)
        if pcie:
            c.add("pcie_round_trips")
        first = hops * h + delay + pcie
        chunk_only = self.reorder_policy == "shuffle_bytes" and self.reorder_window == 1
        if chunk_only:
            first = max(first, qp._horizon - self.now)
            qp._horizon = self.now + first
        if (
            self.reorder_policy == "shuffle_bytes"
            and total > self.chunk_size
        ):
            cs = self.chunk_size
            chunks = [(i, min(cs, total - i)) for i in range(0, total, cs)]
            self._reorder_rng.shuffle(chunks)
            if k is Op.WRITE_IMM and not self._has_recv(qp.peer):
                self.schedule(first, self._write_done, qp, wr, payload, total, False, prio=prio)
                return
            if chunk_only:
                qp._horizon = self.now + first + len(chunks) - 1
            for n, (start, ln) in enumerate(chunks):
                last = n == len(chunks) - 1
                self.schedule(first + n, self._place_chunk, qp, wr, payload, start, ln, total, last, prio=prio)
            return
        self.schedule(first, self._write_done, qp, wr, payload, total, True, prio=prio)

    def _fail_later(self, qp, wr, delay, prio):
        self.schedule(delay, self._complete, qp.send_cq,
                      CompletionEvent(wr.wr_id, Status.ACCESS_ERROR, wr.kind, qp=qp), prio=prio)

    @staticmethod
    def _has_recv(qp: QueuePair) -> bool:
        return qp.posted_recvs > 0

    def _deliver_send(self, qp: QueuePair, wr: WorkRequest, payload: bytes) -> None:
        rqp = qp.peer
        rwr = rqp._take_recv()
        if rwr is None:
            self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.REMOTE_NO_RECEIVE, Op.SEND, qp=qp))
            return
        n = len(payload)
        room = sum(e[2] for e in rwr.gather_list)
        if n > room or (n and any(not e[0].access & Access.LOCAL_WRITE for e in rwr.gather_list)):
            self._complete(rqp.recv_cq, CompletionEvent(rwr.wr_id, Status.ACCESS_ERROR, Op.RECV, qp=rqp))
            self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.ACCESS_ERROR, Op.SEND, qp=qp))
            return
        pos = 0
        for mr, off, ln in rwr.gather_list:
            if pos >= n:
                break
            take = min(ln, n - pos)
            mr.dma_write(off, payload[pos : pos + take])
            pos += take
        rqp.ep.counters.add("recv_completions")
        self._complete(rqp.recv_cq, CompletionEvent(rwr.wr_id, Status.OK, Op.RECV, n, wr.imm, qp=rqp))
        if wr.signaled:
            self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.OK, Op.SEND, n, qp=qp))

    def _place_chunk(self, qp, wr, payload, start, ln, total, last):
        tmr, toff = wr.remote_target
        tmr.dma_write(toff + start, payload[start : start + ln])
        if last:
            self._write_done(qp, wr, payload, total, False)

    def _write_done(self, qp: QueuePair, wr: WorkRequest, payload: bytes, total: int, place: bool) -> None:
        rqp = qp.peer
        if wr.kind is Op.WRITE_IMM:
            rwr = rqp._take_recv()
            if rwr is None:
                self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.REMOTE_NO_RECEIVE, wr.kind, qp=qp))
                return
            if place:
                tmr, toff = wr.remote_target
                tmr.dma_write(toff, payload)
            rqp.ep.counters.add("recv_completions")
            self._complete(rqp.recv_cq, CompletionEvent(rwr.wr_id, Status.OK, Op.RECV_IMM, total, wr.imm, qp=rqp))
        elif place:
            tmr, toff = wr.remote_target
            tmr.dma_write(toff, payload)
        if wr.signaled:
            self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.OK, wr.kind, total, qp=qp))

    def _read_exec(self, qp: QueuePair, wr: WorkRequest, total: int) -> None:
        tmr, toff = wr.remote_target
        snapshot = tmr.dma_read(toff, total)
        self.schedule(self.hrt_cost, self._read_done, qp, wr, snapshot)

    def _read_done(self, qp: QueuePair, wr: WorkRequest, snapshot: bytes) -> None:
        pos = 0
        for mr, off, ln in wr.gather_list:
            mr.dma_write(off, snapshot[pos : pos + ln])
            pos += ln
        if wr.signaled:
            self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.OK, Op.READ, len(snapshot), qp=qp))

    def _atomic_exec(self, qp: QueuePair, wr: WorkRequest) -> None:
        tmr, toff = wr.remote_target
        old = int.from_bytes(tmr.dma_read(toff, 8), "little")
        if wr.kind is Op.FETCH_ADD:
            new = (old + wr.atomic_operand) & _MASK64
        else:
            new = (wr.swap_operand or 0) & _MASK64 if old == wr.atomic_operand else old
        tmr.dma_write(toff, new.to_bytes(8, "little"))
        self.schedule(self.hrt_cost, self._atomic_done, qp, wr, old)

    def _atomic_done(self, qp: QueuePair, wr: WorkRequest, old: int) -> None:
        if wr.gather_list:
            mr, off, _ = wr.gather_list[0]
            mr.dma_write(off, old.to_bytes(8, "little"))
        if wr.signaled:
            self._complete(qp.send_cq, CompletionEvent(wr.wr_id, Status.OK, wr.kind, 8, atomic_old_value=old, qp=qp))

    # -- actors -------------------------------------------------------------

    def spawn(self, gen, name: Optional[str] = None, ep: Optional[Endpoint] = None) -> Actor:
        actor = Actor(name or f"actor{len(self._actors)}", gen, ep)
        self._actors.append(actor)
        self._live += 1
        self._ready.append(actor)
        return actor

    def _make_ready(self, actor: Actor) -> None:
        actor.state = "ready"
        self._ready.append(actor)

    def _wake(self, actor: Actor) -> None:
        self._make_ready(actor)

    def sleep(self, ticks: int) -> Sleep:
        return Sleep(ticks)

    def wait_cq(self, target):
        """Generator: block until an event is available on ``target`` and return it.

        Waiting does not spin, so no polling loop is recorded.
        """
        cq = target.cq if isinstance(target, Endpoint) else target
        while not cq._q:
            yield WaitCQ(cq)
        return cq.pop()

    def _step(self, actor: Actor) -> None:
        try:
            cmd = actor.gen.send(actor.value)
        except StopIteration as stop:
            actor.done = True
            actor.state = "done"
            actor.result = stop.value
            self._live -= 1
            return
        actor.value = None
        if cmd is IDLE or cmd is None:
            actor.state = "idle"
            self._idle.append(actor)
            if actor.ep is not None:
                actor.ep.counters.add("idle_polls")
        elif cmd is YIELD:
            self._ready.append(actor)
        elif type(cmd) is WaitCQ:
            if cmd.cq._q:
                self._ready.append(actor)
            else:
                actor.state = "wait_cq"
                cmd.cq._waiters.append(actor)
        elif type(cmd) is Sleep:
            actor.state = "sleep"
            self.schedule(cmd.ticks, self._wake, actor)
        else:
            raise TypeError(f"actor {actor.name} yielded unsupported command {cmd!r}")

    def run(self, until: Optional[int] = None, max_events: Optional[int] = None) -> int:
        """Run until every actor finished and no event is pending.

        Raises :class:`GlobalStall` when live actors remain but nothing can
        ever wake them. Returns the final tick.
        """
        heap = self._heap
        ready = self._ready
        rng = self._sched_rng
        pop = heapq.heappop
        budget = max_events
        while True:
            while ready:
                n = len(ready)
                if n == 1:
                    actor = ready.pop()
                else:
                    i = rng.randrange(n)
                    actor = ready[i]
                    ready[i] = ready[-1]
                    ready.pop()
                self._step(actor)
            if not heap:
                if self._live:
                    blocked = [a for a in self._actors if not a.done]
                    raise GlobalStall(
                        "global stall at tick %d: %s" % (self.now, ", ".join(f"{a.name}({a.state})" for a in blocked))
                    )
                return self.now
            t = heap[0][0]
            if until is not None and t > until:
                self.now = until
                return self.now
            self.now = t
            while heap and heap[0][0] == t:
                item = pop(heap)
                item[3](*item[4])
                if budget is not None:
                    budget -= 1
                    if budget <= 0:
                        return self.now
            if self._idle:
                for a in self._idle:
                    a.state = "ready"
                ready.extend(self._idle)
                self._idle = []

    @property
    def quiescent(self) -> bool:
        return not self._heap and not self._ready

    def drain(self) -> int:
        """Run pending events when no actors are involved."""
        return self.run()

    # -- dumps --------------------------------------------------------------

    def dump_trace(self) -> str:
        return "\n".join(self.trace_lines or []) + ("\n" if self.trace_lines else "")

    def dump_counters(self) -> str:
        buf = io.StringIO()
        buf.write("endpoint,metric,value\n")
        for ep in self.endpoints:
            for key in sorted(ep.counters.snapshot()):
                buf.write(f"{ep.id},{key},{ep.counters[key]}\n")
        return buf.getvalue()

    def reset_counters(self) -> None:
        if self._heap or self._live:
            raise RuntimeError("counters can only be reset between workloads")
        for ep in self.endpoints:
            ep.counters.reset()


def _gather(gl: Iterable, total: int) -> bytes:
    if len(gl) == 1:
        mr, off, ln = gl[0]
        return mr.dma_read(off, ln)
    parts = [mr.dma_read(off, ln) for mr, off, ln in gl]
    return b"".join(parts)


def create_fabric(profile: TransportProfile = IB_ROCE, seed: int = 0, hrt_cost: int = 10, pcie_rt: int = 0,
                  **kw) -> Fabric:
    return Fabric(profile, seed=seed, hrt_cost=hrt_cost, pcie_rt=pcie_rt, **kw)

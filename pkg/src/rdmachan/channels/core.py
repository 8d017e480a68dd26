"""Uniform channel API, declared capabilities, and requirement checking."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Optional, Sequence, Union

from ..fabric import (
    ByteOrder,
    CompletionQueue,
    Endpoint,
    Fabric,
    MessageOrder,
    Op,
    Status,
    TransportProfile,
    WorkRequest,
)
from ..memory import Access, Location, MemoryRegion, Provenance, Region

__all__ = [
    "ChannelError",
    "RequirementUnmet",
    "MessageTooLarge",
    "NoCredit",
    "UnknownHandle",
    "DoubleFree",
    "OptionConsumed",
    "Family",
    "MemClass",
    "AtLeast",
    "Either",
    "NA",
    "ChannelSpec",
    "RegionOption",
    "ChannelConfig",
    "TABLE2",
    "SELECTORS",
    "spec_for",
    "check_requirements",
    "open_channel",
    "open_fanin",
    "open_fanout",
    "register_family",
]


class ChannelError(Exception):
    pass


class RequirementUnmet(ChannelError):
    def __init__(self, selector: str, missing: Sequence[str]):
        self.selector = selector
        self.missing = list(missing)
        super().__init__(f"{selector}: requirement unmet: {', '.join(self.missing)}")


class MessageTooLarge(ChannelError):
    pass


class NoCredit(ChannelError):
    pass


class UnknownHandle(ChannelError):
    pass


class DoubleFree(ChannelError):
    pass


class OptionConsumed(ChannelError):
    pass


class Family(enum.Enum):
    SEND_RECV = "sendrecv"
    WRITE_SLOT = "wslot"
    RING = "ring"
    SHARED_RING = "sring"
    READ_SLOT = "rslot"
    READ_RING = "rring"


class MemClass(enum.Enum):
    O1 = "O(1)"
    ON = "O(N)"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class AtLeast:
    """A lower-bound cell (``>=n``)."""

    value: int

    def __str__(self):
        return f">={self.value}"

    def admits(self, measured) -> bool:
        return measured >= self.value


@dataclass(frozen=True)
class Either:
    """A cell whose value depends on the composed second channel, e.g. ``(yes/no)``."""

    options: tuple

    def __str__(self):
        return "(" + "/".join(_fmt(o) for o in self.options) + ")"

    def admits(self, measured) -> bool:
        return measured in self.options


class _NA:
    def __repr__(self):
        return "NA"

    __str__ = __repr__


NA = _NA()


def _fmt(v) -> str:
    if v is True:
        return "yes"
    if v is False:
        return "no"
    if isinstance(v, (frozenset, set)):
        return "+".join(sorted(v)) if v else "none"
    if isinstance(v, MemClass):
        return v.value
    return str(v)


def admits(declared, measured) -> bool:
    if isinstance(declared, (AtLeast, Either)):
        return declared.admits(measured)
    return declared == measured


_ORDER_LABEL = {"MESSAGES": "Messages", "BYTES": "Bytes"}
VERB_LABEL = {
    Op.SEND: "Send",
    Op.WRITE: "Write",
    Op.WRITE_IMM: "Write",
    Op.READ: "Read",
    Op.FETCH_ADD: "Atomic",
    Op.CMP_SWAP: "Atomic",
}


@dataclass(frozen=True)
class ChannelSpec:
    """One row of the channel feature table plus the concrete verbs the build uses."""

    selector: str
    family: Family
    variant: str
    hrt_latency: Union[int, AtLeast]
    requests_send: Union[int, AtLeast]
    requests_recv: Union[int, AtLeast]
    blocking_recv: Union[bool, Either]
    zero_copy_send: object
    zero_copy_recv: object
    variable_size: object
    mem_1toN: MemClass
    mem_Nto1: MemClass
    table_requests: frozenset
    required_ordering: Union[frozenset, Either]
    # verbs used by the concrete implementation, including the composed second channel
    required_requests: frozenset = frozenset()
    composed_requests: frozenset = frozenset()
    resolution: tuple = ()

    def effective(self) -> "ChannelSpec":
        """The row with every conditional cell resolved to the composition this build uses."""
        if not self.resolution:
            return self
        return replace(self, **dict(self.resolution), resolution=())

    @property
    def ordering(self) -> frozenset:
        eff = self.effective()
        return eff.required_ordering

    def row(self) -> dict:
        return {
            "channel": self.selector,
            "hrt": _fmt(self.hrt_latency),
            "req_send": _fmt(self.requests_send),
            "req_recv": _fmt(self.requests_recv),
            "blocking_recv": _fmt(self.blocking_recv),
            "zc_send": _fmt(self.zero_copy_send),
            "zc_recv": _fmt(self.zero_copy_recv),
            "variable": _fmt(self.variable_size),
            "mem_1toN": _fmt(self.mem_1toN),
            "mem_Nto1": _fmt(self.mem_Nto1),
            "requests": _fmt(self.table_requests | self.composed_requests),
            "ordering": _fmt(
                frozenset(_ORDER_LABEL[o] for o in self.required_ordering)
                if isinstance(self.required_ordering, frozenset)
                else self.required_ordering
            ),
        }


M = frozenset({"MESSAGES"})
B = frozenset({"BYTES"})
NO = frozenset()
YN = Either((True, False))
O1, ON = MemClass.O1, MemClass.ON


def _row(sel, fam, hrt, rs, rr, blk, zs, zr, var, m1n, mn1, reqs, order, verbs, composed=(), **res):
    variant = sel.split(".", 1)[1]
    return ChannelSpec(
        sel, fam, variant, hrt, rs, rr, blk, zs, zr, var, m1n, mn1,
        frozenset(reqs), order, frozenset(verbs), frozenset(composed), tuple(sorted(res.items())),
    )


F = Family
TABLE2: Dict[str, ChannelSpec] = {
    s.selector: s
    for s in [
        _row("sendrecv.normal", F.SEND_RECV, 1, 1, 0, True, True, False, False, O1, ON, {"Send"}, NO, {Op.SEND}),
        _row("sendrecv.shared", F.SEND_RECV, 1, 1, 0, True, True, False, False, O1, O1, {"Send"}, NO, {Op.SEND}),
        _row("sendrecv.bufferless", F.SEND_RECV, 1, 1, 0, True, NA, NA, NA, O1, O1, {"Send"}, NO, {Op.SEND}),
        _row("wslot.detached", F.WRITE_SLOT, 1, 2, 0, YN, True, True, False, O1, ON, {"Write"}, M, {Op.WRITE},
             blocking_recv=False),
        _row("wslot.inlined", F.WRITE_SLOT, 1, 1, 0, False, True, True, False, O1, ON, {"Write"}, B, {Op.WRITE}),
        _row("wslot.imm", F.WRITE_SLOT, 1, 1, 0, True, True, True, False, O1, ON, {"Write"}, NO, {Op.WRITE_IMM}),
        _row("wslot.reserve", F.WRITE_SLOT, 3, AtLeast(2), 1, YN, True, True, False, O1, O1, {"Write"},
             Either((NO, frozenset({"MESSAGES"}))), {Op.WRITE_IMM, Op.SEND}, {"Send"},
             blocking_recv=True, required_ordering=NO),
        _row("ring.detached", F.RING, 1, 2, 0, False, True, False, True, O1, ON, {"Write"}, M, {Op.WRITE}),
        _row("ring.imm", F.RING, 1, 1, 0, True, True, False, True, O1, ON, {"Write"}, NO, {Op.WRITE_IMM}),
        _row("ring.zeroing", F.RING, 1, 1, 0, False, True, False, True, O1, ON, {"Write"}, B, {Op.WRITE}),
        _row("ring.nozeroing", F.RING, 1, 1, 0, False, True, False, True, O1, ON, {"Write"}, M | B, {Op.WRITE}),
        _row("sring.imm", F.SHARED_RING, 3, AtLeast(2), 0, True, True, False, True, O1, O1, {"Write", "Atomic"},
             NO, {Op.WRITE_IMM, Op.FETCH_ADD}),
        _row("sring.zeroing", F.SHARED_RING, 3, AtLeast(2), 0, False, True, False, True, O1, O1,
             {"Write", "Atomic"}, B, {Op.WRITE, Op.FETCH_ADD}),
        _row("rslot.detached", F.READ_SLOT, AtLeast(4), 0, AtLeast(2), False, True, True, True, O1, O1, {"Read"},
             NO, {Op.READ}),
        _row("rslot.inlined", F.READ_SLOT, AtLeast(2), 0, AtLeast(1), False, True, True, False, O1, O1, {"Read"},
             NO, {Op.READ}),
        _row("rslot.notify", F.READ_SLOT, 3, 1, 1, YN, True, True, True, O1, O1, {"Read"}, NO, {Op.READ, Op.SEND},
             {"Send"}, blocking_recv=True),
        _row("rslot.indirect", F.READ_SLOT, 2, 1, 1, YN, True, True, False, O1, O1, {"Write"},
             Either((NO, frozenset({"MESSAGES"}))), {Op.WRITE_IMM, Op.SEND}, {"Send"},
             blocking_recv=True, required_ordering=NO),
        _row("rring.detached", F.READ_RING, AtLeast(4), 0, AtLeast(2), False, False, True, True, O1, O1, {"Read"},
             NO, {Op.READ}),
        _row("rring.inlined", F.READ_RING, AtLeast(4), 0, AtLeast(2), False, False, True, True, O1, O1, {"Read"},
             NO, {Op.READ}),
        _row("rring.notify", F.READ_RING, 3, 1, 1, YN, False, True, True, O1, O1, {"Read"}, NO,
             {Op.READ, Op.SEND}, {"Send"}, blocking_recv=True),
    ]
}
SELECTORS = tuple(TABLE2)


def spec_for(selector: str) -> ChannelSpec:
    try:
        return TABLE2[selector]
    except KeyError:
        raise ChannelError(f"unknown channel selector {selector!r}") from None


def check_requirements(spec: ChannelSpec, profile: TransportProfile, enforce_ordering: bool = True) -> list:
    """Names of unmet transport requirements (empty when the profile fits)."""
    missing = []
    for op in sorted(spec.required_requests, key=lambda o: o.value):
        if op not in profile.supported_requests:
            missing.append(f"{op.value} unsupported")
    if enforce_ordering:
        order = spec.effective().required_ordering
        if "MESSAGES" in order and profile.message_order is not MessageOrder.IN_ORDER:
            missing.append("in-order message delivery")
        if "BYTES" in order and profile.byte_order_within_message is not ByteOrder.IN_ORDER:
            missing.append("in-order byte delivery")
    return missing


@dataclass
class RegionOption:
    """A pending message that can be received without moving its payload yet."""

    source: tuple  # (endpoint id, region id, offset)
    length: int
    token: object = None
    region: Optional[Region] = None  # in-place destination, if the channel already owns one
    consumed: bool = False


@dataclass
class ChannelConfig:
    slot_size: int = 256
    slot_count: int = 16
    ring_capacity: int = 4096
    recv_depth: int = 16
    ack_batch: int = 1
    prefetch_bytes: int = 4
    head_loc: Location = Location.HOST
    tail_loc: Location = Location.HOST
    write_delay: int = 0
    fixed_size: Optional[int] = None
    notify_batch: int = 1
    ack: Optional[str] = None  # "write" | "send" | "read"; None = family default
    max_message: Optional[int] = None

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ChannelConfig":
        if d is None:
            return cls()
        if isinstance(d, cls):
            return d
        kw = {}
        for k, v in d.items():
            k = k.replace("rring.", "").replace("-", "_")
            if k in ("head_loc", "tail_loc") and isinstance(v, str):
                v = Location(v)
            kw[k] = v
        return cls(**kw)


# -- ack links: receiver -> sender monotone counters ---------------------------


class WriteAckLink:
    """Receiver WRITEs an 8-byte cumulative counter into a sender-side word."""

    kind = "write"

    def __init__(self, receiver_qp, sender_ep: Endpoint):
        self.qp = receiver_qp
        self.word = sender_ep.register(8, Access.LOCAL_WRITE | Access.REMOTE_WRITE, owner="channel")
        self.src = receiver_qp.ep.register(8, Access.LOCAL_WRITE, owner="channel")
        self.published = 0
        self._seen = 0

    def publish(self, value: int) -> None:
        if value <= self.published:
            return
        self.published = value
        self.src.store_u64(0, value)
        self.qp.post(WorkRequest(Op.WRITE, 0, ((self.src, 0, 8),), (self.word, 0), signaled=False, tag="ack"))

    def refresh(self) -> None:
        pass  # pushed by the receiver

    def latest(self) -> int:
        v = self.word.load_u64(0)
        if v > self._seen:
            self._seen = v
        return self._seen

    def on_completion(self, ev) -> bool:
        return False


class SendAckLink:
    """Receiver SENDs the counter (low 32 bits as IMM) on a bufferless channel."""

    kind = "send"

    def __init__(self, receiver_qp, sender_qp, depth: int):
        self.qp = receiver_qp
        self.sqp = sender_qp
        self.depth = depth
        self.published = 0
        self._seen = 0
        for _ in range(depth):
            sender_qp.post_recv(WorkRequest(Op.RECV, _ACK_WR))

    def publish(self, value: int) -> None:
        if value <= self.published:
            return
        self.published = value
        self.qp.post(WorkRequest(Op.SEND, _ACK_WR, (), None, value & 0xFFFFFFFF, signaled=False, tag="ack"))

    def refresh(self) -> None:
        pass

    def on_completion(self, ev) -> bool:
        """Feed a sender-side completion; returns True if it belonged to the link."""
        if ev.wr_id != _ACK_WR or ev.opcode is not Op.RECV:
            return False
        delta = (ev.imm - self._seen) & 0xFFFFFFFF
        if delta < 0x80000000:
            self._seen += delta
        self.sqp.post_recv(WorkRequest(Op.RECV, _ACK_WR))
        return True

    def latest(self) -> int:
        return self._seen


class ReadAckLink:
    """Receiver stores the counter locally; the sender READs it when it needs to."""

    kind = "read"

    def __init__(self, sender_qp, receiver_ep: Endpoint, location=Location.HOST, word: Optional[MemoryRegion] = None):
        self.qp = sender_qp
        self.word = word or receiver_ep.register(8, Access.REMOTE_READ, location, owner="channel")
        self.dst = sender_qp.ep.register(8, Access.LOCAL_WRITE, owner="channel")
        self._seen = 0
        self.in_flight = False
        self.reads = 0

    def publish(self, value: int) -> None:
        self.word.store_u64(0, value)

    def refresh(self) -> None:
        if self.in_flight:
            return
        self.in_flight = True
        self.reads += 1
        self.qp.post(WorkRequest(Op.READ, _ACK_WR, ((self.dst, 0, 8),), (self.word, 0), tag="ack"))

    def on_completion(self, ev) -> bool:
        if ev.wr_id != _ACK_WR or ev.opcode is not Op.READ:
            return False
        self.in_flight = False
        v = self.dst.load_u64(0)
        if v > self._seen:
            self._seen = v
        return True

    def latest(self) -> int:
        return self._seen


_ACK_WR = 0xACC0000000000000


def make_ack_link(kind: str, sender_qp, receiver_qp, depth: int):
    if kind == "write":
        return WriteAckLink(receiver_qp, sender_qp.ep)
    if kind == "send":
        return SendAckLink(receiver_qp, sender_qp, depth)
    if kind == "read":
        return ReadAckLink(sender_qp, receiver_qp.ep)
    raise ValueError(f"unknown ack link {kind!r}")


def default_ack_kind(profile: TransportProfile, preferred: str = "write") -> str:
    """WRITE-based acks where the transport has WRITE, otherwise a bufferless SEND."""
    if preferred == "write" and Op.WRITE in profile.supported_requests:
        return "write"
    if Op.SEND in profile.supported_requests:
        return "send"
    return "write"


def check_status(ev) -> None:
    if ev.status is not Status.OK:
        raise ChannelError(f"completion error {ev.status.value} for {ev.opcode.value} wr={ev.wr_id:#x}")


# -- handle base classes ---------------------------------------------------------


class AppArena:
    """Application-owned scratch memory handed out in a bump-and-wrap fashion."""

    def __init__(self, ep: Endpoint, size: int, access=Access.LOCAL_WRITE | Access.REMOTE_WRITE):
        self.mr = ep.register(size, access, owner="app")
        self.size = size
        self.pos = 0

    def alloc(self, n: int) -> Region:
        if n > self.size:
            raise MessageTooLarge(f"{n} bytes do not fit an arena of {self.size}")
        if self.pos + n > self.size:
            self.pos = 0
        r = Region(self.mr, self.pos, n, Provenance.APP)
        self.pos += (n + 7) & ~7
        return r


class Sender:
    """Sender side of a uni-directional channel."""

    spec: ChannelSpec
    max_message: int = 0
    zero_copy_send = True

    def __init__(self, fabric: Fabric, ep: Endpoint, spec: ChannelSpec, config: ChannelConfig):
        self.fabric = fabric
        self.ep = ep
        self.spec = spec
        self.config = config
        self.cq: CompletionQueue = ep.create_cq(f"{spec.selector}.send")
        self._next = 0
        self._pending: dict = {}
        self.arena: Optional[AppArena] = None
        self.sent = 0

    # API -------------------------------------------------------------------
    def send_region(self, r: Region) -> int:
        raise NotImplementedError

    def test_send_request(self, handle: int) -> bool:
        if handle < 0 or handle >= self._next:
            raise UnknownHandle(f"unknown send handle {handle}")
        if handle in self._pending:
            self.progress()
        return handle not in self._pending

    def has_credit(self, length: int = 1) -> bool:
        raise NotImplementedError

    def alloc_region(self, length: int) -> Region:
        """A send buffer the application fills in place."""
        if self.arena is None:
            self.arena = AppArena(self.ep, max(4 * self.max_message, 64 * 1024))
        return self.arena.alloc(length)

    def progress(self) -> None:
        pass

    def _check_size(self, length: int) -> None:
        if length > self.max_message:
            raise MessageTooLarge(f"{length} bytes exceed the {self.max_message}-byte limit of {self.spec.selector}")

    def _new_handle(self, waits: int = 1) -> int:
        h = self._next
        self._next += 1
        if waits:
            self._pending[h] = waits
        return h

    def _done(self, handle: int) -> None:
        n = self._pending.get(handle)
        if n is None:
            return
        if n <= 1:
            del self._pending[handle]
        else:
            self._pending[handle] = n - 1

    @property
    def blocking_cq(self) -> CompletionQueue:
        return self.cq


class Receiver:
    """Receiver side of a uni-directional channel."""

    spec: ChannelSpec
    zero_copy_recv = False
    blocking = False

    def __init__(self, fabric: Fabric, ep: Endpoint, spec: ChannelSpec, config: ChannelConfig):
        self.fabric = fabric
        self.ep = ep
        self.spec = spec
        self.config = config
        self.cq: CompletionQueue = ep.create_cq(f"{spec.selector}.recv")
        self._next = 0
        self._pending: dict = {}
        self.delivered = 0
        self.freed = 0
        self.source: Optional[int] = None
        self._finished: dict = {}

    def receive_region(self) -> Optional[Region]:
        raise ChannelError(f"{self.spec.selector} is zero-copy on receive; use can_receive_region")

    def free_receive_region(self, r: Region) -> None:
        raise ChannelError(f"{self.spec.selector} has no receive regions to free")

    def can_receive_region(self) -> Optional[RegionOption]:
        raise ChannelError(f"{self.spec.selector} is not zero-copy on receive; use receive_region")

    def receive_region_into(self, o: RegionOption, dst: Region) -> int:
        raise ChannelError(f"{self.spec.selector} is not zero-copy on receive")

    def test_receive_request(self, handle: int) -> bool:
        if handle < 0 or handle >= self._next:
            raise UnknownHandle(f"unknown receive handle {handle}")
        if handle in self._pending:
            self.progress()
        return handle not in self._pending

    def progress(self) -> None:
        pass

    def finish_receive(self, handle: int) -> Region:
        """The delivered region for a completed zero-copy receive."""
        if not self.test_receive_request(handle):
            raise ChannelError(f"receive {handle} has not completed")
        try:
            return self._finished.pop(handle)
        except KeyError:
            raise UnknownHandle(f"receive {handle} was already finished") from None

    def release_option(self, r: Region) -> None:
        """Acknowledge a zero-copy receive once the application is done with it."""
        pass

    def flush(self) -> None:
        """Publish acknowledgements still held back by ``ack_batch``."""
        pass

    def _new_handle(self) -> int:
        h = self._next
        self._next += 1
        return h

    # Uniform driver used by workloads: returns the next delivered Region or None.
    def poll_message(self, alloc: Optional[Callable] = None) -> Optional[Region]:
        if not self.zero_copy_recv:
            return self.receive_region()
        st = self.__dict__.setdefault("_drv", [])
        if not st:
            o = self.can_receive_region()
            if o is None:
                return None
            dst = o.region if o.region is not None else alloc(o.length)
            st.append(self.receive_region_into(o, dst))
        if self.test_receive_request(st[0]):
            return self.finish_receive(st.pop())
        return None

    def release(self, r: Region) -> None:
        if self.zero_copy_recv:
            self.release_option(r)
        else:
            self.free_receive_region(r)

    @property
    def wait_queue(self) -> Optional[CompletionQueue]:
        """CQ to block on when the channel supports blocking receive."""
        return self.cq if self.blocking else None


def connect_handles(s: "Sender", r: "Receiver", s_srq=None, r_srq=None):
    """Queue pair between a sender and a receiver handle, each side on its own CQ."""
    return s.fabric.connect(s.ep, r.ep, a_send_cq=s.cq, a_recv_cq=s.cq, b_send_cq=r.cq, b_recv_cq=r.cq,
                            a_srq=s_srq, b_srq=r_srq)


def build_private(make_pair, spec, fabric, sender_eps, receiver_eps, cfg):
    """One private channel per (sender, receiver) pair."""
    senders, receivers = [], []
    for sep in sender_eps:
        for rep in receiver_eps:
            s, r = make_pair(spec, fabric, sep, rep, cfg)
            senders.append(s)
            receivers.append(r)
    return senders, receivers


# -- registry and construction ------------------------------------------------------

_FAMILIES: Dict[str, Callable] = {}


def register_family(prefix: str):
    def deco(fn):
        _FAMILIES[prefix] = fn
        return fn

    return deco


def _builder(selector: str):
    from . import read_ring, read_slot, ring, send_recv, shared_ring, write_slot  # noqa: F401

    prefix = selector.split(".", 1)[0]
    return _FAMILIES[prefix]


def _prepare(selector, fabric, config, enforce_ordering=True):
    spec = spec_for(selector)
    missing = check_requirements(spec, fabric.profile, enforce_ordering)
    if missing:
        raise RequirementUnmet(selector, missing)
    return spec, ChannelConfig.from_dict(config)


def _snapshot(eps) -> dict:
    return {ep.id: ep.counters["registered_bytes.channel"] for ep in eps}


def open_channel(selector: str, fabric: Fabric, sender_ep: Endpoint, receiver_ep: Endpoint, config=None,
                 enforce_ordering: bool = True):
    """Open one point-to-point channel; returns ``(sender, receiver)``."""
    spec, cfg = _prepare(selector, fabric, config, enforce_ordering)
    s, rs = _builder(selector)(spec, fabric, [sender_ep], [receiver_ep], cfg, "p2p")
    s, r = s[0], rs[0]
    r.memory_snapshot = _snapshot([sender_ep, receiver_ep])
    return s, r


def open_fanin(selector: str, fabric: Fabric, sender_eps: Sequence[Endpoint], receiver_ep: Endpoint, config=None,
               enforce_ordering: bool = True):
    """N senders into one receiver; returns ``([senders], receiver)``.

    Shared families build one shared structure; the others open one private
    channel per sender behind a round-robin receiver.
    """
    spec, cfg = _prepare(selector, fabric, config, enforce_ordering)
    senders, receivers = _builder(selector)(spec, fabric, list(sender_eps), [receiver_ep], cfg, "fanin")
    if len(receivers) == 1:
        return senders, receivers[0]
    return senders, FanInReceiver(receivers)


def open_fanout(selector: str, fabric: Fabric, sender_ep: Endpoint, receiver_eps: Sequence[Endpoint], config=None,
                enforce_ordering: bool = True):
    """One sender broadcasting to N receivers; returns ``(sender, [receivers])``."""
    spec, cfg = _prepare(selector, fabric, config, enforce_ordering)
    senders, receivers = _builder(selector)(spec, fabric, [sender_ep], list(receiver_eps), cfg, "fanout")
    if len(senders) == 1:
        return senders[0], receivers
    return FanOutSender(senders), receivers


class FanInReceiver(Receiver):
    """Round-robin multiplexer over private per-sender channels."""

    def __init__(self, receivers: list):
        first = receivers[0]
        self.fabric = first.fabric
        self.ep = first.ep
        self.spec = first.spec
        self.config = first.config
        self.parts = receivers
        for i, r in enumerate(receivers):
            r.source = i
        self.zero_copy_recv = first.zero_copy_recv
        self.blocking = first.blocking
        self._rr = 0
        self._owner: dict = {}
        self._next = 0

    @property
    def wait_queue(self):
        return None

    @property
    def wait_queues(self):
        return [r.wait_queue for r in self.parts]

    def flush(self) -> None:
        for r in self.parts:
            r.flush()

    def _scan(self, fn):
        n = len(self.parts)
        for k in range(n):
            i = (self._rr + k) % n
            out = fn(self.parts[i])
            if out is not None:
                self._rr = (i + 1) % n
                return i, out
        return None, None

    def receive_region(self):
        i, r = self._scan(lambda p: p.receive_region())
        if r is not None:
            r.source = i
        return r

    def free_receive_region(self, r):
        self.parts[r.source].free_receive_region(r)

    def can_receive_region(self):
        i, o = self._scan(lambda p: p.can_receive_region())
        if o is not None:
            o.token = (i, o.token)
        return o

    def receive_region_into(self, o, dst):
        i, tok = o.token
        o.token = tok
        h = self.parts[i].receive_region_into(o, dst)
        o.token = (i, tok)
        g = self._next
        self._next += 1
        self._owner[g] = (i, h)
        return g

    def test_receive_request(self, handle):
        if handle not in self._owner:
            raise UnknownHandle(f"unknown receive handle {handle}")
        i, h = self._owner[handle]
        return self.parts[i].test_receive_request(h)

    def finish_receive(self, handle):
        i, h = self._owner.pop(handle)
        r = self.parts[i].finish_receive(h)
        if r is None:  # speculative pull found nothing
            return None
        r.source = i
        r.tag = (i, r.tag)
        return r

    def release_option(self, r_or_handle):
        i, tag = r_or_handle.tag
        r_or_handle.tag = tag
        self.parts[i].release_option(r_or_handle)

    def progress(self):
        for p in self.parts:
            p.progress()


class FanOutSender(Sender):
    """Broadcast over private per-receiver channels sharing one data source."""

    def __init__(self, senders: list):
        first = senders[0]
        self.fabric = first.fabric
        self.ep = first.ep
        self.spec = first.spec
        self.config = first.config
        self.parts = senders
        self.max_message = first.max_message
        self.zero_copy_send = first.zero_copy_send
        self._next = 0
        self._handles: dict = {}
        self.arena = None

    def has_credit(self, length=1):
        return all(p.has_credit(length) for p in self.parts)

    def send_region(self, r):
        hs = [p.send_region(r) for p in self.parts]
        h = self._next
        self._next += 1
        self._handles[h] = hs
        return h

    def test_send_request(self, handle):
        if handle not in self._handles:
            raise UnknownHandle(f"unknown send handle {handle}")
        return all(p.test_send_request(h) for p, h in zip(self.parts, self._handles[handle]))

    def alloc_region(self, length):
        if self.arena is None:
            self.arena = AppArena(self.ep, max(4 * self.max_message, 64 * 1024))
        return self.arena.alloc(length)

    def progress(self):
        for p in self.parts:
            p.progress()

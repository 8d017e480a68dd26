"""Bidirectional composition of channels and the workloads that drive them."""

from __future__ import annotations

import random
import statistics
import zlib
from collections import deque
import dataclasses
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

from .channels.core import ChannelConfig, open_channel, open_fanin, open_fanout, spec_for
from .fabric import IDLE, Endpoint, Fabric, Op, Sleep, WaitCQ
from .memory import Access, Region, copy_instrumented

RUN_COLUMNS = (
    "channel",
    "profile",
    "msg_size",
    "count",
    "outstanding",
    "p50_ticks",
    "p90_ticks",
    "reqs_send",
    "reqs_recv",
    "copies_send",
    "copies_recv",
    "recv_registered_bytes",
)
FORWARD_TAGS = ("data", "ctrl")


def fmt6(v) -> str:
    """Six significant digits for floats, plain text otherwise."""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def forward_requests(ep: Endpoint) -> int:
    """Requests an endpoint posted for the data protocol itself (credit returns excluded)."""
    return sum(ep.counters.posted(t) for t in FORWARD_TAGS)


def percentile(values: Sequence[float], q: float) -> float:
    if not values:
        return 0.0
    xs = sorted(values)
    k = max(0, min(len(xs) - 1, int(round(q / 100.0 * (len(xs) - 1)))))
    return float(xs[k])


class AppBuffers:
    """Application receive buffers on one endpoint (bump-and-wrap)."""

    def __init__(self, ep: Endpoint, size: int = 1 << 18):
        self.mr = ep.register(size, Access.LOCAL_WRITE, owner="app")
        self.pos = 0

    def __call__(self, n: int) -> Region:
        n = max(n, 1)
        if self.pos + n > self.mr.length:
            self.pos = 0
        r = Region(self.mr, self.pos, n)
        self.pos += (n + 7) & ~7
        return r


class PayloadPool:
    """Pregenerated random bytes; message payloads are windows into it."""

    def __init__(self, seed: int, size: int = 1 << 20):
        self.data = random.Random(seed ^ 0x5EED).randbytes(size)
        self.size = size

    def window(self, i: int, n: int) -> bytes:
        off = (i * 7919) % (self.size - n + 1)
        return self.data[off : off + n]


# -- streaming -----------------------------------------------------------------


@dataclass
class StreamResult:
    sent: List[list]  # per sender: [(length, crc32)]
    got: List[list]  # per receiver: [(source, length, crc32)]
    latencies: List[int] = field(default_factory=list)
    ticks: int = 0

    def per_source(self, receiver: int = 0) -> dict:
        out = {}
        for src, n, crc in self.got[receiver]:
            out.setdefault(src, []).append((n, crc))
        return out


def run_stream(
    fabric: Fabric,
    senders: Sequence,
    receivers: Sequence,
    sizes: Sequence[Sequence[int]],
    pool: PayloadPool,
    blocking: bool = False,
    alloc: Optional[Sequence[Callable]] = None,
    until: Optional[int] = None,
) -> StreamResult:
    """Each sender pushes its ``sizes`` list; every receiver collects everything addressed to it.

    With one receiver and several senders the receiver expects the sum of all
    messages; with one sender and several receivers (broadcast) each receiver
    expects the sender's full sequence.
    """
    sent = [[] for _ in senders]
    got = [[] for _ in receivers]
    lat = []
    fanout = len(receivers) > 1
    expect = [len(sizes[0])] * len(receivers) if fanout else [sum(len(s) for s in sizes)]
    allocs = alloc or [AppBuffers(r.ep) for r in receivers]
    # send times keyed by payload identity, so latency works even when a channel cannot name the source
    sent_at = [{} for _ in receivers]

    def sender(i, s):
        seq = sent[i]
        for j, n in enumerate(sizes[i]):
            while not s.has_credit(n):
                yield IDLE
            reg = s.alloc_region(n)
            payload = pool.window(i * 1000003 + j, n)
            reg.fill(payload)
            key = (n, zlib.crc32(payload))
            seq.append(key)
            for k in range(len(receivers)):
                sent_at[k].setdefault(key, deque()).append(fabric.now)
            s.send_region(reg)
            yield IDLE
        for h in range(s._next):
            while not s.test_send_request(h):
                yield IDLE

    def receiver(k, r):
        out = got[k]
        times = sent_at[k]
        a = allocs[k]
        while len(out) < expect[k]:
            m = r.poll_message(a)
            if m is None:
                q = r.wait_queue if blocking else None
                yield IDLE if q is None else WaitCQ(q)
                continue
            src = 0 if fanout else (m.source or 0)
            key = (m.length, zlib.crc32(m.tobytes()))
            q = times.get(key)
            if q:
                lat.append(fabric.now - q.popleft())
            out.append((src,) + key)
            r.release(m)
        r.flush()

    for i, s in enumerate(senders):
        fabric.spawn(sender(i, s), f"sender{i}", s.ep)
    for k, r in enumerate(receivers):
        fabric.spawn(receiver(k, r), f"receiver{k}", r.ep)
    end = fabric.run(until=until)
    return StreamResult(sent, got, lat, end)


def random_sizes(rng: random.Random, count: int, max_size: int, min_size: int = 1) -> list:
    return [rng.randint(min_size, max_size) for _ in range(count)]


# -- bidirectional composition ------------------------------------------------------


@dataclass
class Datapath:
    selector: str
    fabric: Fabric
    client: Endpoint
    server: Endpoint
    forward: tuple
    reverse: tuple
    reverse_kind: str  # "mirror" | "tail-write" | "tail-read"
    ack_batch: int = 1

    @property
    def profile(self) -> str:
        return self.fabric.profile.name


def reverse_selector(selector: str) -> tuple:
    fam = selector.split(".", 1)[0]
    if fam == "rring":
        # readers answer through a write-slot inlined-bell channel, keeping the publisher passive
        return "wslot.inlined", "tail-write"
    if fam == "sring":
        # the receiver exposes responses for the senders to fetch, keeping it passive
        return "rslot.inlined", "tail-read"
    return selector, "mirror"


def compose(selector: str, fabric: Fabric, client: Endpoint, server: Endpoint, ack_batch: int = 1,
            config=None) -> Datapath:
    """Forward channel client->server plus a reverse channel server->client."""
    cfg = ChannelConfig.from_dict(config)
    cfg.ack_batch = ack_batch
    fwd = open_channel(selector, fabric, client, server, cfg)
    rsel, kind = reverse_selector(selector)
    rcfg = cfg
    if kind == "tail-read" and cfg.ack is None and Op.WRITE in fabric.profile.supported_requests:
        # the senders push their consumption counts so the shared-ring receiver never posts
        rcfg = dataclasses.replace(cfg, ack="write")
    rev = open_channel(rsel, fabric, server, client, rcfg)
    return Datapath(selector, fabric, client, server, fwd, rev, kind, ack_batch)


@dataclass
class RunStats:
    channel: str
    profile: str
    msg_size: int
    count: int
    outstanding: int
    latencies: list
    reqs_send: float
    reqs_recv: float
    copies_send: int
    copies_recv: int
    recv_registered_bytes: int
    ticks: int = 0
    delivered_ticks: list = field(default_factory=list)

    @property
    def p50(self) -> float:
        return percentile(self.latencies, 50)

    @property
    def p90(self) -> float:
        return percentile(self.latencies, 90)

    def row(self) -> list:
        return [
            self.channel,
            self.profile,
            self.msg_size,
            self.count,
            self.outstanding,
            self.p50,
            self.p90,
            float(self.reqs_send),
            float(self.reqs_recv),
            self.copies_send,
            self.copies_recv,
            self.recv_registered_bytes,
        ]

    def csv_line(self) -> str:
        return ",".join(fmt6(v) for v in self.row())


def echo_workload(dp: Datapath, msg_size: int, count: int, outstanding: int = 1) -> RunStats:
    """Client sends requests, the server answers each with a same-size response."""
    if outstanding < 1:
        raise ValueError("outstanding must be at least 1")
    f = dp.fabric
    fs, fr = dp.forward
    rs, rr = dp.reverse
    size = min(msg_size, fs.max_message, rs.max_message)
    c0, s0 = dp.client.counters.snapshot(), dp.server.counters.snapshot()
    req0 = forward_requests(dp.client), forward_requests(dp.server)
    pool = PayloadPool(f.seed)
    started = {}
    lat = []
    delivered = []
    calloc, salloc = AppBuffers(dp.client), AppBuffers(dp.server)
    state = {"done": 0}

    def client():
        issued = 0
        handles = []
        while state["done"] < count:
            while issued < count and issued - state["done"] < outstanding and fs.has_credit(size):
                reg = fs.alloc_region(size)
                reg.fill(pool.window(issued, size))
                started[issued] = f.now
                handles.append((fs.send_region(reg), issued))
                issued += 1
            while handles and fs.test_send_request(handles[0][0]):
                delivered.append(f.now - started[handles.pop(0)[1]])
            fs.progress()
            m = rr.poll_message(calloc)
            if m is None:
                yield IDLE
                continue
            k = state["done"]
            lat.append(f.now - started[k])
            state["done"] = k + 1
            rr.release(m)
        rr.flush()

    def server():
        answered = 0
        backlog = []
        while answered < count:
            rs.progress()
            m = fr.poll_message(salloc)
            while m is not None:
                backlog.append(m)
                m = fr.poll_message(salloc)
            while backlog and rs.has_credit(size):
                req = backlog.pop(0)
                out = rs.alloc_region(size)
                out.fill(req.tobytes()[:size].ljust(size, b"\0"))
                fr.release(req)
                rs.send_region(out)
                answered += 1
            yield IDLE
        fr.flush()
        for h in range(rs._next):
            while not rs.test_send_request(h):
                yield IDLE

    f.spawn(client(), "client", dp.client)
    f.spawn(server(), "server", dp.server)
    end = f.run()
    c1, s1 = dp.client.counters, dp.server.counters
    return RunStats(
        dp.selector,
        dp.profile,
        size,
        count,
        outstanding,
        lat,
        (forward_requests(dp.client) - req0[0]) / count,
        (forward_requests(dp.server) - req0[1]) / count,
        c1["cpu_copy_bytes"] - c0.get("cpu_copy_bytes", 0),
        s1["cpu_copy_bytes"] - s0.get("cpu_copy_bytes", 0),
        dp.server.counters["registered_bytes.channel"],
        end,
        delivered,
    )


def fanin_workload(selector: str, fabric: Fabric, senders: int, msg_size: int, count: int, config=None) -> RunStats:
    """N senders stream into one receiver; latency is send-to-delivery."""
    eps = [fabric.endpoint(f"client{i}") for i in range(senders)]
    rep = fabric.endpoint("server")
    ss, r = open_fanin(selector, fabric, eps, rep, config)
    size = min(msg_size, ss[0].max_message)
    req0 = [forward_requests(e) for e in eps], forward_requests(rep)
    per = max(1, count // senders)
    res = run_stream(fabric, ss, [r], [[size] * per for _ in ss], PayloadPool(fabric.seed))
    total = per * len(ss)
    return RunStats(
        selector,
        fabric.profile.name,
        size,
        total,
        1,
        res.latencies,
        sum(forward_requests(e) - b for e, b in zip(eps, req0[0])) / total,
        (forward_requests(rep) - req0[1]) / total,
        sum(e.counters["cpu_copy_bytes"] for e in eps),
        rep.counters["cpu_copy_bytes"],
        rep.counters["registered_bytes.channel"],
        res.ticks,
    )


def fanout_workload(selector: str, fabric: Fabric, readers: int, msg_size: int, count: int, config=None) -> RunStats:
    """One sender broadcasting to R receivers."""
    sep = fabric.endpoint("publisher")
    reps = [fabric.endpoint(f"reader{i}") for i in range(readers)]
    s, rs = open_fanout(selector, fabric, sep, reps, config)
    size = min(msg_size, s.max_message)
    base_s = forward_requests(sep)
    base_r = [forward_requests(e) for e in reps]
    res = run_stream(fabric, [s], rs, [[size] * count], PayloadPool(fabric.seed))
    return RunStats(
        selector,
        fabric.profile.name,
        size,
        count,
        1,
        res.latencies,
        (forward_requests(sep) - base_s) / count,
        sum(forward_requests(e) - b for e, b in zip(reps, base_r)) / (count * readers),
        sep.counters["cpu_copy_bytes"],
        sum(e.counters["cpu_copy_bytes"] for e in reps),
        max(e.counters["registered_bytes.channel"] for e in reps),
        res.ticks,
    )

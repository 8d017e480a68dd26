"""Measure channel behaviour on the simulator and check it against the declared feature table."""

from __future__ import annotations

import random
import statistics
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .channels.core import (
    NA,
    TABLE2,
    VERB_LABEL,
    ChannelConfig,
    ChannelError,
    ChannelSpec,
    Family,
    MemClass,
    _fmt,
    admits,
    check_requirements,
    open_channel,
    open_fanin,
    open_fanout,
    spec_for,
)
from .datapath import AppBuffers, PayloadPool, fmt6, forward_requests, run_stream
from .fabric import EFA, IB_ROCE, IDLE, ONE_RMA, YIELD, Fabric, GlobalStall, Sleep
from .memory import copy_instrumented

MATRIX_COLUMNS = (
    "channel",
    "profile",
    "hrt",
    "req_send",
    "req_recv",
    "blocking_recv",
    "zc_send",
    "zc_recv",
    "variable",
    "mem_1toN",
    "mem_Nto1",
    "requests",
    "ordering",
    "match",
)
COMPARED = MATRIX_COLUMNS[2:-1]
SCALING_N = (1, 2, 4, 8)


def least_capable_profile(spec: ChannelSpec):
    """The weakest transport the channel can be built on.

    Read rings prefer the WRITE-capable 1RMA profile so reader acknowledgements
    stay one-sided and the publisher remains passive.
    """
    order = (EFA, ONE_RMA, IB_ROCE)
    if spec.family is Family.READ_RING:
        order = (ONE_RMA, EFA, IB_ROCE)
    for p in order:
        if not check_requirements(spec, p):
            return p
    raise ChannelError(f"{spec.selector} cannot be built on any profile")


def measurement_config(**kw) -> ChannelConfig:
    # one receive / advertisement at a time so every per-message control request is visible
    cfg = ChannelConfig(recv_depth=1)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


# -- synchronized per-message measurement --------------------------------------------


@dataclass
class SyncResult:
    latencies: list
    chain: list
    reqs_send: float
    reqs_recv: float
    verbs: set
    copies_send: int
    copies_recv: int
    recv_completions: int
    retries: int = 0


def sync_run(selector: str, profile, count: int = 8, size: int = 64, seed: int = 0, config=None,
             hrt_cost: int = 10) -> SyncResult:
    """One coordinating actor: send at t0, start polling at t0, deliver, release, settle.

    Nothing else touches the channel, so every request and tick is attributable
    to the message in flight.
    """
    f = Fabric(profile, seed, hrt_cost=hrt_cost)
    a, b = f.endpoint("sender"), f.endpoint("receiver")
    cfg = config if config is not None else measurement_config()
    s, r = open_channel(selector, f, a, b, cfg)
    size = min(size, s.max_message)
    pool = PayloadPool(seed)
    alloc = AppBuffers(b)
    lat, chain = [], []
    base = {ep: (forward_requests(ep), ep.counters["cpu_copy_bytes"], ep.counters["recv_completions"]) for ep in (a, b)}

    def coordinator():
        for k in range(count):
            reg = s.alloc_region(size)
            reg.fill(pool.window(k, size))
            t0 = f.now
            h = s.send_region(reg)
            while True:
                s.progress()
                m = r.poll_message(alloc)
                if m is not None:
                    break
                yield IDLE
            lat.append(f.now - t0)
            chain.append(f.now - (m.pulled_at if m.pulled_at is not None else t0))
            if not r.zero_copy_recv and m.length:
                # the application wants the payload in its own buffer
                copy_instrumented(m, alloc(m.length).sub(0, m.length))
            r.release(m)
            yield Sleep(8 * hrt_cost)
            while not s.test_send_request(h):
                yield IDLE
            yield Sleep(8 * hrt_cost)

    f.spawn(coordinator(), "coordinator", a)
    f.run()
    verbs = set()
    for ep in (a, b):
        for tag in ("data", "ctrl"):
            verbs |= ep.counters.verbs(tag)
    return SyncResult(
        lat,
        chain,
        (forward_requests(a) - base[a][0]) / count,
        (forward_requests(b) - base[b][0]) / count,
        verbs,
        a.counters["cpu_copy_bytes"] - base[a][1],
        b.counters["cpu_copy_bytes"] - base[b][1],
        b.counters["recv_completions"] - base[b][2],
        getattr(r, "empty_reads", 0),
    )


def blocking_run(selector: str, profile, count: int = 16, seed: int = 0, config=None) -> bool:
    """True when a receiver that only ever sleeps on its completion queue gets every message."""
    f = Fabric(profile, seed)
    a, b = f.endpoint("sender"), f.endpoint("receiver")
    s, r = open_channel(selector, f, a, b, config if config is not None else measurement_config())
    if r.wait_queue is None:
        return False
    size = min(32, s.max_message)
    try:
        res = run_stream(f, [s], [r], [[size] * count], PayloadPool(seed), blocking=True)
    except GlobalStall:
        return False
    return len(res.got[0]) == count


def capacity(selector: str, profile, size: int, limit: int = 4096, config=None) -> int:
    """Messages a sender can hand over while the receiver never consumes anything."""
    f = Fabric(profile, 0)
    a, b = f.endpoint("sender"), f.endpoint("receiver")
    s, r = open_channel(selector, f, a, b, config)
    size = min(size, s.max_message)
    accepted = [0]

    def sender():
        for _ in range(limit):
            while not s.has_credit(size):
                yield IDLE
            s.send_region(s.alloc_region(size))
            accepted[0] += 1
            yield YIELD  # passive senders create no events to wake on

    f.spawn(sender(), "sender", a)
    try:
        f.run(until=limit * 4 * f.hrt_cost)
    except GlobalStall:
        pass
    return accepted[0]


def variable_size(selector: str, profile) -> object:
    """Whether small messages take less of the channel's buffering than large ones."""
    f = Fabric(profile, 0)
    s, _ = open_channel(selector, f, f.endpoint(), f.endpoint())
    if s.max_message < 4:
        return NA
    if getattr(s, "fixed", None):
        return False
    large = min(s.max_message, 1024)
    return capacity(selector, profile, 8) > capacity(selector, profile, large)


# -- memory scaling ------------------------------------------------------------------------


def allocation_unit(spec: ChannelSpec, cfg: ChannelConfig) -> int:
    if spec.family in (Family.RING, Family.SHARED_RING, Family.READ_RING):
        return cfg.ring_capacity
    return cfg.slot_size


def classify(ns: Sequence[int], values: Sequence[int], unit: int) -> MemClass:
    if max(values) - min(values) < unit:
        return MemClass.O1
    if len(set(ns)) >= 2 and len(set(values)) >= 2:
        slope, _ = statistics.linear_regression(ns, values)
        r = statistics.correlation(ns, values)
        if slope > 0 and r * r > 0.99:
            return MemClass.ON
    return MemClass.UNCLASSIFIED


def memory_bytes(selector: str, profile, n: int, direction: str, config=None) -> int:
    f = Fabric(profile, 0)
    if direction == "1toN":
        ep = f.endpoint("sender")
        open_fanout(selector, f, ep, [f.endpoint(f"r{i}") for i in range(n)], config)
    else:
        ep = f.endpoint("receiver")
        open_fanin(selector, f, [f.endpoint(f"s{i}") for i in range(n)], ep, config)
    return ep.counters["registered_bytes.channel"]


def memory_scaling(selector: str, direction: str = "Nto1", ns: Sequence[int] = SCALING_N, profile=None,
                   config=None):
    """Registered channel bytes at one side as the number of peers grows; returns (class, values)."""
    spec = spec_for(selector)
    profile = profile or least_capable_profile(spec)
    cfg = ChannelConfig.from_dict(config)
    values = [memory_bytes(selector, profile, n, direction, cfg) for n in ns]
    return classify(list(ns), values, allocation_unit(spec, cfg)), values


# -- ordering requirements -------------------------------------------------------------------


def corrupted(selector: str, policy: str, window: int, seed: int, count: int = 300, chunk: int = 64) -> bool:
    """Run on an in-order transport with forced reordering; True on loss, duplication or bad payload."""
    f = Fabric(IB_ROCE, seed, chunk_size=chunk)
    f.inject_reorder(policy, window, force=True)
    a, b = f.endpoint("sender"), f.endpoint("receiver")
    s, r = open_channel(selector, f, a, b, None, enforce_ordering=False)
    rng = random.Random(seed)
    hi = min(s.max_message, 512)
    sizes = [rng.randint(1, hi) for _ in range(count)]
    try:
        # bound the run: a corrupted pull channel can poll forever without stalling
        res = run_stream(f, [s], [r], [sizes], PayloadPool(seed), until=count * 400 * f.hrt_cost)
    except GlobalStall:
        return True
    except (ChannelError, IndexError, ValueError, KeyError):
        return True
    if len(res.got[0]) < count:
        return True
    got = [(n, crc) for _, n, crc in res.got[0]]
    return Counter(got) != Counter(res.sent[0])


def measured_ordering(selector: str, seeds: Iterable[int] = range(6)) -> frozenset:
    need = set()
    for seed in seeds:
        if "MESSAGES" not in need and corrupted(selector, "shuffle_messages", 4, seed):
            need.add("MESSAGES")
        if "BYTES" not in need and corrupted(selector, "shuffle_bytes", 1, seed):
            need.add("BYTES")
        if len(need) == 2:
            break
    return frozenset(need)


# -- rows and the matrix -------------------------------------------------------------------------


@dataclass
class MeasuredRow:
    selector: str
    profile: str
    hrt: object
    req_send: object
    req_recv: object
    blocking_recv: object
    zc_send: object
    zc_recv: object
    variable: object
    mem_1toN: MemClass
    mem_Nto1: MemClass
    requests: frozenset
    ordering: frozenset
    passive_send: bool = False
    passive_recv: bool = False
    chain_min: int = 0
    mem_values: dict = field(default_factory=dict)

    def cells(self) -> dict:
        return {
            "hrt": self.hrt,
            "req_send": self.req_send,
            "req_recv": self.req_recv,
            "blocking_recv": self.blocking_recv,
            "zc_send": self.zc_send,
            "zc_recv": self.zc_recv,
            "variable": self.variable,
            "mem_1toN": self.mem_1toN,
            "mem_Nto1": self.mem_Nto1,
            "requests": self.requests,
            "ordering": self.ordering,
        }


def _num(x: float):
    return int(x) if float(x).is_integer() else x


def measure(selector: str, profile=None, count: int = 8, size: int = 64, seed: int = 0) -> MeasuredRow:
    spec = spec_for(selector)
    profile = profile or least_capable_profile(spec)
    h = 10
    sync = sync_run(selector, profile, count, size, seed, hrt_cost=h)
    f = Fabric(profile, 0)
    s, _ = open_channel(selector, f, f.endpoint(), f.endpoint())
    bufferless = s.max_message < 4
    hrt = _num(statistics.median(sync.latencies) / h)
    blocking = sync.recv_completions >= count and blocking_run(selector, profile, seed=seed)
    m1, v1 = memory_scaling(selector, "1toN", profile=profile)
    mn, vn = memory_scaling(selector, "Nto1", profile=profile)
    return MeasuredRow(
        selector,
        profile.name,
        hrt,
        _num(sync.reqs_send),
        _num(sync.reqs_recv),
        blocking,
        NA if bufferless else sync.copies_send == 0,
        NA if bufferless else sync.copies_recv == 0,
        variable_size(selector, profile),
        m1,
        mn,
        frozenset(VERB_LABEL[v] for v in sync.verbs),
        measured_ordering(selector),
        passive_send=sync.reqs_send == 0,
        passive_recv=sync.reqs_recv == 0,
        chain_min=min(sync.chain),
        mem_values={"1toN": v1, "Nto1": vn},
    )


def declared_cells(spec: ChannelSpec) -> dict:
    eff = spec.effective()
    return {
        "hrt": eff.hrt_latency,
        "req_send": eff.requests_send,
        "req_recv": eff.requests_recv,
        "blocking_recv": eff.blocking_recv,
        "zc_send": eff.zero_copy_send,
        "zc_recv": eff.zero_copy_recv,
        "variable": eff.variable_size,
        "mem_1toN": eff.mem_1toN,
        "mem_Nto1": eff.mem_Nto1,
        "requests": eff.table_requests | eff.composed_requests,
        "ordering": eff.required_ordering,
    }


def _cell_match(declared, measured) -> bool:
    if declared is NA or measured is NA:
        return declared is measured
    if isinstance(declared, bool) or isinstance(measured, bool):
        return declared is measured
    return admits(declared, measured)


@dataclass
class MatrixEntry:
    spec: ChannelSpec
    measured: MeasuredRow
    mismatches: dict  # column -> (declared, measured)

    @property
    def match(self) -> bool:
        return not self.mismatches

    def csv_row(self) -> list:
        m = self.measured.cells()
        out = [self.spec.selector, self.measured.profile]
        for col in COMPARED:
            out.append(_cell_text(col, m[col]))
        out.append("true" if self.match else "false")
        return out


def _cell_text(col, v) -> str:
    if col == "ordering":
        labels = {"MESSAGES": "Messages", "BYTES": "Bytes"}
        return _fmt(frozenset(labels[o] for o in v))
    if isinstance(v, float):
        return fmt6(v)
    return _fmt(v)


def compare(spec: ChannelSpec, row: MeasuredRow) -> dict:
    want = declared_cells(spec)
    got = row.cells()
    return {c: (want[c], got[c]) for c in COMPARED if not _cell_match(want[c], got[c])}


def validate_matrix(selectors: Optional[Iterable[str]] = None, specs: Optional[dict] = None) -> list:
    """Measure every channel on its least-capable profile and compare with its declared row."""
    specs = specs or TABLE2
    sels = list(specs) if selectors is None else list(selectors)
    out = []
    for sel in sels:
        spec = specs[sel]
        row = measure(sel)
        out.append(MatrixEntry(spec, row, compare(spec, row)))
    return out


def matrix_csv(entries: Sequence[MatrixEntry]) -> str:
    lines = [",".join(MATRIX_COLUMNS)]
    for e in entries:
        lines.append(",".join(e.csv_row()))
    for e in entries:
        for col, (want, got) in e.mismatches.items():
            lines.append(f"# mismatch {e.spec.selector} {col}: declared {_cell_text(col, want)} measured {_cell_text(col, got)}")
    return "\n".join(lines) + "\n"


# -- pull latency distribution ----------------------------------------------------------------------


def pull_latency_distribution(selector: str, count: int = 400, phase: int = 20, seed: int = 0, profile=None,
                              hrt_cost: int = 10, config=None) -> list:
    """Per-message latency from the reader's pull initiation to delivery.

    The publisher writes each record a random 0..``phase`` ticks after the
    reader started its pull, so a reader slightly out of phase sometimes has
    to poll once more.
    """
    spec = spec_for(selector)
    if spec.family is not Family.READ_RING:
        raise ChannelError("latency distributions are defined for read rings")
    profile = profile or least_capable_profile(spec)
    f = Fabric(profile, seed, hrt_cost=hrt_cost)
    a, b = f.endpoint("publisher"), f.endpoint("reader")
    s, r = open_channel(selector, f, a, b, config)
    rng = random.Random(seed)
    pool = PayloadPool(seed)
    alloc = AppBuffers(b)
    size = min(64, s.max_message)
    lat = []

    def coordinator():
        for k in range(count):
            t_r = f.now
            m = r.poll_message(alloc)  # starts the pull
            d = rng.randint(0, phase)
            if d:
                yield Sleep(d)
            reg = s.alloc_region(size)
            reg.fill(pool.window(k, size))
            s.send_region(reg)
            while m is None:
                # the first READ may have landed while we slept
                s.progress()
                m = r.poll_message(alloc)
                if m is None:
                    yield IDLE
            lat.append(f.now - t_r)
            r.release(m)
            yield Sleep(8 * hrt_cost)
            s.progress()

    f.spawn(coordinator(), "coordinator", a)
    f.run()
    return lat


def histogram(values: Sequence[int]) -> list:
    c = Counter(values)
    return sorted(c.items())


def modes(values: Sequence[int], min_share: float = 0.05) -> list:
    """Latency values whose count is a local maximum over adjacent ticks and holds ``min_share`` of the mass."""
    c = Counter(values)
    total = len(values)
    return sorted(v for v, n in c.items() if n >= c.get(v - 1, 0) and n >= c.get(v + 1, 0) and n >= min_share * total)

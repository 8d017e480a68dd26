"""Small drivers shared by the test modules."""

from __future__ import annotations

import random

from rdmachan.channels.core import TABLE2, check_requirements, open_channel
from rdmachan.datapath import PayloadPool, random_sizes, run_stream
from rdmachan.fabric import IDLE, PROFILES, Fabric, WaitCQ

from oracles import H


def compatible_pairs():
    """(selector, profile key) for every channel and every profile it can be built on."""
    return [
        (sel, key)
        for sel in TABLE2
        for key, prof in PROFILES.items()
        if not check_requirements(TABLE2[sel], prof)
    ]


def channel(selector, profile="ib", seed=0, config=None, **fabric_kw):
    f = Fabric(PROFILES[profile], seed, hrt_cost=fabric_kw.pop("hrt_cost", H), **fabric_kw)
    a, b = f.endpoint("sender"), f.endpoint("receiver")
    s, r = open_channel(selector, f, a, b, config)
    return f, s, r


def stream(selector, profile="ib", count=200, seed=0, config=None, sizes=None, **fabric_kw):
    f, s, r = channel(selector, profile, seed, config, **fabric_kw)
    if sizes is None:
        sizes = random_sizes(random.Random(seed), count, s.max_message)
    res = run_stream(f, [s], [r], [sizes], PayloadPool(seed))
    return f, s, r, res


def delivered_in_order(res) -> bool:
    return [(n, c) for _, n, c in res.got[0]] == res.sent[0]


def wait_event(f, cq):
    """Actor body: block on ``cq`` and return the first event."""
    while True:
        evs = cq.poll(1)
        if evs:
            return evs[0]
        yield WaitCQ(cq)


def poll_until(pred):
    while not pred():
        yield IDLE

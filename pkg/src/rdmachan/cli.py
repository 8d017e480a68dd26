"""Command-line front end: ``rdmachan run | matrix | dist``."""

from __future__ import annotations

import sys
from contextlib import contextmanager

import click

from .channels.core import TABLE2, ChannelConfig, ChannelError, RequirementUnmet, spec_for
from .datapath import RUN_COLUMNS, compose, echo_workload, fanin_workload, fanout_workload, fmt6
from .fabric import Fabric, GlobalStall, profile_by_name
from .memory import Location
from .metrics import histogram, matrix_csv, modes, pull_latency_distribution, validate_matrix

EXIT_OK = 0
EXIT_UNKNOWN = 1
EXIT_UNMET = 2
EXIT_STALL = 3
EXIT_MISMATCH = 4


@contextmanager
def _output(path: str):
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _fail(code: int, msg: str):
    click.echo(msg, err=True)
    sys.exit(code)


@click.group()
def main():
    """Uni-directional RDMA data channels on a deterministic simulated fabric."""


@main.command()
@click.option("--channel", required=True, help="Channel selector, e.g. ring.zeroing.")
@click.option("--profile", default="ib", show_default=True, help="Transport profile: ib, efa or 1rma.")
@click.option("--msg-size", default=64, show_default=True, type=int)
@click.option("--count", default=1000, show_default=True, type=int)
@click.option("--outstanding", default=1, show_default=True, type=int)
@click.option("--senders", default=1, show_default=True, type=int)
@click.option("--readers", default=1, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--head-loc", type=click.Choice(["host", "device"]), default="host", show_default=True)
@click.option("--tail-loc", type=click.Choice(["host", "device"]), default="host", show_default=True)
@click.option("--prefetch", default=4, show_default=True, type=int)
@click.option("--ack-batch", default=1, show_default=True, type=int)
@click.option("--ring-capacity", default=4096, show_default=True, type=int, help="Ring size in bytes.")
@click.option("--hrt-cost", default=10, show_default=True, type=int)
@click.option("--pcie-rt", default=0, show_default=True, type=int)
@click.option("--out", default="-", show_default=True, help="Output path or - for stdout.")
def run(channel, profile, msg_size, count, outstanding, senders, readers, seed, head_loc, tail_loc, prefetch,
        ack_batch, ring_capacity, hrt_cost, pcie_rt, out):
    """Run a workload and write one RunStats CSV row."""
    if channel not in TABLE2:
        _fail(EXIT_UNKNOWN, f"unknown channel selector {channel!r}")
    try:
        prof = profile_by_name(profile)
    except ValueError as e:
        _fail(EXIT_UNKNOWN, str(e))
    cfg = ChannelConfig(
        ack_batch=ack_batch,
        prefetch_bytes=prefetch,
        head_loc=Location(head_loc),
        tail_loc=Location(tail_loc),
        ring_capacity=ring_capacity,
    )
    f = Fabric(prof, seed, hrt_cost=hrt_cost, pcie_rt=pcie_rt)
    try:
        if senders > 1:
            stats = fanin_workload(channel, f, senders, msg_size, count, cfg)
        elif readers > 1:
            stats = fanout_workload(channel, f, readers, msg_size, count, cfg)
        else:
            dp = compose(channel, f, f.endpoint("client"), f.endpoint("server"), ack_batch, cfg)
            stats = echo_workload(dp, msg_size, count, outstanding)
    except RequirementUnmet as e:
        _fail(EXIT_UNMET, f"REQUIREMENT_UNMET: {e}")
    except GlobalStall as e:
        _fail(EXIT_STALL, f"stall: {e}")
    with _output(out) as fh:
        fh.write(",".join(RUN_COLUMNS) + "\n")
        fh.write(stats.csv_line() + "\n")
    sys.exit(EXIT_OK)


@main.command()
@click.option("--out", default="-", show_default=True, help="Report path or - for stdout.")
@click.option("--channel", "channels", multiple=True, help="Restrict to these selectors (repeatable).")
def matrix(out, channels):
    """Measure every channel and compare with its declared feature row."""
    for c in channels:
        if c not in TABLE2:
            _fail(EXIT_UNKNOWN, f"unknown channel selector {c!r}")
    entries = validate_matrix(channels or None)
    with _output(out) as fh:
        fh.write(matrix_csv(entries))
    ok = sum(e.match for e in entries)
    click.echo(f"{ok}/{len(entries)} channels match", err=True)
    sys.exit(EXIT_OK if ok == len(entries) else EXIT_MISMATCH)


@main.command()
@click.option("--channel", required=True, help="Read-ring selector.")
@click.option("--count", default=400, show_default=True, type=int)
@click.option("--phase", default=20, show_default=True, type=int, help="Publisher lag after the pull starts, 0..phase ticks.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--prefetch", default=4, show_default=True, type=int)
@click.option("--hrt-cost", default=10, show_default=True, type=int)
@click.option("--out", default="-", show_default=True)
def dist(channel, count, phase, seed, prefetch, hrt_cost, out):
    """Histogram of per-message pull latencies for a read ring."""
    if channel not in TABLE2:
        _fail(EXIT_UNKNOWN, f"unknown channel selector {channel!r}")
    try:
        spec_for(channel)
        lat = pull_latency_distribution(channel, count, phase, seed, hrt_cost=hrt_cost,
                                        config=ChannelConfig(prefetch_bytes=prefetch))
    except RequirementUnmet as e:
        _fail(EXIT_UNMET, f"REQUIREMENT_UNMET: {e}")
    except ChannelError as e:
        _fail(EXIT_UNKNOWN, str(e))
    except GlobalStall as e:
        _fail(EXIT_STALL, f"stall: {e}")
    total = len(lat)
    with _output(out) as fh:
        fh.write("latency_ticks,count,fraction\n")
        for v, n in histogram(lat):
            fh.write(f"{v},{n},{fmt6(n / total)}\n")
    click.echo("modes: " + " ".join(str(m) for m in modes(lat)), err=True)
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()

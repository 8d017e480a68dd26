"""Registered memory regions, circular views, and copy accounting.

Regions are plain ``bytearray`` stores owned by one endpoint. Network
(DMA) accesses go through the ``dma_*`` methods and are never counted as
CPU work; application and channel code uses the ``cpu_*`` helpers, which
charge a PCIe round trip when the region lives in device memory.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Union

__all__ = [
    "Access",
    "Location",
    "Provenance",
    "MemoryRegion",
    "CircularBuffer",
    "Region",
    "GatherList",
    "MAX_GATHER",
    "pad4",
    "ring_view",
    "copy_instrumented",
    "hexdump",
]

MAX_GATHER = 16
DEFAULT_DEVICE_CAP = 256 * 1024

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class Access(enum.Flag):
    NONE = 0
    LOCAL_WRITE = enum.auto()
    REMOTE_WRITE = enum.auto()
    REMOTE_READ = enum.auto()
    REMOTE_ATOMIC = enum.auto()


class Location(enum.Enum):
    HOST = "host"
    DEVICE = "device"


class Provenance(enum.Enum):
    APP = "app"
    CHANNEL_POOL = "channel"


def pad4(n: int) -> int:
    return (n + 3) & ~3


class MemoryRegion:
    """A registered, zero-initialised byte store.

    ``circular`` is switched on by :func:`ring_view`; afterwards every
    access is reduced modulo the region length so that windows crossing the
    end behave as if the buffer were mapped twice back to back.
    """

    __slots__ = ("id", "owner", "length", "access", "location", "data", "circular", "owner_tag")

    def __init__(self, region_id, owner, length, access, location=Location.HOST, owner_tag="app"):
        self.id = region_id
        self.owner = owner
        self.length = length
        self.access = access
        self.location = location
        self.data = bytearray(length)
        self.circular = False
        self.owner_tag = owner_tag

    def __repr__(self):
        return f"<MR {self.id} len={self.length} {self.location.value}{' ring' if self.circular else ''}>"

    @property
    def is_device(self) -> bool:
        return self.location is Location.DEVICE

    # -- raw access -------------------------------------------------------

    def _check(self, offset: int, length: int) -> int:
        if length < 0 or length > self.length:
            raise IndexError(f"window of {length} bytes does not fit region {self.id}")
        if self.circular:
            return offset % self.length
        if offset < 0 or offset + length > self.length:
            raise IndexError(f"[{offset}, {offset + length}) outside region {self.id} of {self.length} bytes")
        return offset

    def _read(self, offset: int, length: int) -> bytes:
        off = self._check(offset, length)
        end = off + length
        if end <= self.length:
            return bytes(self.data[off:end])
        first = self.length - off
        return bytes(self.data[off:]) + bytes(self.data[: length - first])

    def _write(self, offset: int, payload) -> None:
        length = len(payload)
        off = self._check(offset, length)
        end = off + length
        if end <= self.length:
            self.data[off:end] = payload
            return
        first = self.length - off
        mv = memoryview(payload)
        self.data[off:] = mv[:first]
        self.data[: length - first] = mv[first:]

    # Network-side access: latency is charged by the fabric, not here.
    dma_read = _read
    dma_write = _write

    # -- CPU-side access --------------------------------------------------

    def _charge_cpu(self) -> None:
        if self.location is Location.DEVICE and self.owner is not None:
            self.owner.counters.add("pcie_round_trips")

    def cpu_read(self, offset: int, length: int) -> bytes:
        self._charge_cpu()
        return self._read(offset, length)

    def cpu_write(self, offset: int, payload) -> None:
        self._charge_cpu()
        self._write(offset, payload)

    def cpu_fill(self, offset: int, length: int, value: int = 0) -> None:
        self._charge_cpu()
        self._write(offset, bytes([value]) * length)

    def load_u32(self, offset: int) -> int:
        self._charge_cpu()
        if not self.circular or (offset % self.length) + 4 <= self.length:
            off = self._check(offset, 4)
            return _U32.unpack_from(self.data, off)[0]
        return _U32.unpack(self._read(offset, 4))[0]

    def store_u32(self, offset: int, value: int) -> None:
        self.cpu_write(offset, _U32.pack(value & 0xFFFFFFFF))

    def load_u64(self, offset: int) -> int:
        self._charge_cpu()
        return _U64.unpack(self._read(offset, 8))[0]

    def store_u64(self, offset: int, value: int) -> None:
        self.cpu_write(offset, _U64.pack(value & 0xFFFFFFFFFFFFFFFF))


class CircularBuffer:
    """Logically contiguous ring over a registered region."""

    __slots__ = ("region", "capacity")

    def __init__(self, region: MemoryRegion, capacity: int):
        self.region = region
        self.capacity = capacity

    def wrap(self, offset: int) -> int:
        return offset % self.capacity

    def write_window(self, offset: int, payload) -> None:
        self.region.cpu_write(offset % self.capacity, payload)

    def read_window(self, offset: int, length: int) -> bytes:
        return self.region.cpu_read(offset % self.capacity, length)

    def zero_window(self, offset: int, length: int) -> None:
        self.region.cpu_fill(offset % self.capacity, length, 0)


def ring_view(region: MemoryRegion, capacity: Optional[int] = None) -> CircularBuffer:
    """Turn ``region`` into a ring; ``capacity`` must equal its length and be a power of two."""
    if capacity is None:
        capacity = region.length
    if capacity != region.length:
        raise ValueError("ring capacity must equal the region length")
    if capacity <= 0 or capacity & (capacity - 1):
        raise ValueError(f"ring capacity {capacity} is not a power of two")
    region.circular = True
    return CircularBuffer(region, capacity)


@dataclass(eq=False)
class Region:
    """An application-visible message buffer: a window into a registered region."""

    mr: MemoryRegion
    offset: int
    length: int
    provenance: Provenance = Provenance.APP
    source: Optional[int] = None
    tag: object = None
    pulled_at: Optional[int] = None  # tick the successful pull chain started (pull channels)

    def tobytes(self) -> bytes:
        return self.mr._read(self.offset, self.length)

    def fill(self, payload) -> None:
        """Application-side production of payload (not counted as a channel copy)."""
        if len(payload) > self.length:
            raise ValueError("payload larger than region")
        self.mr._write(self.offset, payload)

    def sge(self):
        return (self.mr, self.offset, self.length)

    def sub(self, start: int, length: int) -> "Region":
        return Region(self.mr, self.offset + start, length, self.provenance, self.source, self.tag, self.pulled_at)


class GatherList(list):
    """Ordered (region, offset, length) triples, at most 16 entries."""

    def __init__(self, entries: Iterable = ()):
        super().__init__(entries)
        if len(self) > MAX_GATHER:
            raise ValueError(f"gather list has {len(self)} entries, limit is {MAX_GATHER}")

    @property
    def total(self) -> int:
        return sum(e[2] for e in self)


def copy_instrumented(src: Union[Region, tuple], dst: Union[Region, tuple]) -> None:
    """CPU copy from ``src`` to ``dst``; the copying endpoint is charged ``cpu_copy_bytes``."""
    smr, soff, slen = src.sge() if isinstance(src, Region) else src
    dmr, doff, dlen = dst.sge() if isinstance(dst, Region) else dst
    if slen != dlen:
        raise ValueError(f"copy length mismatch: {slen} != {dlen}")
    if smr is dmr and slen:
        n = smr.length
        a = soff % n if smr.circular else soff
        b = doff % n if smr.circular else doff
        if a < b + dlen and b < a + slen:
            raise ValueError("overlapping copy within one region")
    payload = smr.cpu_read(soff, slen)
    dmr.cpu_write(doff, payload)
    owner = smr.owner or dmr.owner
    if owner is not None:
        owner.counters.add("cpu_copy_bytes", slen)


def hexdump(data: bytes, base: int = 0) -> str:
    """``offset: 16 bytes hex`` lines for golden-layout tests."""
    lines = []
    for i in range(0, len(data), 16):
        chunk = data[i : i + 16]
        lines.append(f"{base + i:08x}: {chunk.hex(' ')}")
    return "\n".join(lines)

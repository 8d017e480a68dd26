"""Frozen expected values. Everything here is transcribed by hand, never computed by the package."""

from __future__ import annotations

H = 10  # hrt_cost used throughout the tests

# Feature table of the uni-directional channels, cell text as printed in the source table.
# columns: hrt, req_send, req_recv, blocking, zc_send, zc_recv, variable, mem_1toN, mem_Nto1, requests, in-order
PAPER_TABLE2 = {
    "sendrecv.normal": ("1", "1", "0", "Y", "Y", "N", "N", "O(1)", "O(N)", "Send", "No"),
    "sendrecv.shared": ("1", "1", "0", "Y", "Y", "N", "N", "O(1)", "O(1)", "Send", "No"),
    "sendrecv.bufferless": ("1", "1", "0", "Y", "N/A", "N/A", "N/A", "O(1)", "O(1)", "Send", "No"),
    "wslot.detached": ("1", "2", "0", "(Y/N)", "Y", "Y", "N", "O(1)", "O(N)", "Write", "Messages"),
    "wslot.inlined": ("1", "1", "0", "N", "Y", "Y", "N", "O(1)", "O(N)", "Write", "Bytes"),
    "wslot.imm": ("1", "1", "0", "Y", "Y", "Y", "N", "O(1)", "O(N)", "Write", "No"),
    "wslot.reserve": ("3", ">=2", "1", "(Y/N)", "Y", "Y", "N", "O(1)", "O(1)", "Write", "(No/Yes)"),
    "ring.detached": ("1", "2", "0", "N", "Y", "N", "Y", "O(1)", "O(N)", "Write", "Messages"),
    "ring.imm": ("1", "1", "0", "Y", "Y", "N", "Y", "O(1)", "O(N)", "Write", "No"),
    "ring.zeroing": ("1", "1", "0", "N", "Y", "N", "Y", "O(1)", "O(N)", "Write", "Bytes"),
    "ring.nozeroing": ("1", "1", "0", "N", "Y", "N", "Y", "O(1)", "O(N)", "Write", "Messages, Bytes"),
    "sring.imm": ("3", ">=2", "0", "Y", "Y", "N", "Y", "O(1)", "O(1)", "Write, Atomic", "No"),
    "sring.zeroing": ("3", ">=2", "0", "N", "Y", "N", "Y", "O(1)", "O(1)", "Write, Atomic", "Bytes"),
    "rslot.detached": (">=4", "0", ">=2", "N", "Y", "Y", "Y", "O(1)", "O(1)", "Read", "No"),
    "rslot.inlined": (">=2", "0", ">=1", "N", "Y", "Y", "N", "O(1)", "O(1)", "Read", "No"),
    "rslot.notify": ("3", "1", "1", "(Y/N)", "Y", "Y", "Y", "O(1)", "O(1)", "Read", "No"),
    "rslot.indirect": ("2", "1", "1", "(Y/N)", "Y", "Y", "N", "O(1)", "O(1)", "Write", "(No/Yes)"),
    "rring.detached": (">=4", "0", ">=2", "N", "N", "Y", "Y", "O(1)", "O(1)", "Read", "No"),
    "rring.inlined": (">=4", "0", ">=2", "N", "N", "Y", "Y", "O(1)", "O(1)", "Read", "No"),
    "rring.notify": ("3", "1", "1", "(Y/N)", "N", "Y", "Y", "O(1)", "O(1)", "Read", "No"),
}

# transport capabilities (request kinds per profile)
PROFILE_REQUESTS = {
    "IB_ROCE": {"SEND", "WRITE", "WRITE_IMM", "READ", "FETCH_ADD", "CMP_SWAP"},
    "EFA": {"SEND", "READ"},
    "ONE_RMA": {"READ", "WRITE"},
}

# channels that must refuse construction on a profile, with the missing requirement named
UNMET = {
    ("ring.nozeroing", "efa"): "WRITE unsupported",
    ("ring.nozeroing", "1rma"): "in-order message delivery",
    ("wslot.inlined", "1rma"): "in-order byte delivery",
    ("sring.zeroing", "1rma"): "FETCH_ADD unsupported",
}

# Zeroing ring record for b"hello": [len=5][payload][3 pad][done=1]
GOLDEN_ZEROING_HELLO = "00000000: 05 00 00 00 68 65 6c 6c 6f 00 00 00 01 00 00 00"

# Reverse ring record for b"hello" at the top of a 64-byte ring: [zero][3 pad][payload][len=5]
GOLDEN_NOZEROING_HELLO = "00000030: 00 00 00 00 00 00 00 68 65 6c 6c 6f 05 00 00 00"

RUN_HEADER = (
    "channel,profile,msg_size,count,outstanding,p50_ticks,p90_ticks,"
    "reqs_send,reqs_recv,copies_send,copies_recv,recv_registered_bytes"
)
MATRIX_HEADER = (
    "channel,profile,hrt,req_send,req_recv,blocking_recv,zc_send,zc_recv,"
    "variable,mem_1toN,mem_Nto1,requests,ordering,match"
)
DIST_HEADER = "latency_ticks,count,fraction"
TRACE_LINE = r"^tick=\d+ ep=\d+ kind=[A-Z_]+ wr=\d+ status=[A-Z_]+ len=\d+ imm=(-|\d+)$"

"""Simulated TCP/IP primitives: host addresses, segments, and 32-bit
sequence arithmetic.

Sequence numbers are plain ints carried modulo 2**32. All wrap-aware
arithmetic goes through ``seq_add`` / ``seq_sub`` / ``seq_lt`` so the rest
of the stack never has to think about wraparound.

Deliberately omitted: checksums (links are lossless, integrity is
structural) and TCP options (nothing here negotiates them, and an options
mismatch between a server and its clone would be fingerprintable).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

SEQ_MOD = 2**32
SEQ_HALF = 2**31


class TcpFlags(enum.Flag):
    """TCP header flags. Segments carry any subset; test with ``&``."""

    NONE = 0
    SYN = enum.auto()
    ACK = enum.auto()
    FIN = enum.auto()
    RST = enum.auto()
    PSH = enum.auto()


def seq_add(s: int, delta: int) -> int:
    """Advance sequence number ``s`` by ``delta``, wrapping modulo 2**32."""
    return (s + delta) % SEQ_MOD


def seq_sub(a: int, b: int) -> int:
    """Distance from ``b`` forward to ``a``, modulo 2**32."""
    return (a - b) % SEQ_MOD


def seq_lt(a: int, b: int) -> bool:
    """True iff ``a`` precedes ``b`` in the 2**31-windowed circular order.

    Irreflexive; a strict total order on any window of fewer than 2**31
    consecutive values.
    """
    return a != b and (b - a) % SEQ_MOD < SEQ_HALF


def seq_leq(a: int, b: int) -> bool:
    return a == b or seq_lt(a, b)


@dataclass(frozen=True, slots=True)
class HostAddr:
    """Network identity of a host: IPv4 address plus MAC.

    Two hosts present "the same" identity iff both fields match; a honey
    server configured to impersonate a victim must therefore carry the
    victim's exact ip *and* mac.
    """

    ip: str
    mac: str


@dataclass(frozen=True, slots=True)
class TcpSegment:
    """One simulated TCP/IP segment.

    ``seq``/``ack`` are normalized modulo 2**32 on construction. A segment
    never carries both SYN and FIN. ``ts_sent`` is stamped (in simulated
    microseconds) when the segment is handed to a link.
    """

    src: HostAddr
    dst: HostAddr
    sport: int
    dport: int
    seq: int
    ack: int
    flags: TcpFlags
    payload: bytes = b""
    ts_sent: int = 0

    def __post_init__(self) -> None:
        if (self.flags & TcpFlags.SYN) and (self.flags & TcpFlags.FIN):
            raise ValueError("segment cannot carry both SYN and FIN")
        object.__setattr__(self, "seq", self.seq % SEQ_MOD)
        object.__setattr__(self, "ack", self.ack % SEQ_MOD)

    def has(self, flag: TcpFlags) -> bool:
        return bool(self.flags & flag)

    @property
    def is_data(self) -> bool:
        return len(self.payload) > 0


def seg_span(seg: TcpSegment) -> int:
    """Sequence units the segment consumes: payload bytes, +1 per SYN/FIN."""
    span = len(seg.payload)
    if seg.flags & TcpFlags.SYN:
        span += 1
    if seg.flags & TcpFlags.FIN:
        span += 1
    return span


def seg_end(seg: TcpSegment) -> int:
    """First sequence number *after* the segment's span."""
    return seq_add(seg.seq, seg_span(seg))


def five_tuple(seg) -> tuple[str, int, str, int]:
    """Directed flow key (src ip, sport, dst ip, dport) of any packet."""
    return (seg.src.ip, seg.sport, seg.dst.ip, seg.dport)

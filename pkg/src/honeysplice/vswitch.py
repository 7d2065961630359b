"""Software switch with a programmable match-action flow table.

Processing order for every packet entering the switch:

1. an unmodified copy is handed to the mirror taps (detection and
   connection bookkeeping live there) -- taps may install or remove
   rules, and the subsequent lookup sees the updated table, so a tap
   reacting to a packet can decide that same packet's fate;
2. best-match rule lookup (highest priority wins, ties to the earliest
   installed rule); exactly one rule fires;
3. the rule's action list runs in order: REWRITE transforms the packet,
   OUTPUT forwards the current form out a port, BUFFER parks it in a
   named queue, DROP discards, PACKET_IN escalates to the controller.

On a table miss the packet is held (not dropped) and escalated; the
controller is expected to install rules and release it. A hold timeout
(default one simulated second) guards against a dead controller.

Packets re-entering via ``release_buffer``/``release_held`` are *not*
mirrored again: the taps saw them on first entry.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

from .netcore import HostAddr, TcpFlags, TcpSegment, seq_add
from .simnet import Engine, Link


class UnknownCookie(Exception):
    """remove_rule called with a cookie not in the table."""


class UnknownQueue(Exception):
    """release_buffer called for a queue that was never created."""


@dataclass(frozen=True, slots=True)
class FlowMatch:
    """Predicates on a packet; an absent (None) field matches anything.

    ``flags_req`` is a required subset: it matches TCP segments carrying
    at least those flags, and never matches non-TCP packets.
    """

    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    sport: Optional[int] = None
    dport: Optional[int] = None
    flags_req: Optional[TcpFlags] = None

    def matches(self, pkt) -> bool:
        if self.src_ip is not None and pkt.src.ip != self.src_ip:
            return False
        if self.dst_ip is not None and pkt.dst.ip != self.dst_ip:
            return False
        if self.sport is not None and pkt.sport != self.sport:
            return False
        if self.dport is not None and pkt.dport != self.dport:
            return False
        if self.flags_req is not None:
            flags = getattr(pkt, "flags", None)
            if flags is None or (flags & self.flags_req) != self.flags_req:
                return False
        return True

    @property
    def exact_key(self) -> Optional[tuple[str, int, str, int]]:
        """Index key when all four address/port fields are concrete."""
        if None in (self.src_ip, self.dst_ip, self.sport, self.dport):
            return None
        return (self.src_ip, self.sport, self.dst_ip, self.dport)


@dataclass(frozen=True, slots=True)
class Output:
    port: int


@dataclass(frozen=True, slots=True)
class Rewrite:
    """Shift seq/ack modulo 2**32 and optionally rewrite addresses."""

    seq_delta: int = 0
    ack_delta: int = 0
    new_src: Optional[HostAddr] = None
    new_dst: Optional[HostAddr] = None

    def apply(self, pkt):
        changes = {}
        if isinstance(pkt, TcpSegment):
            if self.seq_delta:
                changes["seq"] = seq_add(pkt.seq, self.seq_delta)
            if self.ack_delta:
                changes["ack"] = seq_add(pkt.ack, self.ack_delta)
        if self.new_src is not None:
            changes["src"] = self.new_src
        if self.new_dst is not None:
            changes["dst"] = self.new_dst
        return replace(pkt, **changes) if changes else pkt


@dataclass(frozen=True, slots=True)
class Buffer:
    queue: str


@dataclass(frozen=True, slots=True)
class Drop:
    pass


@dataclass(frozen=True, slots=True)
class PacketIn:
    pass


FlowAction = Union[Output, Rewrite, Buffer, Drop, PacketIn]


@dataclass(slots=True)
class FlowRule:
    priority: int
    match: FlowMatch
    actions: tuple[FlowAction, ...]
    cookie: int = 0
    _seqno: int = 0  # insertion order, assigned by the switch


class Switch:
    """Single software switch; one per simulation instance."""

    def __init__(self, engine: Engine, miss_hold_timeout_us: int = 1_000_000):
        self._engine = engine
        self.miss_hold_timeout_us = miss_hold_timeout_us
        self._ports: dict[int, Link] = {}
        self._next_port = 1
        # table: exact-keyed rules indexed for O(1) lookup, the rest scanned
        self._exact: dict[tuple, list[FlowRule]] = {}
        self._wild: list[FlowRule] = []
        self._by_cookie: dict[int, FlowRule] = {}
        self._next_cookie = 1
        self._next_seqno = 1
        self._buffers: dict[str, list] = {}
        self._held: dict[int, object] = {}
        self._next_hold = 1
        self.mirror_taps: list[Callable[[object], None]] = []
        self.packet_in_handler: Optional[Callable[[object, int], None]] = None
        self.stats = {"processed": 0, "miss": 0, "hold_expired": 0}

    # -- topology ----------------------------------------------------------

    def attach(self, link: Link) -> int:
        """Attach a device via its switch-to-device link; returns the port."""
        port = self._next_port
        self._next_port += 1
        self._ports[port] = link
        return port

    # -- table management ----------------------------------------------------

    def install_rule(self, rule: FlowRule) -> int:
        rule.cookie = self._next_cookie
        self._next_cookie += 1
        rule._seqno = self._next_seqno
        self._next_seqno += 1
        key = rule.match.exact_key
        if key is not None:
            self._exact.setdefault(key, []).append(rule)
        else:
            self._wild.append(rule)
        self._by_cookie[rule.cookie] = rule
        return rule.cookie

    def remove_rule(self, cookie: int) -> bool:
        rule = self._by_cookie.pop(cookie, None)
        if rule is None:
            raise UnknownCookie(f"no rule with cookie {cookie}")
        key = rule.match.exact_key
        if key is not None:
            bucket = self._exact[key]
            bucket.remove(rule)
            if not bucket:
                del self._exact[key]
        else:
            self._wild.remove(rule)
        return True

    def rules(self) -> list[FlowRule]:
        return list(self._by_cookie.values())

    def _lookup(self, pkt) -> Optional[FlowRule]:
        key = (pkt.src.ip, pkt.sport, pkt.dst.ip, pkt.dport)
        best = None
        for rule in self._exact.get(key, ()):
            if rule.match.matches(pkt):
                if best is None or (rule.priority, -rule._seqno) > (best.priority, -best._seqno):
                    best = rule
        for rule in self._wild:
            if rule.match.matches(pkt):
                if best is None or (rule.priority, -rule._seqno) > (best.priority, -best._seqno):
                    best = rule
        return best

    # -- buffering -------------------------------------------------------------

    def create_queue(self, queue_id: str) -> None:
        self._buffers.setdefault(queue_id, [])

    def release_buffer(self, queue_id: str, rewrite: Optional[Rewrite] = None) -> int:
        """Re-inject buffered packets in arrival order; returns the count."""
        if queue_id not in self._buffers:
            raise UnknownQueue(queue_id)
        pkts = self._buffers[queue_id]
        self._buffers[queue_id] = []
        for pkt in pkts:
            if rewrite is not None:
                pkt = rewrite.apply(pkt)
            self.process(pkt, mirror=False)
        return len(pkts)

    def queue_len(self, queue_id: str) -> int:
        if queue_id not in self._buffers:
            raise UnknownQueue(queue_id)
        return len(self._buffers[queue_id])

    # -- data path ---------------------------------------------------------------

    def process(self, pkt, mirror: bool = True) -> None:
        self.stats["processed"] += 1
        if mirror:
            for tap in self.mirror_taps:
                tap(pkt)
        rule = self._lookup(pkt)
        if rule is None:
            self._escalate(pkt)
            return
        for act in rule.actions:
            if isinstance(act, Output):
                link = self._ports.get(act.port)
                if link is not None:
                    link.send(pkt)
            elif isinstance(act, Rewrite):
                pkt = act.apply(pkt)
            elif isinstance(act, Buffer):
                self._buffers.setdefault(act.queue, []).append(pkt)
                return
            elif isinstance(act, Drop):
                return
            elif isinstance(act, PacketIn):
                self._escalate(pkt)
                return

    def _escalate(self, pkt) -> None:
        self.stats["miss"] += 1
        hold_id = self._next_hold
        self._next_hold += 1
        self._held[hold_id] = pkt
        self._engine.schedule_in(lambda h=hold_id: self._expire_hold(h),
                                 self.miss_hold_timeout_us)
        if self.packet_in_handler is not None:
            self.packet_in_handler(pkt, hold_id)

    def _expire_hold(self, hold_id: int) -> None:
        if self._held.pop(hold_id, None) is not None:
            self.stats["hold_expired"] += 1

    def release_held(self, hold_id: int) -> bool:
        """Re-process a held miss packet (post rule install)."""
        pkt = self._held.pop(hold_id, None)
        if pkt is None:
            return False
        self.process(pkt, mirror=False)
        return True

    def drop_held(self, hold_id: int) -> bool:
        return self._held.pop(hold_id, None) is not None

    def send_out(self, port: int, pkt) -> None:
        """Direct transmit on a port (controller-originated packets)."""
        link = self._ports.get(port)
        if link is not None:
            link.send(pkt)

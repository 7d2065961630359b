"""TCP-lite endpoint state machine and the deterministic server app.

The endpoint implements exactly the machinery the redirection mechanism
exercises: three-way handshake, in-order data with cumulative acks,
duplicate tolerance (a replayed splice can re-present segments), FIN/RST
teardown. No retransmission timers, windows, or congestion control:
links are lossless and ordered.

States: CLOSED -> SYN_SENT | SYN_RCVD -> ESTABLISHED -> FIN_WAIT /
CLOSE_WAIT -> CLOSED_FINAL. RST jumps straight to CLOSED_FINAL.
"""

from __future__ import annotations

import enum
import random
from typing import Callable, Optional

from .netcore import (
    SEQ_MOD,
    HostAddr,
    TcpFlags,
    TcpSegment,
    seg_end,
    seq_add,
    seq_leq,
    seq_lt,
    seq_sub,
)


class InvalidState(Exception):
    """Operation not legal in the connection's current state."""


class EmptyPayload(Exception):
    """app_send called with zero bytes."""


class ConnState(enum.Enum):
    CLOSED = "CLOSED"
    SYN_SENT = "SYN_SENT"
    SYN_RCVD = "SYN_RCVD"
    ESTABLISHED = "ESTABLISHED"
    FIN_WAIT = "FIN_WAIT"
    CLOSE_WAIT = "CLOSE_WAIT"
    CLOSED_FINAL = "CLOSED_FINAL"


IssPolicy = Callable[[], int]


def fixed_iss(value: int) -> IssPolicy:
    """ISS policy that always returns ``value`` (exact unit tests)."""
    return lambda: value % SEQ_MOD


def random_iss(rng: random.Random) -> IssPolicy:
    """Seeded-random ISS policy; reproducible for a fixed stream."""
    return lambda: rng.randrange(SEQ_MOD)


class TcpEndpoint:
    """One side of a TCP-lite connection.

    Callers drive it with ``open`` / ``on_segment`` / ``app_send`` /
    ``close`` / ``abort`` and transmit whatever segments those return.
    ``now`` is passed in rather than read from a clock so the endpoint
    stays a pure state machine.
    """

    def __init__(self, local: HostAddr, lport: int, remote: HostAddr, rport: int,
                 iss_policy: IssPolicy):
        self.local = local
        self.lport = lport
        self.remote = remote
        self.rport = rport
        self._iss_policy = iss_policy
        self.state = ConnState.CLOSED
        self.iss = 0
        self.snd_nxt = 0
        self.rcv_nxt = 0
        self.sent_log: list[tuple[bytes, int]] = []
        self.rcvd_stream = bytearray()

    # -- segment construction -------------------------------------------------

    def _make(self, flags: TcpFlags, seq: int, payload: bytes = b"") -> TcpSegment:
        return TcpSegment(src=self.local, dst=self.remote, sport=self.lport,
                          dport=self.rport, seq=seq, ack=self.rcv_nxt,
                          flags=flags, payload=payload)

    def _ack_now(self) -> TcpSegment:
        return self._make(TcpFlags.ACK, self.snd_nxt)

    # -- operations ------------------------------------------------------------

    def open(self) -> TcpSegment:
        """Active open: emit SYN with a fresh ISS, move to SYN_SENT."""
        if self.state is not ConnState.CLOSED:
            raise InvalidState(f"open in {self.state.name}")
        self.iss = self._iss_policy()
        seg = TcpSegment(src=self.local, dst=self.remote, sport=self.lport,
                         dport=self.rport, seq=self.iss, ack=0,
                         flags=TcpFlags.SYN)
        self.snd_nxt = seq_add(self.iss, 1)
        self.state = ConnState.SYN_SENT
        return seg

    def app_send(self, data: bytes, now: int = 0) -> TcpSegment:
        """Send application bytes as one PSH-ACK segment."""
        if self.state is not ConnState.ESTABLISHED:
            raise InvalidState(f"app_send in {self.state.name}")
        if not data:
            raise EmptyPayload("refusing to send empty payload")
        seg = self._make(TcpFlags.PSH | TcpFlags.ACK, self.snd_nxt, bytes(data))
        self.snd_nxt = seq_add(self.snd_nxt, len(data))
        self.sent_log.append((bytes(data), now))
        return seg

    def close(self) -> TcpSegment:
        """Graceful close: FIN consumes one sequence unit."""
        if self.state is not ConnState.ESTABLISHED:
            raise InvalidState(f"close in {self.state.name}")
        seg = self._make(TcpFlags.FIN | TcpFlags.ACK, self.snd_nxt)
        self.snd_nxt = seq_add(self.snd_nxt, 1)
        self.state = ConnState.FIN_WAIT
        return seg

    def abort(self) -> TcpSegment:
        """Hard reset toward the peer; terminates immediately."""
        if self.state in (ConnState.CLOSED, ConnState.CLOSED_FINAL):
            raise InvalidState(f"abort in {self.state.name}")
        seg = self._make(TcpFlags.RST | TcpFlags.ACK, self.snd_nxt)
        self.state = ConnState.CLOSED_FINAL
        return seg

    def on_segment(self, seg: TcpSegment, now: int = 0) -> tuple[list[TcpSegment], bytes]:
        """Process one inbound segment.

        Returns (segments to emit, application bytes delivered). Protocol
        anomalies are states, not exceptions: out-of-window data is
        re-acked and dropped, RST silences the connection.
        """
        if seg.flags & TcpFlags.RST:
            self.state = ConnState.CLOSED_FINAL
            return [], b""

        st = self.state
        if st is ConnState.CLOSED:
            if (seg.flags & TcpFlags.SYN) and not (seg.flags & TcpFlags.ACK):
                # passive open: answer SYN with SYN-ACK
                self.remote = seg.src
                self.rport = seg.sport
                self.iss = self._iss_policy()
                self.rcv_nxt = seq_add(seg.seq, 1)
                self.snd_nxt = seq_add(self.iss, 1)
                self.state = ConnState.SYN_RCVD
                synack = self._make(TcpFlags.SYN | TcpFlags.ACK, self.iss)
                return [synack], b""
            return [], b""

        if st is ConnState.SYN_SENT:
            if (seg.flags & TcpFlags.SYN) and (seg.flags & TcpFlags.ACK) \
                    and seg.ack == self.snd_nxt:
                self.rcv_nxt = seq_add(seg.seq, 1)
                self.state = ConnState.ESTABLISHED
                return [self._ack_now()], b""
            return [], b""

        if st is ConnState.SYN_RCVD:
            if (seg.flags & TcpFlags.ACK) and seg.ack == self.snd_nxt:
                self.state = ConnState.ESTABLISHED
                if seg.is_data or (seg.flags & TcpFlags.FIN):
                    return self._on_established_segment(seg)
                return [], b""
            return [], b""

        if st in (ConnState.ESTABLISHED, ConnState.FIN_WAIT, ConnState.CLOSE_WAIT):
            return self._on_established_segment(seg)

        return [], b""

    def _on_established_segment(self, seg: TcpSegment) -> tuple[list[TcpSegment], bytes]:
        delivered = b""
        advanced = False

        if seg.is_data:
            end = seg_end(seg)
            if seq_leq(end, self.rcv_nxt):
                # pure duplicate (e.g. re-presented by a splice replay): re-ack
                return [self._ack_now()], b""
            if seq_lt(self.rcv_nxt, seg.seq):
                # gap ahead of us; ack what we have, deliver nothing
                return [self._ack_now()], b""
            # in order (possibly overlapping the left edge)
            offset = seq_sub(self.rcv_nxt, seg.seq)
            delivered = seg.payload[offset:]
            self.rcvd_stream.extend(delivered)
            self.rcv_nxt = seq_add(self.rcv_nxt, len(delivered))
            advanced = True

        if seg.flags & TcpFlags.FIN:
            fin_seq = seq_add(seg.seq, len(seg.payload))
            if fin_seq == self.rcv_nxt:
                self.rcv_nxt = seq_add(self.rcv_nxt, 1)
                advanced = True
                if self.state is ConnState.ESTABLISHED:
                    self.state = ConnState.CLOSE_WAIT
                elif self.state is ConnState.FIN_WAIT:
                    self.state = ConnState.CLOSED_FINAL

        if advanced:
            return [self._ack_now()], delivered
        return [], b""


class ServerApp:
    """Deterministic request/response application.

    Two instances with the same ``app_id`` fed the same request sequence
    produce byte-identical responses; that determinism is what makes a
    freshly instantiated clone behaviorally indistinguishable from the
    server it copies (once its request history has been replayed).
    """

    def __init__(self, app_id: str,
                 response_fn: Optional[Callable[[bytes, int], bytes]] = None):
        self.app_id = app_id
        self._fn = response_fn or counter_echo(app_id)
        self.request_count = 0
        self.request_log: list[bytes] = []

    def respond(self, request: bytes) -> bytes:
        self.request_count += 1
        self.request_log.append(bytes(request))
        return self._fn(bytes(request), self.request_count)


def counter_echo(app_id: str) -> Callable[[bytes, int], bytes]:
    """Default app behavior: echo the request tagged with a running count."""
    prefix = app_id.encode("utf-8")

    def fn(request: bytes, count: int) -> bytes:
        return prefix + b"#%06d|" % count + request

    return fn

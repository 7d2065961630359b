"""Hosts attached to the switch: the scripted attacker client, TCP servers
(victim and honey alike), and the echo responders used as background load.

Each host owns an uplink toward the switch; the switch owns the downlink
back. Servers can additionally be driven *out of band* (deliver_oob):
the segment is processed normally but emissions are returned to the
caller instead of transmitted. That is the seam the controller uses to
forge handshakes and replay recorded payloads without touching the data
plane.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Optional

from .endpoint import ConnState, IssPolicy, ServerApp, TcpEndpoint
from .netcore import HostAddr, TcpFlags, TcpSegment
from .simnet import BackgroundLoadSpec, EchoPacket, Engine, Link, LinkModel
from .vswitch import Switch


class Host:
    """Base device: an address, an uplink, and a port on the switch."""

    def __init__(self, engine: Engine, name: str, addr: HostAddr):
        self.engine = engine
        self.name = name
        self.addr = addr
        self.uplink: Optional[Link] = None
        self.port: int = 0

    def attach(self, switch: Switch, model: LinkModel) -> int:
        """Wire host<->switch links (one per direction) and take a port."""
        self.uplink = Link(self.engine, f"{self.name}:up", model, switch.process)
        downlink = Link(self.engine, f"{self.name}:down", model, self.deliver)
        self.port = switch.attach(downlink)
        return self.port

    def transmit(self, pkt) -> None:
        self.uplink.send(replace(pkt, ts_sent=self.engine.now))

    def deliver(self, pkt) -> None:
        raise NotImplementedError


class ServerHost(Host):
    """TCP server host running one deterministic app on one listen port.

    The app (and its request log) lives on the *host*: it survives a
    connection being torn down and re-spliced, so replay only ever has to
    cover what the app has not yet seen.
    """

    def __init__(self, engine: Engine, name: str, addr: HostAddr,
                 listen_port: int, app: ServerApp, iss_policy: IssPolicy):
        super().__init__(engine, name, addr)
        self.listen_port = listen_port
        self.app = app
        self._iss_policy = iss_policy
        self.conns: dict[tuple[str, int], TcpEndpoint] = {}
        self.accepting = True

    def _endpoint_for(self, seg: TcpSegment) -> Optional[TcpEndpoint]:
        key = (seg.src.ip, seg.sport)
        conn = self.conns.get(key)
        is_syn = bool(seg.flags & TcpFlags.SYN) and not (seg.flags & TcpFlags.ACK)
        if conn is None or (is_syn and conn.state is ConnState.CLOSED_FINAL):
            if not is_syn or not self.accepting:
                return conn
            conn = TcpEndpoint(self.addr, self.listen_port, seg.src, seg.sport,
                               self._iss_policy)
            self.conns[key] = conn
        return conn

    def _handle(self, seg: TcpSegment) -> list[TcpSegment]:
        if seg.dport != self.listen_port:
            return []
        conn = self._endpoint_for(seg)
        if conn is None:
            return []
        emitted, delivered = conn.on_segment(seg, self.engine.now)
        if delivered and conn.state is ConnState.ESTABLISHED:
            # one data segment == one application request; the response's
            # piggybacked ack supersedes the endpoint's pure ack
            response = self.app.respond(delivered)
            emitted = [e for e in emitted if e.is_data or not (e.flags & TcpFlags.ACK)
                       or e.flags & (TcpFlags.SYN | TcpFlags.FIN | TcpFlags.RST)]
            emitted.append(conn.app_send(response, self.engine.now))
        return emitted

    def deliver(self, pkt) -> None:
        if not isinstance(pkt, TcpSegment):
            return
        for seg in self._handle(pkt):
            self.transmit(seg)

    def deliver_oob(self, seg: TcpSegment) -> list[TcpSegment]:
        """Process a forged segment; return emissions instead of sending."""
        return self._handle(seg)


def make_request(index: int, size: int) -> bytes:
    """Deterministic request payload k of a session, exactly ``size`` bytes."""
    stamp = b"r%06d-" % index
    reps = size // len(stamp) + 1
    return (stamp * reps)[:size]


class AttackerHost(Host):
    """Scripted client: the measurement instrument.

    Sends one fixed-size request every ``interval_us`` (pipelined on a
    timer, not lockstep), records per-request RTTs, and checks the
    stealth invariants on every inbound segment:

      * it never receives RST or FIN it did not initiate;
      * every ack received equals its snd_nxt at that moment;
      * peer data always lands exactly at rcv_nxt (one gapless stream).

    Violations are collected, not raised, so a run can report all of them.
    """

    def __init__(self, engine: Engine, name: str, addr: HostAddr,
                 server_addr: HostAddr, server_port: int, sport: int,
                 iss_policy: IssPolicy, total_requests: int,
                 interval_us: int, request_size: int = 32,
                 size_rng=None):
        super().__init__(engine, name, addr)
        self.conn = TcpEndpoint(addr, sport, server_addr, server_port, iss_policy)
        self.total = total_requests
        self.interval_us = interval_us
        self.request_size = request_size
        self._size_rng = size_rng  # when set, sizes draw uniform 1..request_size
        self.send_ts: dict[int, int] = {}
        self.recv_ts: dict[int, int] = {}
        self.sent_requests: list[bytes] = []
        self.received_stream = bytearray()
        self._responses_seen = 0
        self.violations: list[str] = []
        self.established_at: Optional[int] = None
        self.initiated_close = False

    # -- script ------------------------------------------------------------

    def start(self, at: int) -> None:
        self.engine.schedule(self._open, at)

    def _open(self) -> None:
        self.transmit(self.conn.open())

    def _send_request(self, index: int) -> None:
        size = self.request_size
        if self._size_rng is not None:
            size = self._size_rng.randint(1, self.request_size)
        payload = make_request(index, size)
        seg = self.conn.app_send(payload, self.engine.now)
        self.sent_requests.append(payload)
        self.send_ts[index] = self.engine.now
        self.transmit(seg)
        if index < self.total:
            self.engine.schedule_in(lambda i=index + 1: self._send_request(i),
                                    self.interval_us)

    # -- inbound -----------------------------------------------------------

    def _check_stealth(self, seg: TcpSegment) -> None:
        if seg.flags & TcpFlags.RST:
            self.violations.append(f"t={self.engine.now} received RST")
        if (seg.flags & TcpFlags.FIN) and not self.initiated_close:
            self.violations.append(f"t={self.engine.now} received unsolicited FIN")
        if self.conn.state is ConnState.ESTABLISHED:
            if (seg.flags & TcpFlags.ACK) and seg.ack != self.conn.snd_nxt:
                self.violations.append(
                    f"t={self.engine.now} ack discontinuity: got {seg.ack}, "
                    f"snd_nxt {self.conn.snd_nxt}")
            if seg.is_data and seg.seq != self.conn.rcv_nxt:
                self.violations.append(
                    f"t={self.engine.now} peer seq gap: got {seg.seq}, "
                    f"expected {self.conn.rcv_nxt}")

    def deliver(self, pkt) -> None:
        if not isinstance(pkt, TcpSegment):
            return
        self._check_stealth(pkt)
        was_established = self.conn.state is ConnState.ESTABLISHED
        emitted, delivered = self.conn.on_segment(pkt, self.engine.now)
        if delivered:
            self.received_stream.extend(delivered)
            self._responses_seen += 1
            self.recv_ts[self._responses_seen] = self.engine.now
        for seg in emitted:
            self.transmit(seg)
        if not was_established and self.conn.state is ConnState.ESTABLISHED:
            self.established_at = self.engine.now
            if self.total > 0:
                self.engine.schedule_in(lambda: self._send_request(1),
                                        self.interval_us)

    @property
    def complete(self) -> bool:
        return self._responses_seen >= self.total


class EchoHost(Host):
    """Background-load host: answers echo requests, runs ping processes."""

    def __init__(self, engine: Engine, name: str, addr: HostAddr):
        super().__init__(engine, name, addr)
        self.requests_seen = 0
        self.responses_seen = 0

    def deliver(self, pkt) -> None:
        if not isinstance(pkt, EchoPacket):
            return
        if pkt.kind == "req":
            self.requests_seen += 1
            reply = EchoPacket(src=self.addr, dst=pkt.src, sport=pkt.dport,
                               dport=pkt.sport, kind="resp", flow_id=pkt.flow_id)
            self.transmit(reply)
        else:
            self.responses_seen += 1

    def run_ping(self, target: HostAddr, sport: int, dport: int,
                 flow_id: str, start_at: int, interval_us: int,
                 stop_at: int) -> None:
        def tick() -> None:
            self.transmit(EchoPacket(src=self.addr, dst=target, sport=sport,
                                     dport=dport, kind="req", flow_id=flow_id))
            nxt = self.engine.now + interval_us
            if nxt <= stop_at:
                self.engine.schedule(tick, nxt)

        self.engine.schedule(tick, start_at)


def spawn_background_load(engine: Engine, switch: Switch,
                          spec: BackgroundLoadSpec, link_model: LinkModel,
                          register_host: Callable[[Host], None],
                          horizon_us: int) -> list[str]:
    """Create n_hosts x procs_per_host periodic echo flows.

    Every flow gets a unique source port, so its first request always
    misses the flow table and exercises the controller's packet-in path.
    Flow starts are staggered a few tens of µs apart to keep the event
    order stable and the controller queue realistic.
    """
    hosts: list[EchoHost] = []
    for i in range(spec.n_hosts):
        addr = HostAddr(ip=f"10.1.0.{i + 1}", mac=f"02:00:01:00:00:{i + 1:02x}")
        host = EchoHost(engine, f"bg{i}", addr)
        host.attach(switch, link_model)
        register_host(host)
        hosts.append(host)

    flow_ids: list[str] = []
    flow_index = 0
    for i, host in enumerate(hosts):
        for p in range(spec.procs_per_host):
            if spec.n_hosts > 1:
                target = hosts[(i + 1 + p % (spec.n_hosts - 1)) % spec.n_hosts]
            else:
                target = host
            flow_id = f"bg-{i}-{p}"
            host.run_ping(target.addr, sport=10_000 + flow_index, dport=7,
                          flow_id=flow_id, start_at=flow_index * 71,
                          interval_us=spec.msg_interval_us, stop_at=horizon_us)
            flow_ids.append(flow_id)
            flow_index += 1
    return flow_ids

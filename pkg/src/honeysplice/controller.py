"""The response controller: reactive forwarding plus stealthy redirection.

Reactive forwarding: table misses escalate to the controller, which
installs bidirectional OUTPUT rules and releases the held packet. This
path carries the background load and is the only controller path with a
modeled service time (a FIFO queue, ``service_us`` per packet-in).

Redirection, on an alert for an established connection:

  1. contain -- a BUFFER rule quietly swallows everything the attacker
     sends (nothing further reaches the victim), and a forged RST tears
     down the victim-side endpoint only; the attacker-facing direction is
     never reset, so the attacker sees no change;
  2. clone -- a honey server with the victim's app identity is requested;
  3. splice -- once the clone is up, the controller forges a three-way
     handshake with it while impersonating the attacker, replays the
     recorded pre-alert payloads so the clone's application state matches
     the victim's (its responses are consumed, the attacker already has
     them), and computes the stream offset between what the attacker
     expects and where the clone's send sequence actually is;
  4. rewrite -- two flow rules translate seq/ack by that offset (and
     optionally rewrite addresses when the honey server lives at a
     distinct internal address), the buffered segments are released
     through them, and the attacker-visible byte stream continues without
     a seam.

Containment timing is configurable: "immediate" contains at alert time
(the victim never sees the triggering segment), "on_clone_ready" lets the
victim keep serving until the clone is operational (no request ever waits
on instantiation). With a pre-instantiated honey server both behave
identically because the whole redirect completes within the alert event.

Restore (reverse migration) re-splices the connection onto a fresh
victim-side connection with the same recipe -- forge, replay whatever the
victim has not seen, recompute offsets -- after a short grace period that
lets in-flight honey responses drain.

Splice offsets are computed from stream *positions*, not ISNs: the
server-to-attacker delta is (attacker's expected next peer seq) minus
(the new server's snd_nxt), which reduces to (victim ISN - honey ISN)
for the initial migration and stays correct for restores, where the new
victim connection never sent the responses the honey server did.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .clonemgr import CloneFailed, CloneManager, VictimSpec
from .hosts import ServerHost
from .netcore import (
    HostAddr,
    TcpFlags,
    TcpSegment,
    five_tuple,
    seg_span,
    seq_add,
    seq_sub,
)
from .simnet import Engine
from .vswitch import Buffer, Drop, FlowMatch, FlowRule, Output, Rewrite, Switch
from .ids import Alert


class AlertForUnknownConnection(Exception):
    """Alert names a five-tuple the controller has never tracked."""


class InvalidPhase(Exception):
    """Migration operation not legal in the record's current phase."""


class RestoreFailed(Exception):
    """The original server refused the restore connection."""


PHASE_IDLE = "IDLE"
PHASE_CLONING = "CLONING"
PHASE_SPLICING = "SPLICING"
PHASE_REDIRECTED = "REDIRECTED"
PHASE_RESTORED = "RESTORED"

ConnKey = tuple[str, int, str, int]


@dataclass
class ConnLedger:
    """Everything the controller knows about one tracked connection,
    reconstructed purely from mirrored segments."""

    key: ConnKey
    attacker_addr: HostAddr
    server_addr: HostAddr
    attacker_iss: int
    server_isn: Optional[int] = None
    attacker_snd_nxt: int = 0
    last_seq: int = 0
    last_ack: int = 0
    payloads: list[tuple[int, bytes]] = field(default_factory=list)


@dataclass
class MigrationRecord:
    """State of one connection's migration, including the splice offsets.

    ``seq_delta`` is how far the serving endpoint's stream runs ahead of
    the attacker's view (honey ISN - victim ISN right after migration);
    ``ack_delta`` is its mod-2**32 negation. Rules apply ``seq_delta`` to
    attacker-to-server acks and ``ack_delta`` to server-to-attacker seqs.
    """

    key: ConnKey
    victim_isn: Optional[int] = None
    honey_isn: Optional[int] = None
    seq_delta: int = 0
    ack_delta: int = 0
    phase: str = PHASE_IDLE
    times: dict[str, int] = field(default_factory=dict)
    honey_host: Optional[ServerHost] = None
    honey_port: int = 0
    buffer_id: str = ""
    contained: bool = False
    restore_armed: bool = False
    victim_seen: Optional[int] = None   # payload-log index the victim has seen
    replay_upto: Optional[int] = None   # payload-log index the splice replays to
    splice_cookies: list[int] = field(default_factory=list)

    def transition(self, phase: str, now: int) -> None:
        self.phase = phase
        self.times[phase] = now


class Controller:
    """Single logical reactor: alert handling, packet-in handling and
    clone-ready callbacks are serialized events of one simulation."""

    def __init__(self, engine: Engine, switch: Switch, *,
                 replay: bool = True, containment: str = "immediate",
                 service_us: int = 50, restore_grace_us: int = 5000,
                 fail_open: bool = True):
        if containment not in ("immediate", "on_clone_ready"):
            raise ValueError(f"unknown containment mode {containment!r}")
        self.engine = engine
        self.switch = switch
        self.replay = replay
        self.containment = containment
        self.service_us = service_us
        self.restore_grace_us = restore_grace_us
        self.fail_open = fail_open
        self.clonemgr: Optional[CloneManager] = None

        self.ledgers: dict[ConnKey, ConnLedger] = {}
        self.records: dict[ConnKey, MigrationRecord] = {}
        self.port_map: dict[str, int] = {}
        self.server_hosts: dict[str, ServerHost] = {}
        self._conn_rules: dict[ConnKey, int] = {}
        self._busy_until = 0
        self.packet_in_count = 0
        self.events: list[tuple[int, str, str]] = []

        switch.packet_in_handler = self.on_packet_in

    # -- wiring ---------------------------------------------------------------

    def register_port(self, ip: str, port: int) -> None:
        self.port_map[ip] = port

    def register_server(self, host: ServerHost) -> None:
        self.server_hosts[host.addr.ip] = host
        self.register_port(host.addr.ip, host.port)

    def log(self, event: str, detail: str = "") -> None:
        self.events.append((self.engine.now, event, detail))

    # -- connection bookkeeping (mirror tap; runs before rule lookup) ---------

    def ledger_tap(self, pkt) -> None:
        if not isinstance(pkt, TcpSegment):
            return
        key = five_tuple(pkt)
        if (pkt.flags & TcpFlags.SYN) and not (pkt.flags & TcpFlags.ACK):
            self.ledgers[key] = ConnLedger(
                key=key, attacker_addr=pkt.src, server_addr=pkt.dst,
                attacker_iss=pkt.seq, attacker_snd_nxt=seq_add(pkt.seq, 1),
                last_seq=pkt.seq)
            return
        led = self.ledgers.get(key)
        if led is not None:
            led.last_seq = pkt.seq
            led.attacker_snd_nxt = seq_add(pkt.seq, seg_span(pkt))
            if pkt.flags & TcpFlags.ACK:
                led.last_ack = pkt.ack
            if pkt.payload:
                led.payloads.append((pkt.seq, pkt.payload))
            return
        rkey = (pkt.dst.ip, pkt.dport, pkt.src.ip, pkt.sport)
        led = self.ledgers.get(rkey)
        if led is not None and (pkt.flags & TcpFlags.SYN):
            led.server_isn = pkt.seq

    # -- reactive forwarding ---------------------------------------------------

    def on_packet_in(self, pkt, hold_id: int) -> None:
        self.packet_in_count += 1
        start = max(self.engine.now, self._busy_until)
        done = start + self.service_us
        self._busy_until = done
        self.engine.schedule(lambda: self._handle_packet_in(pkt, hold_id), done)

    def _handle_packet_in(self, pkt, hold_id: int) -> None:
        key = five_tuple(pkt)
        record = self.records.get(key)
        if record is not None and record.phase != PHASE_IDLE:
            # a migrated flow should never miss; don't disturb the splice
            self.switch.drop_held(hold_id)
            self.log("anomaly_drop", f"conn={_fmt_key(key)}")
            return
        if key not in self._conn_rules:
            dst_port = self.port_map.get(pkt.dst.ip)
            src_port = self.port_map.get(pkt.src.ip)
            if dst_port is None or src_port is None:
                self.switch.drop_held(hold_id)
                self.log("packet_in_unroutable", f"conn={_fmt_key(key)}")
                return
            fwd = FlowRule(priority=10,
                           match=FlowMatch(src_ip=pkt.src.ip, dst_ip=pkt.dst.ip,
                                           sport=pkt.sport, dport=pkt.dport),
                           actions=(Output(dst_port),))
            rev = FlowRule(priority=10,
                           match=FlowMatch(src_ip=pkt.dst.ip, dst_ip=pkt.src.ip,
                                           sport=pkt.dport, dport=pkt.sport),
                           actions=(Output(src_port),))
            c1 = self.switch.install_rule(fwd)
            c2 = self.switch.install_rule(rev)
            self._conn_rules[key] = c1
            rkey = (pkt.dst.ip, pkt.dport, pkt.src.ip, pkt.sport)
            self._conn_rules[rkey] = c2
            self.log("flow_rules", f"conn={_fmt_key(key)}")
        self.log("packet_in", f"conn={_fmt_key(key)}")
        self.switch.release_held(hold_id)

    # -- migration --------------------------------------------------------------

    def on_alert(self, alert: Alert) -> None:
        """Start the migration for the alerted connection."""
        key = alert.conn
        led = self.ledgers.get(key)
        if led is None or led.server_isn is None:
            raise AlertForUnknownConnection(_fmt_key(key))
        record = self.records.get(key)
        if record is not None and record.phase != PHASE_IDLE:
            self.log("alert_ignored",
                     f"conn={_fmt_key(key)};phase={record.phase};sid={alert.sid}")
            return
        self.log("alert", f"conn={_fmt_key(key)};sid={alert.sid};"
                          f"ordinal={alert.ordinal}")
        record = MigrationRecord(key=key, victim_isn=led.server_isn)
        self.records[key] = record
        record.transition(PHASE_CLONING, self.engine.now)

        # "immediate": the triggering segment is still in flight through the
        # switch (this call is inside its mirror tap) and must not reach the
        # victim; containment before lookup guarantees the victim has seen
        # exactly the pre-alert traffic.
        if self.containment == "immediate":
            self._contain(record, trigger_in_flight=True)

        victim = self.server_hosts[led.server_addr.ip]
        spec = VictimSpec(addr=victim.addr, app_id=victim.app.app_id,
                          open_ports=(victim.listen_port,))
        self.log("clone_requested", f"conn={_fmt_key(key)}")
        try:
            self.clonemgr.request_clone(
                spec, lambda host, lat, r=record: self._on_clone_ready(r, host, lat))
        except CloneFailed:
            self._clone_failed(record)

    def _contain(self, record: MigrationRecord, trigger_in_flight: bool) -> None:
        """Protect the victim: buffer the attacker's direction, forge an RST
        toward the victim only."""
        key = record.key
        led = self.ledgers[key]
        record.buffer_id = f"mig:{_fmt_key(key)}"
        self.switch.create_queue(record.buffer_id)
        cookie = self.switch.install_rule(FlowRule(
            priority=100,
            match=FlowMatch(src_ip=key[0], sport=key[1],
                            dst_ip=key[2], dport=key[3]),
            actions=(Buffer(record.buffer_id),)))
        record.splice_cookies.append(cookie)
        record.contained = True
        # a segment currently mid-pipeline was mirrored (so it is in the
        # payload log) but will be re-presented live via the buffer path
        record.replay_upto = len(led.payloads) - (1 if trigger_in_flight else 0)
        if record.victim_seen is None:
            record.victim_seen = record.replay_upto
        self.log("buffer_installed", f"conn={_fmt_key(key)}")

        victim = self.server_hosts[led.server_addr.ip]
        rst = TcpSegment(src=led.attacker_addr, dst=led.server_addr,
                         sport=key[1], dport=key[3],
                         seq=led.attacker_snd_nxt, ack=led.last_ack,
                         flags=TcpFlags.RST | TcpFlags.ACK)
        victim.deliver_oob(rst)
        self.log("victim_closed", f"conn={_fmt_key(key)}")

    def _on_clone_ready(self, record: MigrationRecord, host: ServerHost,
                        latency_us: int) -> None:
        key = record.key
        self.log("clone_latency", f"us={latency_us};conn={_fmt_key(key)}")
        record.honey_host = host
        record.honey_port = host.port
        if not record.contained:
            self._contain(record, trigger_in_flight=False)
        record.transition(PHASE_SPLICING, self.engine.now)
        self.log("splice_started", f"conn={_fmt_key(key)}")
        record.honey_isn = self._splice(
            record, host, host.port,
            replay_from=0, replay_upto=record.replay_upto,
            final_phase=PHASE_REDIRECTED)

    def _clone_failed(self, record: MigrationRecord) -> None:
        key = record.key
        self.log("clone_failed", f"conn={_fmt_key(key)};"
                                 f"policy={'open' if self.fail_open else 'closed'}")
        if not record.contained:
            # victim was never cut over; nothing to undo
            record.transition(PHASE_RESTORED, self.engine.now)
            return
        led = self.ledgers[key]
        if self.fail_open:
            victim = self.server_hosts[led.server_addr.ip]
            record.transition(PHASE_SPLICING, self.engine.now)
            self._splice(record, victim, victim.port,
                         replay_from=record.victim_seen,
                         replay_upto=record.replay_upto,
                         final_phase=PHASE_RESTORED)
        else:
            for cookie in record.splice_cookies:
                self.switch.remove_rule(cookie)
            record.splice_cookies.clear()
            self.switch.install_rule(FlowRule(
                priority=100,
                match=FlowMatch(src_ip=key[0], sport=key[1],
                                dst_ip=key[2], dport=key[3]),
                actions=(Drop(),)))
            self.log("fail_closed", f"conn={_fmt_key(key)}")

    # -- the splice (shared by migration, restore and fail-open) ----------------

    def _splice(self, record: MigrationRecord, server: ServerHost,
                server_port: int, replay_from: int, replay_upto: int,
                final_phase: str) -> int:
        key = record.key
        led = self.ledgers[key]
        entries = led.payloads[replay_from:replay_upto] if self.replay else []

        # anchor the forged handshake so the first segment the server will
        # see (replayed or live) lands exactly at its rcv_nxt
        if entries:
            anchor = entries[0][0]
        elif replay_upto is not None and replay_upto < len(led.payloads):
            anchor = led.payloads[replay_upto][0]
        else:
            anchor = led.attacker_snd_nxt
        forge_isn = seq_add(anchor, -1)

        syn = TcpSegment(src=led.attacker_addr, dst=server.addr,
                         sport=key[1], dport=key[3], seq=forge_isn, ack=0,
                         flags=TcpFlags.SYN)
        replies = server.deliver_oob(syn)
        if not replies or not (replies[0].flags & TcpFlags.SYN):
            raise RestoreFailed(f"server {server.name} refused forged handshake")
        server_isn = replies[0].seq
        server_snd_nxt = seq_add(server_isn, 1)
        ack = TcpSegment(src=led.attacker_addr, dst=server.addr,
                         sport=key[1], dport=key[3],
                         seq=seq_add(forge_isn, 1), ack=server_snd_nxt,
                         flags=TcpFlags.ACK)
        server.deliver_oob(ack)

        for seq, payload in entries:
            seg = TcpSegment(src=led.attacker_addr, dst=server.addr,
                             sport=key[1], dport=key[3],
                             seq=seq, ack=server_snd_nxt,
                             flags=TcpFlags.PSH | TcpFlags.ACK, payload=payload)
            for emitted in server.deliver_oob(seg):
                if emitted.is_data:
                    # response already delivered to the attacker by the
                    # previous incumbent; consume it, track the position
                    server_snd_nxt = seq_add(emitted.seq, len(emitted.payload))
        self.log("replayed", f"count={len(entries)};conn={_fmt_key(key)}")

        # stream-position offsets: ledger.last_ack is the attacker's rcv_nxt
        # in its own (victim-anchored) coordinates
        record.seq_delta = seq_sub(server_snd_nxt, led.last_ack)
        record.ack_delta = seq_sub(0, record.seq_delta)

        for cookie in record.splice_cookies:
            self.switch.remove_rule(cookie)
        record.splice_cookies.clear()
        rkey = (key[2], key[3], key[0], key[1])
        for cookie in (self._conn_rules.pop(key, None),
                       self._conn_rules.pop(rkey, None)):
            if cookie is not None:
                self.switch.remove_rule(cookie)

        distinct = server.addr != led.server_addr
        fwd_actions = (Rewrite(ack_delta=record.seq_delta,
                               new_dst=server.addr if distinct else None),
                       Output(server_port))
        rev_actions = (Rewrite(seq_delta=record.ack_delta,
                               new_src=led.server_addr if distinct else None),
                       Output(self.port_map[led.attacker_addr.ip]))
        c1 = self.switch.install_rule(FlowRule(
            priority=90,
            match=FlowMatch(src_ip=key[0], sport=key[1],
                            dst_ip=key[2], dport=key[3]),
            actions=fwd_actions))
        c2 = self.switch.install_rule(FlowRule(
            priority=90,
            match=FlowMatch(src_ip=server.addr.ip, sport=key[3],
                            dst_ip=key[0], dport=key[1]),
            actions=rev_actions))
        record.splice_cookies = [c1, c2]
        self.log("rewrite_rules", f"conn={_fmt_key(key)};"
                                  f"seq_delta={record.seq_delta}")

        record.transition(final_phase, self.engine.now)
        released = self.switch.release_buffer(record.buffer_id)
        self.log("redirected" if final_phase == PHASE_REDIRECTED else "restored",
                 f"conn={_fmt_key(key)};released={released}")
        return server_isn

    # -- reverse migration -------------------------------------------------------

    def restore_original(self, key: ConnKey) -> None:
        """Arm the return of a redirected connection to the original server.

        The splice itself runs after ``restore_grace_us`` so in-flight honey
        responses drain through the rewrite rules first.
        """
        record = self.records.get(key)
        if record is None or record.phase != PHASE_REDIRECTED:
            phase = record.phase if record is not None else PHASE_IDLE
            raise InvalidPhase(f"restore in phase {phase}")
        if record.restore_armed:
            raise InvalidPhase("restore already armed")
        record.restore_armed = True
        self.log("restore_armed", f"conn={_fmt_key(key)}")
        self.engine.schedule_in(lambda: self._restore_splice(record),
                                self.restore_grace_us)

    def _restore_splice(self, record: MigrationRecord) -> None:
        key = record.key
        led = self.ledgers[key]
        victim = self.server_hosts[led.server_addr.ip]
        if not victim.accepting:
            self.log("restore_failed", f"conn={_fmt_key(key)}")
            record.restore_armed = False
            raise RestoreFailed(f"victim {victim.name} not accepting")

        # quiesce: buffer new attacker segments while we re-splice
        record.buffer_id = f"res:{_fmt_key(key)}"
        self.switch.create_queue(record.buffer_id)
        cookie = self.switch.install_rule(FlowRule(
            priority=110,
            match=FlowMatch(src_ip=key[0], sport=key[1],
                            dst_ip=key[2], dport=key[3]),
            actions=(Buffer(record.buffer_id),)))
        record.splice_cookies.append(cookie)

        replay_from = record.victim_seen
        replay_upto = len(led.payloads)
        record.victim_isn = self._splice(record, victim, victim.port,
                                         replay_from=replay_from,
                                         replay_upto=replay_upto,
                                         final_phase=PHASE_RESTORED)
        record.victim_seen = replay_upto


def _fmt_key(key: ConnKey) -> str:
    return f"{key[0]}:{key[1]}->{key[2]}:{key[3]}"

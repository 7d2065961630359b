"""Scenario loading, experiment execution, and trace export.

A scenario file is a JSON document describing one experiment: topology
knobs (link delay/jitter, optional background load), the attack session
(request size/interval, total packets), the trigger that starts the
migration, clone strategy configuration, and repetition count plus root
seed. ``run_experiment`` executes the repetitions as fully independent
simulation instances with per-repetition derived seeds and returns one
latency trace each; the stealth invariants are asserted on every
repetition, not sampled.

CSV formats are pinned: attacker traces are
``rep,packet_index,send_us,recv_us,rtt_us`` and controller event logs are
``rep,event,time_us,detail`` (UTF-8, header row, LF endings). Re-exporting
the same data is byte-identical.
"""

from __future__ import annotations

import csv
import json
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .clonemgr import (
    CloneManager,
    StrategyKind,
    VictimSpec,
    default_cost_table,
    load_cost_table,
)
from .controller import Controller
from .endpoint import ServerApp, fixed_iss, random_iss
from .hosts import AttackerHost, ServerHost, spawn_background_load
from .ids import Ids, load_ruleset_file
from .netcore import HostAddr
from .simnet import BackgroundLoadSpec, Distribution, Engine, LinkModel, derive_seed
from .vswitch import Switch

ATTACKER_ADDR = HostAddr("10.0.0.1", "02:00:00:00:00:01")
VICTIM_ADDR = HostAddr("10.0.0.2", "02:00:00:00:00:02")
HONEY_DISTINCT_ADDR = HostAddr("10.0.0.3", "02:00:00:00:00:03")
SERVER_PORT = 9000
ATTACKER_SPORT = 40001
APP_ID = "tcp-echo-v1"

MIGRATE_WATCH_SID = 9_000_001
RESTORE_WATCH_SID = 9_000_002


class ConfigError(Exception):
    """Scenario document rejected; message names the offending field."""

    def __init__(self, field_path: str, reason: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {reason}")


class InvariantViolation(Exception):
    """A repetition violated a stealth or completeness invariant."""


@dataclass(frozen=True)
class Scenario:
    """Validated experiment configuration (see module docstring)."""

    name: str
    total_packets: int
    trigger_kind: str = "nth_packet"      # "nth_packet" | "rule"
    trigger_n: int = 0
    trigger_sid: int = 0
    ruleset: Optional[str] = None          # absolute path once loaded
    request_size: int = 32
    request_size_random: bool = False
    request_interval_us: int = 10_000
    link_base_delay_us: int = 1_000
    link_jitter: Optional[Distribution] = None
    background: Optional[BackgroundLoadSpec] = None
    clone_strategy: StrategyKind = StrategyKind.VICTIM_IMAGE
    cost_table_path: Optional[str] = None
    clone_on_demand: bool = False
    clone_failure_p: float = 0.0
    containment: str = "immediate"
    replay: bool = True
    restore_at: Optional[int] = None
    restore_grace_us: int = 5_000
    honey_addr_mode: str = "same"          # "same" | "distinct"
    iss_policy_kind: str = "random"        # "random" | "fixed"
    iss_fixed_value: int = 0
    repetitions: int = 1
    seed: int = 1
    controller_service_us: int = 50
    miss_hold_timeout_us: int = 1_000_000

    def validate(self) -> None:
        if self.total_packets < 1:
            raise ConfigError("total_packets", "must be >= 1")
        if self.trigger_kind == "nth_packet":
            if not 1 <= self.trigger_n <= self.total_packets:
                raise ConfigError("trigger.n",
                                  f"must be in 1..total_packets ({self.total_packets})")
        elif self.trigger_kind == "rule":
            if not self.ruleset:
                raise ConfigError("ruleset", "required for a rule trigger")
        else:
            raise ConfigError("trigger.kind", f"unknown kind {self.trigger_kind!r}")
        if self.restore_at is not None:
            if self.trigger_kind == "nth_packet" and self.restore_at <= self.trigger_n:
                raise ConfigError("restore_at", "must be > the migration trigger index")
            # restore splices after a grace period: it must outlast in-flight
            # honey responses and finish before the next request arrives
            if self.restore_grace_us <= 2 * self.link_base_delay_us:
                raise ConfigError("restore_grace_us",
                                  "must exceed one switch round trip (2x link delay)")
            if self.restore_grace_us + 2 * self.link_base_delay_us \
                    >= self.request_interval_us:
                raise ConfigError("restore_grace_us",
                                  "grace window must fit inside the request interval")
        if self.request_size < 1:
            raise ConfigError("request.size", "must be >= 1")
        if self.request_interval_us < 1:
            raise ConfigError("request.interval_us", "must be >= 1")
        if self.repetitions < 1:
            raise ConfigError("repetitions", "must be >= 1")
        if self.containment not in ("immediate", "on_clone_ready"):
            raise ConfigError("containment", f"unknown mode {self.containment!r}")
        if self.honey_addr_mode not in ("same", "distinct"):
            raise ConfigError("honey_addr_mode", f"unknown mode {self.honey_addr_mode!r}")
        if self.iss_policy_kind not in ("random", "fixed"):
            raise ConfigError("iss_policy.kind", f"unknown kind {self.iss_policy_kind!r}")
        if not 0.0 <= self.clone_failure_p <= 1.0:
            raise ConfigError("clone.failure_p", "must be in [0, 1]")


def _parse_jitter(doc, where: str) -> Optional[Distribution]:
    if doc is None:
        return None
    kind = doc.get("kind", "none")
    if kind == "none":
        return None
    try:
        return Distribution(kind, float(doc.get("a", 0.0)), float(doc.get("b", 0.0)))
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def scenario_from_dict(doc: dict, base_dir: Optional[Path] = None) -> Scenario:
    base_dir = base_dir or Path.cwd()
    trigger = doc.get("trigger", {})
    request = doc.get("request", {})
    link = doc.get("link", {})
    clone = doc.get("clone", {})
    iss = doc.get("iss_policy", {})

    background = None
    if doc.get("background") is not None:
        bg = doc["background"]
        try:
            background = BackgroundLoadSpec(
                n_hosts=int(bg["n_hosts"]),
                procs_per_host=int(bg["procs_per_host"]),
                msg_interval_us=int(bg.get("msg_interval_us", 1_000_000)))
        except (KeyError, ValueError) as exc:
            raise ConfigError("background", f"bad spec: {exc}") from None

    ruleset = doc.get("ruleset")
    if ruleset is not None:
        ruleset = str((base_dir / ruleset).resolve())

    cost_table = clone.get("cost_table")
    if cost_table is not None:
        cost_table = str((base_dir / cost_table).resolve())

    try:
        strategy = StrategyKind(clone.get("strategy", "VICTIM_IMAGE"))
    except ValueError:
        raise ConfigError("clone.strategy",
                          f"unknown strategy {clone.get('strategy')!r}") from None

    scenario = Scenario(
        name=str(doc.get("name", "unnamed")),
        total_packets=int(doc.get("total_packets", 0)),
        trigger_kind=str(trigger.get("kind", "nth_packet")),
        trigger_n=int(trigger.get("n", 0)),
        trigger_sid=int(trigger.get("sid", 0)),
        ruleset=ruleset,
        request_size=int(request.get("size", 32)),
        request_size_random=bool(request.get("random_size", False)),
        request_interval_us=int(request.get("interval_us", 10_000)),
        link_base_delay_us=int(link.get("base_delay_us", 1_000)),
        link_jitter=_parse_jitter(link.get("jitter"), "link.jitter"),
        background=background,
        clone_strategy=strategy,
        cost_table_path=cost_table,
        clone_on_demand=bool(clone.get("on_demand", False)),
        clone_failure_p=float(clone.get("failure_p", 0.0)),
        containment=str(doc.get("containment", "immediate")),
        replay=bool(doc.get("replay", True)),
        restore_at=(int(doc["restore_at"]) if doc.get("restore_at") is not None else None),
        restore_grace_us=int(doc.get("restore_grace_us", 5_000)),
        honey_addr_mode=str(doc.get("honey_addr_mode", "same")),
        iss_policy_kind=str(iss.get("kind", "random")),
        iss_fixed_value=int(iss.get("value", 0)),
        repetitions=int(doc.get("repetitions", 1)),
        seed=int(doc.get("seed", 1)),
        controller_service_us=int(doc.get("controller_service_us", 50)),
        miss_hold_timeout_us=int(doc.get("miss_hold_timeout_us", 1_000_000)),
    )
    scenario.validate()
    return scenario


def load_scenario(path) -> Scenario:
    """Load and validate a scenario file; ConfigError names the bad field."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("path", f"no such scenario file: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("document", f"invalid JSON: {exc}") from None
    return scenario_from_dict(doc, base_dir=path.parent)


def builtin_scenario_path(name: str) -> Path:
    """Path of a scenario shipped inside the package (e.g. 'e1_redirect')."""
    return Path(__file__).parent / "scenarios" / f"{name}.json"


@dataclass
class PacketRecord:
    index: int
    send_us: int
    recv_us: int
    rtt_us: int


@dataclass
class LatencyTrace:
    """Per-repetition results: one record per packet index plus the
    controller's event series and any stealth violations."""

    rep: int
    records: list[PacketRecord]
    controller_events: list[tuple[int, str, str]]
    violations: list[str] = field(default_factory=list)


class Simulation:
    """One wired repetition: topology, detection, controller, attacker."""

    def __init__(self, scenario: Scenario, seed: int, migration: bool = True):
        self.scenario = scenario
        self.engine = Engine(seed)
        link_model = LinkModel(scenario.link_base_delay_us, scenario.link_jitter)
        self.switch = Switch(self.engine, scenario.miss_hold_timeout_us)
        self.ids = Ids(self.engine)
        self.controller = Controller(
            self.engine, self.switch,
            replay=scenario.replay,
            containment=scenario.containment,
            service_us=scenario.controller_service_us,
            restore_grace_us=scenario.restore_grace_us)
        self.switch.mirror_taps = [self.controller.ledger_tap, self.ids.tap]

        def iss_policy(tag: str):
            if scenario.iss_policy_kind == "fixed":
                return fixed_iss(scenario.iss_fixed_value)
            return random_iss(self.engine.stream(f"iss:{tag}"))

        self.victim = ServerHost(self.engine, "victim", VICTIM_ADDR, SERVER_PORT,
                                 ServerApp(APP_ID), iss_policy("victim"))
        self.victim.attach(self.switch, link_model)
        self.controller.register_server(self.victim)

        self.attacker = AttackerHost(
            self.engine, "attacker", ATTACKER_ADDR,
            VICTIM_ADDR, SERVER_PORT, ATTACKER_SPORT,
            iss_policy("attacker"),
            total_requests=scenario.total_packets,
            interval_us=scenario.request_interval_us,
            request_size=scenario.request_size,
            size_rng=(self.engine.stream("attacker:size")
                      if scenario.request_size_random else None))
        self.attacker.attach(self.switch, link_model)
        self.controller.register_port(ATTACKER_ADDR.ip, self.attacker.port)

        self.honey: Optional[ServerHost] = None

        def make_honey(spec):
            addr = spec.addr if scenario.honey_addr_mode == "same" \
                else HONEY_DISTINCT_ADDR
            host = ServerHost(self.engine, "honey", addr, spec.open_ports[0],
                              ServerApp(spec.app_id), iss_policy("honey"))
            host.attach(self.switch, link_model)
            self.honey = host
            return host

        if scenario.cost_table_path:
            table = load_cost_table(scenario.cost_table_path)
        else:
            table = default_cost_table()
        profile = table[scenario.clone_strategy]
        pre = None
        if not scenario.clone_on_demand:
            pre = make_honey(VictimSpec(addr=VICTIM_ADDR, app_id=APP_ID,
                                        open_ports=(SERVER_PORT,)))
        self.controller.clonemgr = CloneManager(
            self.engine, profile, make_honey,
            failure_p=scenario.clone_failure_p, pre_instantiated=pre)

        if migration:
            if scenario.trigger_kind == "nth_packet":
                self.ids.add_nth_packet_watch(scenario.trigger_n,
                                              sid=MIGRATE_WATCH_SID, msg="MIGRATE",
                                              dst_ip=VICTIM_ADDR.ip)
            else:
                rules = load_ruleset_file(scenario.ruleset)
                self.ids.load_rules(rules)
            if scenario.restore_at is not None:
                self.ids.add_nth_packet_watch(scenario.restore_at,
                                              sid=RESTORE_WATCH_SID, msg="RESTORE",
                                              dst_ip=VICTIM_ADDR.ip)

            def route(alert):
                if alert.sid == RESTORE_WATCH_SID:
                    self.controller.restore_original(alert.conn)
                else:
                    self.controller.on_alert(alert)

            self.ids.subscribe(route)

        self.background_flows: list[str] = []
        attacker_start = 200_000 if scenario.background else 10_000
        self.horizon = (attacker_start + 50_000
                        + (scenario.total_packets + 2) * scenario.request_interval_us
                        + profile.latency.mean() * 3
                        + scenario.restore_grace_us + 100_000)
        self.horizon = int(self.horizon)
        if scenario.background:
            self.background_flows = spawn_background_load(
                self.engine, self.switch, scenario.background, link_model,
                register_host=lambda h: self.controller.register_port(h.addr.ip, h.port),
                horizon_us=self.horizon)
        self.attacker.start(attacker_start)

    def run(self) -> None:
        self.engine.run_until(self.horizon)

    def trace(self, rep: int) -> LatencyTrace:
        records = []
        problems = list(self.attacker.violations)
        for i in range(1, self.scenario.total_packets + 1):
            send = self.attacker.send_ts.get(i)
            recv = self.attacker.recv_ts.get(i)
            if send is None or recv is None:
                problems.append(f"packet {i} incomplete (send={send}, recv={recv})")
                continue
            records.append(PacketRecord(i, send, recv, recv - send))
        return LatencyTrace(rep=rep, records=records,
                            controller_events=list(self.controller.events),
                            violations=problems)


def run_single(scenario: Scenario, rep: int = 1, migration: bool = True) -> Simulation:
    """Build and run one repetition; returns the simulation for inspection."""
    sim = Simulation(scenario, derive_seed(scenario.seed, f"rep:{rep}"),
                     migration=migration)
    sim.run()
    return sim


def run_experiment(scenario: Scenario, migration: bool = True,
                   strict: bool = True) -> list[LatencyTrace]:
    """Run all repetitions; stealth and completeness checked on every one."""
    traces = []
    for rep in range(1, scenario.repetitions + 1):
        sim = run_single(scenario, rep, migration=migration)
        trace = sim.trace(rep)
        if strict and trace.violations:
            raise InvariantViolation(
                f"{scenario.name} rep {rep}: " + "; ".join(trace.violations[:5]))
        traces.append(trace)
    return traces


# -- aggregation -----------------------------------------------------------------


@dataclass
class IndexStats:
    index: int
    mean: float
    min: int
    max: int
    stddev: float
    samples: int


@dataclass
class Summary:
    per_index: list[IndexStats]
    pre_mean: Optional[float]
    post_mean: Optional[float]
    ratio: Optional[float]
    trigger_index: Optional[int]


def summarize(traces: list[LatencyTrace], trigger_index: Optional[int] = None) -> Summary:
    """Aggregate RTTs per packet index across repetitions.

    pre/post means pool all samples strictly below/above the trigger index
    (the trigger packet itself belongs to neither side).
    """
    if not traces:
        raise ValueError("summarize needs at least one trace")
    by_index: dict[int, list[int]] = {}
    for trace in traces:
        for rec in trace.records:
            by_index.setdefault(rec.index, []).append(rec.rtt_us)
    per_index = []
    for index in sorted(by_index):
        rtts = by_index[index]
        per_index.append(IndexStats(
            index=index, mean=statistics.fmean(rtts), min=min(rtts), max=max(rtts),
            stddev=statistics.pstdev(rtts), samples=len(rtts)))
    pre = post = ratio = None
    if trigger_index is not None:
        pre_samples = [r for s in per_index if s.index < trigger_index
                       for r in by_index[s.index]]
        post_samples = [r for s in per_index if s.index > trigger_index
                        for r in by_index[s.index]]
        if pre_samples:
            pre = statistics.fmean(pre_samples)
        if post_samples:
            post = statistics.fmean(post_samples)
        if pre is not None and pre > 0 and post is not None:
            ratio = post / pre
    return Summary(per_index=per_index, pre_mean=pre, post_mean=post,
                   ratio=ratio, trigger_index=trigger_index)


# -- export ------------------------------------------------------------------------


def write_attacker_csv(traces: list[LatencyTrace], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rep", "packet_index", "send_us", "recv_us", "rtt_us"])
        for trace in traces:
            for rec in trace.records:
                writer.writerow([trace.rep, rec.index, rec.send_us,
                                 rec.recv_us, rec.rtt_us])


def write_controller_csv(traces: list[LatencyTrace], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rep", "event", "time_us", "detail"])
        for trace in traces:
            for (time_us, event, detail) in trace.controller_events:
                writer.writerow([trace.rep, event, time_us, detail])


def write_summary_csv(summary: Summary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["packet_index", "mean_rtt_us", "min_rtt_us",
                         "max_rtt_us", "stddev_rtt_us", "samples"])
        for s in summary.per_index:
            writer.writerow([s.index, f"{s.mean:.3f}", s.min, s.max,
                             f"{s.stddev:.3f}", s.samples])


def read_attacker_csv(path) -> list[LatencyTrace]:
    """Rebuild traces (records only) from an exported attacker CSV."""
    by_rep: dict[int, list[PacketRecord]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rec = PacketRecord(int(row["packet_index"]), int(row["send_us"]),
                               int(row["recv_us"]), int(row["rtt_us"]))
            by_rep.setdefault(int(row["rep"]), []).append(rec)
    return [LatencyTrace(rep=rep, records=records, controller_events=[])
            for rep, records in sorted(by_rep.items())]


def export_run(scenario: Scenario, traces: list[LatencyTrace], out_dir) -> dict:
    """Write the full artifact set for one run; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "attacker": out / "attacker_trace.csv",
        "controller": out / "controller_events.csv",
        "summary": out / "summary.csv",
        "meta": out / "meta.json",
    }
    write_attacker_csv(traces, files["attacker"])
    write_controller_csv(traces, files["controller"])
    trigger = scenario.trigger_n if scenario.trigger_kind == "nth_packet" else None
    write_summary_csv(summarize(traces, trigger), files["summary"])
    meta = {"scenario": scenario.name, "seed": scenario.seed,
            "repetitions": scenario.repetitions, "trigger_index": trigger,
            "restore_at": scenario.restore_at}
    files["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return files


# -- randomized stealth corpus -------------------------------------------------------


def random_scenario(index: int, master_seed: int = 0xC0FFEE) -> Scenario:
    """Deterministic random scenario #index for the stealth sweep: random
    ISS, random trigger in 1..total, random payload sizes <= 64 B, sessions
    of at most 50 segments, both honey address deployments."""
    rng = random.Random(derive_seed(master_seed, f"rand:{index}"))
    total = rng.randint(1, 50)
    trigger = rng.randint(1, total)
    restore_at = None
    if trigger < total and rng.random() < 0.5:
        restore_at = rng.randint(trigger + 1, total)
    return Scenario(
        name=f"rand-{index}",
        total_packets=total,
        trigger_kind="nth_packet",
        trigger_n=trigger,
        request_size=64,
        request_size_random=True,
        request_interval_us=10_000,
        link_base_delay_us=1_000,
        restore_at=restore_at,
        honey_addr_mode=rng.choice(["same", "distinct"]),
        iss_policy_kind="random",
        repetitions=1,
        seed=rng.randrange(2**32),
    )

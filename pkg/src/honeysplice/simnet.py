"""Deterministic discrete-event engine.

Time is integer microseconds (float time would make event ordering
platform-dependent). Events fire in (time, insertion order), so a run is
a pure function of the scenario and the root seed.

Randomness is split into named sub-streams derived from the root seed
(crc32 of the stream tag xor the seed, the usual trick), so adding one
entity to a scenario never perturbs another entity's draws.
"""

from __future__ import annotations

import heapq
import random
import zlib
from dataclasses import dataclass
from typing import Callable, Optional

from .netcore import HostAddr


class SchedulingInPast(Exception):
    """Raised when an event is scheduled before the current clock."""


def derive_seed(root: int, tag: str) -> int:
    """Stable 32-bit sub-seed for ``tag``. Never uses builtin hash()."""
    return (zlib.crc32(tag.encode("utf-8")) ^ root) & 0xFFFFFFFF


@dataclass(frozen=True, slots=True)
class Distribution:
    """A latency/jitter distribution: fixed(a), uniform(a, b) or normal(a, b).

    ``sample`` returns integer microseconds clamped at zero. ``fixed``
    never touches the RNG, so a no-jitter link makes no draws at all.
    """

    kind: str  # "fixed" | "uniform" | "normal"
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "normal"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")

    def sample(self, rng: random.Random) -> int:
        if self.kind == "fixed":
            v = self.a
        elif self.kind == "uniform":
            v = rng.uniform(self.a, self.b)
        else:
            v = rng.normalvariate(self.a, self.b)
        return max(0, round(v))

    def mean(self) -> float:
        if self.kind == "uniform":
            return (self.a + self.b) / 2.0
        return self.a


FIXED_ZERO = Distribution("fixed", 0.0)


@dataclass(frozen=True, slots=True)
class LinkModel:
    """Delivery delay model for one link: base delay plus optional jitter."""

    base_delay_us: int = 1000
    jitter: Optional[Distribution] = None

    def delay(self, rng: random.Random) -> int:
        if self.jitter is None:
            return self.base_delay_us
        return max(0, self.base_delay_us + self.jitter.sample(rng))


@dataclass(frozen=True, slots=True)
class BackgroundLoadSpec:
    """Periodic echo load used to keep the controller busy.

    Spawning it creates exactly ``n_hosts * procs_per_host`` flows, each of
    which first traverses the switch's table-miss path so the controller
    carries their setup load.
    """

    n_hosts: int
    procs_per_host: int
    msg_interval_us: int = 1_000_000

    @property
    def total_flows(self) -> int:
        return self.n_hosts * self.procs_per_host


@dataclass(frozen=True, slots=True)
class EchoPacket:
    """ICMP-echo-like request/response pair member; carries no TCP state.

    ``sport`` doubles as the echo identifier so each background flow has a
    distinct match key at the switch.
    """

    src: HostAddr
    dst: HostAddr
    sport: int
    dport: int
    kind: str  # "req" | "resp"
    flow_id: str
    ts_sent: int = 0


class Engine:
    """Single-threaded event loop with a monotone integer-µs clock.

    One Engine per simulation instance; independent instances (one per
    repetition) share nothing.
    """

    def __init__(self, seed: int = 0):
        self.now: int = 0
        self._seed = seed & 0xFFFFFFFF
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._order = 0
        self._streams: dict[str, random.Random] = {}

    def stream(self, tag: str) -> random.Random:
        """Per-entity RNG stream, created lazily and cached."""
        rng = self._streams.get(tag)
        if rng is None:
            rng = random.Random(derive_seed(self._seed, tag))
            self._streams[tag] = rng
        return rng

    def schedule(self, fn: Callable[[], None], at: int) -> int:
        """Queue ``fn`` to run at simulated time ``at``; returns an event id.

        Equal-time events run in insertion order.
        """
        if at < self.now:
            raise SchedulingInPast(f"schedule at {at} < now {self.now}")
        self._order += 1
        heapq.heappush(self._queue, (at, self._order, fn))
        return self._order

    def schedule_in(self, fn: Callable[[], None], delay: int) -> int:
        return self.schedule(fn, self.now + delay)

    def run_until(self, t_end: int) -> int:
        """Dispatch every event with time <= t_end; returns the count.

        The clock only advances to dispatched event times (never jumps to
        ``t_end`` when the queue drains early).
        """
        queue = self._queue
        dispatched = 0
        while queue and queue[0][0] <= t_end:
            t, _, fn = heapq.heappop(queue)
            self.now = t
            fn()
            dispatched += 1
        return dispatched


class Link:
    """Unidirectional delay line delivering packets to a fixed target.

    With ``jitter=None`` every delivery takes exactly ``base_delay_us``;
    packets on one link never reorder (delay draws are per-link but FIFO
    order is preserved by equal-time insertion ordering only when delays
    are equal, which holds for all no-jitter links; jittered scenarios
    only make statistical claims).
    """

    __slots__ = ("_engine", "_model", "_deliver", "_rng", "name")

    def __init__(self, engine: Engine, name: str, model: LinkModel,
                 deliver: Callable[[object], None]):
        self._engine = engine
        self._model = model
        self._deliver = deliver
        self._rng = engine.stream(f"link:{name}")
        self.name = name

    def send(self, pkt) -> None:
        delay = self._model.delay(self._rng)
        self._engine.schedule(_Delivery(self._deliver, pkt), self._engine.now + delay)


class _Delivery:
    """Callable event wrapper; cheaper and clearer than a per-send closure."""

    __slots__ = ("_fn", "_pkt")

    def __init__(self, fn, pkt):
        self._fn = fn
        self._pkt = pkt

    def __call__(self) -> None:
        self._fn(self._pkt)

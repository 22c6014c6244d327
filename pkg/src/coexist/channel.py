"""Listen-before-talk contention on one shared 20 MHz channel.

One call to :func:`run_contention_epoch` simulates a single contention epoch:
every agent starts its initial sensing window at t=0, backs off for a uniformly
drawn number of idle 9 us slots and transmits exactly once.  Time is modelled at
1 us resolution, but the simulator is event driven: it jumps between the
instants at which a transmission may start, which is exact because the channel
only changes state when somebody starts or stops transmitting.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AgentKind",
    "ConfigError",
    "ContentionResult",
    "SimConfig",
    "SlotOutcome",
    "assess_backoff_slot",
    "occupancy_at",
    "occupation_time",
    "run_contention_epoch",
]

_FOREVER = 1 << 62

# sub-senses judged occupied that a back-off slot tolerates before it counts as busy
BUSY_SENSE_LIMIT = 5
SUBFRAME_US = 1000


class ConfigError(ValueError):
    """Raised for invalid simulator or experiment configuration."""


class AgentKind(enum.Enum):
    LteEnb = "lte"
    WifiAp = "wifi"


class SlotOutcome(enum.Enum):
    Idle = "idle"
    Busy = "busy"


def _default_lte_occupation() -> dict[int, int]:
    return {15: 3, 31: 6, 63: 6, 127: 8, 255: 8, 511: 10, 1023: 10}


@dataclass(frozen=True)
class SimConfig:
    """Timing and rate constants of the coexistence scenario.

    Durations are integer microseconds.  ``rate_mbps`` doubles as bits per
    microsecond, so payload sizes and durations convert without scaling.
    """

    num_lte: int = 2
    num_wifi: int = 2
    difs_us: int = 34
    wifi_slot_us: int = 9
    icca_us: int = 43
    ecca_slot_us: int = 9
    cw_set: tuple[int, ...] = (15, 31, 63, 127, 255, 511, 1023)
    lte_occupation_ms: dict[int, int] = field(default_factory=_default_lte_occupation)
    wifi_packet_bytes: int = 15000
    rate_mbps: int = 30
    sense_error_prob: float = 0.0
    gamma: float = 0.9

    def __post_init__(self):
        for name in ("difs_us", "wifi_slot_us", "icca_us", "ecca_slot_us",
                     "wifi_packet_bytes", "rate_mbps"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.num_lte < 0 or self.num_wifi < 0:
            raise ConfigError("agent counts must be non-negative")
        cws = tuple(int(c) for c in self.cw_set)
        if not cws or any(b <= a for a, b in zip(cws, cws[1:])) or cws[0] < 0:
            raise ConfigError(f"cw_set must be strictly increasing, got {self.cw_set!r}")
        object.__setattr__(self, "cw_set", cws)
        occ = {int(k): int(v) for k, v in self.lte_occupation_ms.items()}
        missing = [c for c in cws if c not in occ]
        if missing:
            raise ConfigError(f"lte_occupation_ms has no entry for CW {missing}")
        if any(v <= 0 for v in occ.values()):
            raise ConfigError("LTE occupation times must be positive")
        object.__setattr__(self, "lte_occupation_ms", occ)
        if self.ecca_slot_us != self.wifi_slot_us:
            # both kinds share one slot length in the back-off walker
            raise ConfigError("ECCA and Wi-Fi back-off slots must have equal length")
        if not 0.0 <= self.sense_error_prob < 1.0:
            raise ConfigError(f"sense_error_prob must lie in [0, 1), got {self.sense_error_prob}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def num_agents(self) -> int:
        return self.num_lte + self.num_wifi

    @property
    def kinds(self) -> list[AgentKind]:
        """Default roster: LTE eNBs first, then Wi-Fi APs."""
        return [AgentKind.LteEnb] * self.num_lte + [AgentKind.WifiAp] * self.num_wifi

    def initial_sense_us(self, kind: AgentKind) -> int:
        return self.icca_us if kind is AgentKind.LteEnb else self.difs_us

    def slot_us(self, kind: AgentKind) -> int:
        return self.ecca_slot_us if kind is AgentKind.LteEnb else self.wifi_slot_us


@dataclass(frozen=True)
class ContentionResult:
    kind: AgentKind
    cw: int
    counter: int
    wait_duration_us: int
    tx_duration_us: int
    payload_bits: int
    effective_payload_bits: int
    tx_start_us: int
    sense_start_us: int
    backoff_slots: int
    init_restarts: int

    @property
    def total_duration_us(self) -> int:
        return self.wait_duration_us + self.tx_duration_us

    @property
    def tx_end_us(self) -> int:
        return self.tx_start_us + self.tx_duration_us


def occupation_time(kind: AgentKind, cw: int, cfg: SimConfig) -> int:
    """Channel occupation of one transmission in microseconds."""
    if cw not in cfg.cw_set:
        raise ConfigError(f"unknown contention window {cw}; expected one of {cfg.cw_set}")
    if kind is AgentKind.LteEnb:
        return cfg.lte_occupation_ms[cw] * SUBFRAME_US
    bits = cfg.wifi_packet_bytes * 8
    return int(round(bits / cfg.rate_mbps))


def assess_backoff_slot(occupied_us_within_slot: int, p_e: float,
                        rng: np.random.Generator) -> SlotOutcome:
    """Judge one back-off slot from 1 us sub-senses.

    Each truly occupied microsecond is missed with probability ``p_e``; the
    slot is idle when at most five microseconds are judged occupied.
    """
    if occupied_us_within_slot <= 0:
        return SlotOutcome.Idle
    if p_e > 0.0:
        sensed = int(rng.binomial(occupied_us_within_slot, 1.0 - p_e))
    else:
        sensed = occupied_us_within_slot
    return SlotOutcome.Idle if sensed <= BUSY_SENSE_LIMIT else SlotOutcome.Busy


# -- channel view ------------------------------------------------------------

class _Channel:
    """Transmissions that have started so far, as half-open [start, end) intervals."""

    def __init__(self):
        self.intervals: list[tuple[int, int]] = []
        self._union: list[tuple[int, int]] = []

    def add(self, start: int, end: int) -> None:
        self.intervals.append((start, end))
        merged: list[list[int]] = []
        for s, e in sorted(self.intervals):
            if merged and s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        self._union = [(s, e) for s, e in merged]

    def union(self) -> list[tuple[int, int]]:
        return self._union

    def segments(self, lo: int, hi: int) -> list[tuple[int, int, int]]:
        """(start, end, multiplicity) pieces of [lo, hi) with multiplicity >= 1."""
        points = {lo, hi}
        for s, e in self.intervals:
            if s < hi and e > lo:
                points.add(max(s, lo))
                points.add(min(e, hi))
        cuts = sorted(points)
        out = []
        for a, b in zip(cuts, cuts[1:]):
            m = sum(1 for s, e in self.intervals if s <= a and e >= b)
            if m:
                out.append((a, b, m))
        return out

    def first_idle(self, t: int) -> int:
        for s, e in self._union:
            if s <= t < e:
                return e
        return t

    def occupied_in(self, lo: int, hi: int) -> int:
        total = 0
        for s, e in self._union:
            if s >= hi:
                break
            if e > lo:
                total += min(e, hi) - max(s, lo)
        return total


# -- per-agent listen-before-talk state machine ---------------------------------

_INIT, _WAIT, _BACKOFF, _TX = range(4)


class _Lbt:
    __slots__ = ("sense_us", "slot_us", "counter", "phase", "window_start", "cursor",
                 "slot_start", "slots", "restarts", "tx_start")

    def __init__(self, sense_us: int, slot_us: int, counter: int):
        self.sense_us = sense_us
        self.slot_us = slot_us
        self.counter = counter
        self.phase = _INIT
        self.window_start = 0
        self.cursor = 0
        self.slot_start = 0
        self.slots = 0
        self.restarts = 0
        self.tx_start = -1

    def copy(self) -> "_Lbt":
        other = _Lbt.__new__(_Lbt)
        for name in _Lbt.__slots__:
            setattr(other, name, getattr(self, name))
        return other

    def lower_bound(self, channel: _Channel) -> int:
        """Earliest time this agent could start transmitting (sensing errors only delay)."""
        backoff = self.slot_us * self.counter
        if self.phase == _INIT:
            return self.window_start + self.sense_us + backoff
        if self.phase == _WAIT:
            return channel.first_idle(self.cursor) + self.sense_us + backoff
        if self.phase == _BACKOFF:
            return self.slot_start + backoff
        return self.tx_start

    def advance(self, until: int, channel: _Channel, p_e: float, rng) -> None:
        """Process everything this agent decides strictly from sensing before ``until``."""
        while self.phase != _TX:
            if self.phase == _INIT:
                window_end = self.window_start + self.sense_us
                lim = min(window_end, until)
                hit = self._detect(max(self.window_start, self.cursor), lim, channel, p_e, rng)
                if hit is not None:
                    self.phase = _WAIT
                    self.cursor = hit
                    continue
                if window_end > until:
                    self.cursor = until
                    return
                self.phase = _BACKOFF
                self.slot_start = window_end
                if self.counter == 0:
                    self._transmit(window_end)
                    return
            elif self.phase == _WAIT:
                idle = channel.first_idle(self.cursor)
                if idle >= until:
                    # a transmission may still start at ``until``; decide next round
                    self.cursor = until
                    return
                self.phase = _INIT
                self.window_start = self.cursor = idle
                self.restarts += 1
            else:
                self._count_down(until, channel, p_e, rng)
                return

    def _transmit(self, t: int) -> None:
        self.phase = _TX
        self.tx_start = t

    def _detect(self, lo, hi, channel, p_e, rng):
        if lo >= hi:
            return None
        if p_e == 0.0:
            for s, e in channel.union():
                if e > lo and s < hi:
                    return max(s, lo)
            return None
        for a, b, m in channel.segments(lo, hi):
            k = int(rng.geometric(1.0 - p_e ** m))
            if k <= b - a:
                return a + k - 1
        return None

    def _count_down(self, until, channel, p_e, rng) -> None:
        slot = self.slot_us
        union = channel.union()
        while self.slot_start + slot <= until:
            s = self.slot_start
            avail = (until - s) // slot
            nxt = next(((a, b) for a, b in union if b > s), None)
            if nxt is None or nxt[0] >= s + slot:
                # run of idle slots before the next occupied microsecond
                free = avail if nxt is None else min(avail, (nxt[0] - s) // slot)
                k = min(self.counter, free)
                self.counter -= k
                self.slots += k
                self.slot_start = s + k * slot
                if self.counter == 0:
                    self._transmit(self.slot_start)
                    return
                continue
            a, b = nxt
            if p_e == 0.0 and a <= s and s + slot <= b:
                k = min(avail, (b - s) // slot)
                self.slots += k
                self.slot_start = s + k * slot
                continue
            if p_e == 0.0:
                outcome = assess_backoff_slot(channel.occupied_in(s, s + slot), 0.0, rng)
            else:
                sensed = 0
                for x, y, m in channel.segments(s, s + slot):
                    sensed += int(rng.binomial(y - x, 1.0 - p_e ** m))
                outcome = SlotOutcome.Idle if sensed <= BUSY_SENSE_LIMIT else SlotOutcome.Busy
            self.slots += 1
            self.slot_start = s + slot
            if outcome is SlotOutcome.Idle:
                self.counter -= 1
                if self.counter == 0:
                    self._transmit(self.slot_start)
                    return


def run_contention_epoch(cfg: SimConfig, kinds, cw_choices, rng: np.random.Generator,
                         counters=None) -> list[ContentionResult]:
    """Simulate one synchronized contention epoch.

    ``counters`` pins the back-off draws (one per agent); by default each is
    drawn uniformly from ``{0, ..., cw}`` in agent order.
    """
    kinds = list(kinds)
    cw_choices = [int(c) for c in cw_choices]
    if not kinds:
        raise ConfigError("contention epoch needs at least one agent")
    if len(kinds) != len(cw_choices):
        raise ConfigError("kinds and cw_choices must have equal length")
    durations = [occupation_time(k, cw, cfg) for k, cw in zip(kinds, cw_choices)]
    if counters is None:
        counters = [int(rng.integers(0, cw + 1)) for cw in cw_choices]
    else:
        counters = [int(c) for c in counters]
        if len(counters) != len(kinds) or any(not 0 <= c <= cw for c, cw in zip(counters, cw_choices)):
            raise ConfigError("pinned counters must lie in [0, cw] for every agent")

    p_e = float(cfg.sense_error_prob)
    agents = [_Lbt(cfg.initial_sense_us(k), cfg.slot_us(k), c) for k, c in zip(kinds, counters)]
    channel = _Channel()
    pending = list(range(len(agents)))
    while pending:
        if p_e == 0.0:
            horizon = _FOREVER
            for i in pending:
                probe = agents[i].copy()
                probe.advance(_FOREVER, channel, 0.0, None)
                horizon = min(horizon, probe.tx_start)
        else:
            horizon = min(agents[i].lower_bound(channel) for i in pending)
        started = []
        for i in pending:
            agents[i].advance(horizon, channel, p_e, rng)
            if agents[i].phase == _TX:
                started.append(i)
        for i in started:
            channel.add(agents[i].tx_start, agents[i].tx_start + durations[i])
        pending = [i for i in pending if agents[i].phase != _TX]

    intervals = [(ag.tx_start, ag.tx_start + d) for ag, d in zip(agents, durations)]
    results = []
    for i, (kind, ag) in enumerate(zip(kinds, agents)):
        start, end = intervals[i]
        others = [iv for j, iv in enumerate(intervals) if j != i]
        payload = durations[i] * cfg.rate_mbps
        if kind is AgentKind.LteEnb:
            good = 0
            for sf in range(start, end, SUBFRAME_US):
                sf_end = min(sf + SUBFRAME_US, end)
                if not any(s < sf_end and e > sf for s, e in others):
                    good += (sf_end - sf) * cfg.rate_mbps
        else:
            good = 0 if any(s < end and e > start for s, e in others) else payload
        results.append(ContentionResult(
            kind=kind, cw=cw_choices[i], counter=counters[i],
            wait_duration_us=start, tx_duration_us=durations[i],
            payload_bits=payload, effective_payload_bits=good,
            tx_start_us=start, sense_start_us=ag.window_start,
            backoff_slots=ag.slots, init_restarts=ag.restarts,
        ))
    return results


def occupancy_at(results, t_us: int) -> int:
    """Number of agents transmitting during microsecond ``t_us`` (the global state)."""
    return sum(1 for r in results if r.tx_start_us <= t_us < r.tx_end_us)

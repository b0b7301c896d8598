"""Cluster-wide event log and the time service."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Optional

if TYPE_CHECKING:
    from .node import ClusterNode


@dataclass(frozen=True, order=True)
class EventRecord:
    at: int
    origin: int
    local_seq: int
    body: str

    def format(self) -> str:
        return f"t={self.at} origin={self.origin} seq={self.local_seq} {self.body}"


@dataclass(frozen=True)
class EventMsg:
    record: EventRecord


class EventLog:
    """Local event log file; survives crashes.

    Records are broadcast to the current view.  A receiver forwards a record
    it has not seen before, so one surviving copy reaches every member.
    """

    def __init__(self, node: "ClusterNode") -> None:
        self.node = node
        self.records: dict[tuple[int, int], EventRecord] = {}
        self.local_seq = 0

    def log_event(self, body: str) -> EventRecord:
        node = self.node
        self.local_seq += 1
        rec = EventRecord(node.kernel.now, node.id, self.local_seq, body)
        self.records[(rec.origin, rec.local_seq)] = rec
        self._flood(rec, exclude=())
        node.kernel.record(node.id, "EVENT", f"origin={rec.origin} seq={rec.local_seq} {body}")
        return rec

    def _flood(self, rec: EventRecord, exclude: Iterable[int]) -> None:
        node = self.node
        if node.view is None or not node.is_member():
            return
        skip = set(exclude) | {node.id}
        for peer in sorted(node.view.active - skip):
            node.send(peer, EventMsg(rec))

    def on_event(self, src: int, msg: EventMsg) -> None:
        rec = msg.record
        key = (rec.origin, rec.local_seq)
        if key in self.records:
            return
        self.records[key] = rec
        self._flood(rec, exclude=(src, rec.origin))

    def merged_log(self) -> list[EventRecord]:
        return sorted(self.records.values())

    def dump(self) -> str:
        return "".join(r.format() + "\n" for r in self.merged_log())


@dataclass(frozen=True)
class TimeSync:
    primary: int
    stamp: Fraction
    round: int


class NodeClock:
    """Adjusted local clock: piecewise linear in kernel time, never decreasing.

    ``drift`` is the fractional rate error of the hardware clock.  While a
    slew is active the clock runs ``slew_rate`` slower until the excess has
    been absorbed.
    """

    def __init__(self, offset: int = 0, drift: Fraction = Fraction(0)) -> None:
        self.base = Fraction(offset)
        self.t0: Fraction = Fraction(0)
        self.drift = Fraction(drift)
        self.slew = Fraction(0)
        self.slew_until: Optional[Fraction] = None

    def _rate(self) -> Fraction:
        return 1 + self.drift - self.slew

    def read(self, now: int) -> Fraction:
        if self.slew_until is not None and now > self.slew_until:
            self._rebase(self.slew_until)
            self.slew = Fraction(0)
            self.slew_until = None
        return self.base + self._rate() * (now - self.t0)

    def _rebase(self, now) -> None:
        self.base = self.base + self._rate() * (now - self.t0)
        self.t0 = Fraction(now)

    def step_forward(self, now: int, amount: Fraction) -> None:
        if amount < 0:
            raise ValueError("clock steps only forward")
        self.read(now)
        self._rebase(now)
        self.base += amount

    def start_slew(self, now: int, amount: Fraction, rate: Fraction) -> None:
        """Lose ``amount`` ticks of clock time by running slower at ``rate``."""
        self.read(now)
        self._rebase(now)
        self.slew = Fraction(rate)
        self.slew_until = now + amount / rate

    def set_drift(self, now: int, drift: Fraction) -> None:
        self.read(now)
        self._rebase(now)
        self.drift = Fraction(drift)

    def jump(self, now: int, amount: Fraction) -> None:
        """Scripted fault: the hardware clock jumps (either direction)."""
        self.read(now)
        self._rebase(now)
        self.base += amount


class TimeService:
    def __init__(self, node: "ClusterNode", clock: NodeClock) -> None:
        self.node = node
        self.clock = clock
        self.round = 0
        self.adjustments: list[tuple[int, str, Fraction]] = []

    def primary(self) -> Optional[int]:
        view = self.node.view
        return None if view is None else min(view.active)

    def tick(self) -> None:
        """Primary broadcasts its clock; re-armed by the node timer."""
        node = self.node
        if not node.is_member() or self.primary() != node.id:
            return
        self.round += 1
        stamp = self.clock.read(node.kernel.now)
        for peer in sorted(node.view.active - {node.id}):
            node.send(peer, TimeSync(node.id, stamp, self.round))

    def on_sync(self, src: int, msg: TimeSync) -> None:
        node = self.node
        if not node.is_member() or self.primary() != src:
            return
        now = node.kernel.now
        link = node.kernel.link(src, node.id)
        expected = msg.stamp + link.base_delay
        mine = self.clock.read(now)
        error = mine - expected
        bound = Fraction(node.cfg.skew_bound)
        if abs(error) * 2 <= bound:
            return
        if error < 0:
            self.clock.step_forward(now, -error)
            self.adjustments.append((now, "step", -error))
        else:
            self.clock.start_slew(now, error, node.cfg.slew_rate)
            self.adjustments.append((now, "slew", error))
        node.kernel.record(node.id, "TIME", f"adjust={float(-error):.3f}")


def max_skew(readings: Iterable[Fraction]) -> Fraction:
    vals = list(readings)
    return max(vals) - min(vals) if vals else Fraction(0)

"""Deterministic discrete-event kernel.

Virtual time is an integer count of simulated milliseconds.  Events are
dispatched in ``(due, seq)`` order, where ``seq`` is a counter assigned at
scheduling time, so a fixed seed and scenario always produce the same trace.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Iterable, NamedTuple, Optional

KERNEL = "kernel"
QUORUM_DEVICE = 0


class PastDue(Exception):
    """Raised when an event is scheduled before the current virtual time."""


class LivelockGuard(Exception):
    """Raised when a run dispatches more events than the configured ceiling."""


class EventKind(str, Enum):
    MESSAGE = "MessageDelivery"
    TIMER = "TimerFire"
    FAULT = "FaultAction"
    COMMAND = "ScenarioCommand"


@dataclass(slots=True)
class SimEvent:
    due: int
    target: Any
    kind: EventKind
    payload: Any = None
    seq: int = -1
    incarnation: Optional[int] = None
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


class TraceRecord(NamedTuple):
    t: int
    node: Any
    kind: str
    detail: str

    def format(self) -> str:
        return f"t={self.t} node={self.node} kind={self.kind} detail={self.detail}"


class Envelope(NamedTuple):
    src: int
    dst: int
    iface: int
    msg: Any


@dataclass
class LinkModel:
    base_delay: int = 2
    interfaces: int = 1
    drop_probability: Fraction = Fraction(0)


# -- fault actions ---------------------------------------------------------


@dataclass(frozen=True)
class CrashNode:
    node: int


@dataclass(frozen=True)
class ReviveNode:
    node: int


@dataclass(frozen=True)
class PartitionSet:
    groups: tuple[frozenset[int], ...]


@dataclass(frozen=True)
class HealPartition:
    pass


@dataclass(frozen=True)
class DropNext:
    src: int
    dst: int
    count: int = 1
    iface: Optional[int] = None


@dataclass(frozen=True)
class DelayLink:
    src: int
    dst: int
    extra: int


FaultAction = Any


@dataclass
class FaultScript:
    actions: list[tuple[int, FaultAction]] = field(default_factory=list)

    def add(self, at: int, action: FaultAction) -> "FaultScript":
        self.actions.append((at, action))
        return self


def _describe(action: FaultAction) -> str:
    if isinstance(action, CrashNode):
        return f"crash {action.node}"
    if isinstance(action, ReviveNode):
        return f"revive {action.node}"
    if isinstance(action, PartitionSet):
        return "partition " + "|".join(
            ",".join(str(n) for n in sorted(g)) for g in action.groups
        )
    if isinstance(action, HealPartition):
        return "heal"
    if isinstance(action, DropNext):
        iface = "" if action.iface is None else f" iface={action.iface}"
        return f"drop {action.src}->{action.dst} count={action.count}{iface}"
    if isinstance(action, DelayLink):
        return f"delay {action.src}->{action.dst} extra={action.extra}"
    return repr(action)


class Kernel:
    """Event scheduler, virtual clock and datagram transport.

    Handlers register per endpoint id.  A handler object must provide
    ``on_message(envelope)`` and ``on_timer(payload)``; nodes additionally
    implement ``on_crash()`` and ``on_revive()``.  Endpoint ``0`` is reserved
    for the shared quorum device, which is never partitioned away.
    """

    def __init__(
        self,
        seed: int = 0,
        *,
        base_delay: int = 2,
        interfaces: int = 1,
        event_ceiling: int = 10**6,
        trace_dispatch: bool = True,
    ) -> None:
        self.now = 0
        self.rng = random.Random(seed)
        self.event_ceiling = event_ceiling
        self.trace_dispatch = trace_dispatch
        self.default_link = LinkModel(base_delay=base_delay, interfaces=interfaces)
        self.links: dict[tuple[int, int], LinkModel] = {}
        self.handlers: dict[Any, Any] = {}
        self.alive: dict[int, bool] = {}
        self.incarnation: dict[int, int] = {}
        self.trace: list[TraceRecord] = []
        self.dispatched = 0
        self._queue: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self._partition: Optional[dict[int, int]] = None
        self._drop_next: dict[tuple[int, int, Optional[int]], int] = {}
        self._extra_delay: dict[tuple[int, int], int] = {}
        self._triggers: list[tuple[Callable[[TraceRecord], bool], Callable[[], None]]] = []
        self._observers: list[Callable[["Kernel"], None]] = []
        self._deferred: list[Callable[[], None]] = []
        self.last_event: Optional[SimEvent] = None

    # -- topology ----------------------------------------------------------

    def add_endpoint(self, ident: Any, handler: Any) -> None:
        self.handlers[ident] = handler
        if isinstance(ident, int) and ident != QUORUM_DEVICE:
            self.alive[ident] = False
            self.incarnation[ident] = 0

    def set_link(self, a: int, b: int, model: LinkModel, *, symmetric: bool = True) -> None:
        self.links[(a, b)] = model
        if symmetric:
            self.links[(b, a)] = LinkModel(
                model.base_delay, model.interfaces, model.drop_probability
            )

    def link(self, a: int, b: int) -> LinkModel:
        return self.links.get((a, b), self.default_link)

    def interfaces(self, a: int, b: int) -> int:
        return self.link(a, b).interfaces

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.alive)

    def is_alive(self, node: int) -> bool:
        return self.alive.get(node, False)

    # -- scheduling --------------------------------------------------------

    def schedule(self, event: SimEvent) -> SimEvent:
        if event.due < self.now:
            raise PastDue(f"event due at {event.due} scheduled at {self.now}")
        event.seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (event.due, event.seq, event))
        return event

    def set_timer(self, node: Any, delay: int, payload: Any) -> SimEvent:
        inc = self.incarnation.get(node) if isinstance(node, int) else None
        return self.schedule(
            SimEvent(self.now + delay, node, EventKind.TIMER, payload, incarnation=inc)
        )

    def call_at(self, at: int, fn: Callable[[], None]) -> SimEvent:
        return self.schedule(SimEvent(at, KERNEL, EventKind.COMMAND, fn))

    def load_faults(self, script: FaultScript) -> None:
        for at, action in script.actions:
            self.schedule(SimEvent(at, KERNEL, EventKind.FAULT, action))

    def add_trigger(
        self, predicate: Callable[[TraceRecord], bool], action: Callable[[], None]
    ) -> None:
        """Run ``action`` once, right after the first trace record matching
        ``predicate`` is emitted."""
        self._triggers.append((predicate, action))

    def defer(self, fn: Callable[[], None]) -> None:
        """Run ``fn`` once the event being dispatched has been fully handled."""
        self._deferred.append(fn)

    def add_observer(self, fn: Callable[["Kernel"], None]) -> None:
        """Call ``fn(kernel)`` after every dispatched event."""
        self._observers.append(fn)

    # -- transport ---------------------------------------------------------

    def reachable(self, a: int, b: int) -> bool:
        if self._partition is None or a == QUORUM_DEVICE or b == QUORUM_DEVICE:
            return True
        return self._partition.get(a, -1) == self._partition.get(b, -2)

    def send(self, src: int, dst: int, msg: Any, iface: int = 0) -> None:
        if src != QUORUM_DEVICE and not self.alive.get(src, False):
            return
        if dst not in self.handlers or not self.reachable(src, dst):
            return
        if self._drop_next:
            for key in ((src, dst, iface), (src, dst, None)):
                left = self._drop_next.get(key, 0)
                if left:
                    self._drop_next[key] = left - 1
                    return
        link = self.links.get((src, dst), self.default_link)
        if link.drop_probability and self.rng.random() < float(link.drop_probability):
            return
        delay = link.base_delay
        if self._extra_delay:
            delay += self._extra_delay.get((src, dst), 0)
        self.schedule(
            SimEvent(
                self.now + delay, dst, EventKind.MESSAGE, Envelope(src, dst, iface, msg)
            )
        )

    # -- trace -------------------------------------------------------------

    def record(self, node: Any, kind: str, detail: str = "") -> None:
        if isinstance(node, int) and node != QUORUM_DEVICE and not self.alive.get(node, False):
            return
        rec = TraceRecord(self.now, node, kind, detail)
        self.trace.append(rec)
        if self._triggers:
            fired = [t for t in self._triggers if t[0](rec)]
            for trig in fired:
                self._triggers.remove(trig)
                trig[1]()

    def records(self, kind: Optional[str] = None) -> list[TraceRecord]:
        if kind is None:
            return list(self.trace)
        return [r for r in self.trace if r.kind == kind]

    def trace_text(self, kinds: Optional[Iterable[str]] = None) -> str:
        wanted = None if kinds is None else set(kinds)
        return "".join(
            r.format() + "\n" for r in self.trace if wanted is None or r.kind in wanted
        )

    # -- faults ------------------------------------------------------------

    def crash(self, node: int) -> None:
        if not self.alive.get(node, False):
            return
        self.record(KERNEL, "FAULT", f"crash {node}")
        self.alive[node] = False
        self.incarnation[node] += 1
        self.handlers[node].on_crash()

    def revive(self, node: int) -> None:
        if self.alive.get(node, True):
            return
        self.record(KERNEL, "FAULT", f"revive {node}")
        self.alive[node] = True
        self.incarnation[node] += 1
        self.handlers[node].on_revive()

    def reset_timers(self, node: int) -> None:
        """Invalidate every pending timer of ``node`` (service restart)."""
        self.incarnation[node] += 1

    def apply_fault(self, action: FaultAction) -> None:
        if isinstance(action, CrashNode):
            self.crash(action.node)
            return
        if isinstance(action, ReviveNode):
            self.revive(action.node)
            return
        self.record(KERNEL, "FAULT", _describe(action))
        if isinstance(action, PartitionSet):
            seen: set[int] = set()
            mapping: dict[int, int] = {}
            for i, group in enumerate(action.groups):
                if seen & group:
                    raise ValueError("partition groups must be disjoint")
                seen |= group
                for n in group:
                    mapping[n] = i
            self._partition = mapping
        elif isinstance(action, HealPartition):
            self._partition = None
        elif isinstance(action, DropNext):
            key = (action.src, action.dst, action.iface)
            self._drop_next[key] = self._drop_next.get(key, 0) + action.count
        elif isinstance(action, DelayLink):
            self._extra_delay[(action.src, action.dst)] = action.extra
        else:
            raise TypeError(f"unknown fault action {action!r}")

    # -- main loop ---------------------------------------------------------

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._queue if not ev.cancelled)

    def step(self) -> bool:
        while self._queue:
            _, _, ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.due
            self.dispatched += 1
            if self.dispatched > self.event_ceiling:
                raise LivelockGuard(
                    f"more than {self.event_ceiling} events dispatched by t={self.now}"
                )
            self.last_event = ev
            self._dispatch(ev)
            while self._deferred:
                self._deferred.pop(0)()
            for fn in self._observers:
                fn(self)
            return True
        return False

    def run(self, until: Optional[int] = None) -> list[TraceRecord]:
        """Dispatch events up to and including virtual time ``until``.

        With ``until=None`` the kernel runs to quiescence (empty queue).
        """
        while self._queue:
            due = self._queue[0][0]
            if until is not None and due > until:
                break
            self.step()
        if until is not None and until > self.now:
            self.now = until
        return self.trace

    def _dispatch(self, ev: SimEvent) -> None:
        if ev.kind is EventKind.MESSAGE:
            env: Envelope = ev.payload
            if env.dst != QUORUM_DEVICE and not self.alive.get(env.dst, False):
                return
            if self.trace_dispatch:
                self.trace.append(
                    TraceRecord(self.now, env.dst, "deliver",
                                f"src={env.src} if={env.iface} msg={type(env.msg).__name__}")
                )
            self.handlers[env.dst].on_message(env)
        elif ev.kind is EventKind.TIMER:
            if isinstance(ev.target, int) and ev.target != QUORUM_DEVICE:
                if not self.alive.get(ev.target, False):
                    return
                if ev.incarnation != self.incarnation[ev.target]:
                    return
            self.handlers[ev.target].on_timer(ev.payload)
        elif ev.kind is EventKind.FAULT:
            self.apply_fault(ev.payload)
        elif ev.kind is EventKind.COMMAND:
            ev.payload()

"""Heartbeat-based failure detection.

Each node heartbeats every active peer over every interface once per period.
The first copy of a heartbeat sequence number resets that peer's deadline to
``receipt + 2 * period``; copies arriving over other interfaces only prove the
interface is up.  A periodic check (every half period) raises at most one
suspicion per silence episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

from .simkernel import Kernel

UP = "Up"
SUSPECTED_DOWN = "SuspectedDown"
NODE_SILENT = "NodeSilent"
INTERFACE_SILENT = "InterfaceSilent"


class UnknownSender(Exception):
    pass


@dataclass(frozen=True)
class Heartbeat:
    sender: int
    iface: int
    hb_seq: int


@dataclass(frozen=True)
class Suspicion:
    about: Union[int, tuple[int, int]]
    raised_at: int
    kind: str


@dataclass
class PeerEntry:
    last_receipt: int
    alive_deadline: int
    last_hb_seq: int = -1
    iface_last: dict[int, int] = field(default_factory=dict)
    iface_health: dict[int, str] = field(default_factory=dict)
    suspected: bool = False


class NetMonitor:
    def __init__(self, node: int, kernel: Kernel, period: int) -> None:
        self.node = node
        self.kernel = kernel
        self.period = period
        self.window = 2 * period
        self.hb_seq = 0
        self.peers: dict[int, PeerEntry] = {}
        self.discarded = 0
        self.running = False

    # -- peer set ----------------------------------------------------------

    def set_peers(self, active: Iterable[int], now: int) -> None:
        """Track exactly ``active`` minus self; new peers get a full window."""
        wanted = {n for n in active if n != self.node}
        for gone in set(self.peers) - wanted:
            del self.peers[gone]
        for n in sorted(wanted - set(self.peers)):
            ifaces = self.kernel.interfaces(self.node, n)
            self.peers[n] = PeerEntry(
                last_receipt=now,
                alive_deadline=now + self.window,
                iface_last={i: now for i in range(ifaces)},
                iface_health={i: UP for i in range(ifaces)},
            )

    # -- heartbeats --------------------------------------------------------

    def tick_heartbeats(self, now: int) -> list[tuple[int, Heartbeat]]:
        """Emit one heartbeat per (peer, interface) and return them."""
        self.hb_seq += 1
        out = []
        for peer in sorted(self.peers):
            for iface in range(self.kernel.interfaces(self.node, peer)):
                hb = Heartbeat(self.node, iface, self.hb_seq)
                self.kernel.send(self.node, peer, hb, iface)
                out.append((peer, hb))
        return out

    def on_heartbeat(self, msg: Heartbeat, now: int) -> PeerEntry:
        entry = self.peers.get(msg.sender)
        if entry is None:
            self.discarded += 1
            raise UnknownSender(msg.sender)
        entry.iface_last[msg.iface] = now
        entry.iface_health[msg.iface] = UP
        if msg.hb_seq > entry.last_hb_seq:
            entry.last_hb_seq = msg.hb_seq
            entry.last_receipt = now
            entry.alive_deadline = now + self.window
            entry.suspected = False
        return entry

    def check_suspicions(self, now: int) -> list[Suspicion]:
        out: list[Suspicion] = []
        for peer in sorted(self.peers):
            entry = self.peers[peer]
            if now > entry.alive_deadline:
                if not entry.suspected:
                    entry.suspected = True
                    out.append(Suspicion(peer, now, NODE_SILENT))
                continue
            for iface in sorted(entry.iface_last):
                if now > entry.iface_last[iface] + self.window:
                    if entry.iface_health[iface] == UP:
                        entry.iface_health[iface] = SUSPECTED_DOWN
                        out.append(Suspicion((peer, iface), now, INTERFACE_SILENT))
        for s in out:
            self.kernel.record(self.node, "SUSPECT", _fmt(s))
        return out

    def connectivity_snapshot(self) -> Optional[frozenset[int]]:
        """Peers this node currently considers reachable (self included)."""
        if not self.kernel.is_alive(self.node):
            return None
        ok = {p for p, e in self.peers.items() if not e.suspected}
        ok.add(self.node)
        return frozenset(ok)

    def is_suspected(self, peer: int) -> bool:
        e = self.peers.get(peer)
        return e is not None and e.suspected

    # -- timer driving -----------------------------------------------------

    def start(self) -> None:
        if self.running:
            return
        self.running = True
        self.tick_heartbeats(self.kernel.now)
        self.kernel.set_timer(self.node, self.period, ("netmon", "hb"))
        self.kernel.set_timer(self.node, max(1, self.period // 2), ("netmon", "check"))

    def reset(self) -> None:
        self.running = False
        self.peers.clear()


def _fmt(s: Suspicion) -> str:
    if s.kind == NODE_SILENT:
        return f"about={s.about} kind={s.kind}"
    peer, iface = s.about  # type: ignore[misc]
    return f"about={peer} iface={iface} kind={s.kind}"

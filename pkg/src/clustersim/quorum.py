"""Simulated quorum device and challenge/defense arbitration.

The device is a kernel endpoint (id 0) reached through ordinary messages, so
drops and delays apply to arbitration traffic as well.  It also stores the
master copy of the cluster database (:class:`~clustersim.clusterdb.MasterLog`).

Challenge/defense: a challenger whose reservation attempt conflicts breaks the
reservation, waits ``challenge_wait`` after the break is acknowledged, and
tries again.  A live owner re-reserves every ``defense_period``, so it always
lands inside the window and the challenger loses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .clusterdb import MasterLog
from .simkernel import QUORUM_DEVICE, Envelope, Kernel


class NotOwner(Exception):
    pass


class DeviceUnavailable(Exception):
    pass


@dataclass(frozen=True)
class QReserve:
    node: int
    purpose: str  # "probe" | "final" | "defend"


@dataclass(frozen=True)
class QReserveReply:
    node: int
    purpose: str
    ok: bool


@dataclass(frozen=True)
class QBreak:
    node: int


@dataclass(frozen=True)
class QBreakAck:
    node: int


@dataclass(frozen=True)
class QRelease:
    node: int


@dataclass(frozen=True)
class QReleaseReply:
    node: int
    ok: bool


class QuorumDevice:
    """Shared reservable device.  ``reservation`` changes only here."""

    def __init__(self, kernel: Kernel, checkpoint_every: int = 64) -> None:
        self.kernel = kernel
        self.reservation: Optional[int] = None
        self.last_defense = 0
        self.available = True
        self.held_forever = False
        self.master = MasterLog(checkpoint_every)
        kernel.add_endpoint(QUORUM_DEVICE, self)

    def _reply(self, dst: int, msg: object) -> None:
        self.kernel.send(QUORUM_DEVICE, dst, msg)

    def on_message(self, env: Envelope) -> None:
        if not self.available:
            return
        msg = env.msg
        k = self.kernel
        if isinstance(msg, QReserve):
            if msg.purpose == "final":
                # decide after every message already due this tick, so a
                # defense landing on the same tick wins the tie
                k.set_timer(QUORUM_DEVICE, 0, ("resolve", msg))
            else:
                self._reserve(msg)
        elif isinstance(msg, QBreak):
            if not self.held_forever and self.reservation is not None:
                k.record("quorum", "QUORUM", f"action=break node={msg.node}")
                self.reservation = None
            self._reply(msg.node, QBreakAck(msg.node))
        elif isinstance(msg, QRelease):
            ok = self.reservation == msg.node
            if ok:
                self.reservation = None
                k.record("quorum", "QUORUM", f"action=release node={msg.node}")
            self._reply(msg.node, QReleaseReply(msg.node, ok))

    def on_timer(self, payload: tuple) -> None:
        if payload[0] == "resolve" and self.available:
            self._reserve(payload[1])

    def _reserve(self, msg: QReserve) -> None:
        k = self.kernel
        if self.held_forever:
            ok = False
        elif self.reservation is None:
            self.reservation = msg.node
            self.last_defense = k.now
            action = "defend" if msg.purpose == "defend" else "reserve"
            k.record("quorum", "QUORUM", f"action={action} node={msg.node}")
            ok = True
        elif self.reservation == msg.node:
            self.last_defense = k.now
            ok = True
        else:
            ok = False
        if msg.purpose != "defend" or not ok:
            self._reply(msg.node, QReserveReply(msg.node, msg.purpose, ok))

    def append_log(self, node: int, update: object) -> bool:
        """Write-through of an installed update; only the holder may write."""
        if not self.available or self.reservation != node:
            return False
        self.master.append(update)
        return True

    def rewrite_master(self, node: int, db: object) -> bool:
        if not self.available or self.reservation != node:
            return False
        self.master.rewrite(db)
        return True


class Arbiter:
    """Per-node arbitration state: challenge, win/lose, defend, release."""

    def __init__(self, node: int, kernel: Kernel, defense_period: int = 3,
                 challenge_wait: int = 6, rpc_timeout: int = 20) -> None:
        self.node = node
        self.kernel = kernel
        self.defense_period = defense_period
        self.challenge_wait = challenge_wait
        self.rpc_timeout = rpc_timeout
        self.is_owner = False
        self.acquired_at: Optional[int] = None
        self._attempt = 0
        self._phase: Optional[str] = None
        self._on_done: Optional[Callable[[bool], None]] = None
        self.on_lost: Optional[Callable[[], None]] = None

    # -- arbitration -------------------------------------------------------

    @property
    def busy(self) -> bool:
        return self._phase is not None

    def arbitrate(self, on_done: Callable[[bool], None]) -> None:
        if self.is_owner:
            on_done(True)
            return
        self._attempt += 1
        self._on_done = on_done
        self._phase = "probe"
        self._send(QReserve(self.node, "probe"))
        self._arm()

    def _send(self, msg: object) -> None:
        self.kernel.send(self.node, QUORUM_DEVICE, msg)

    def _arm(self) -> None:
        self.kernel.set_timer(self.node, self.rpc_timeout,
                              ("quorum", ("timeout", self._attempt, self._phase)))

    def _finish(self, won: bool) -> None:
        cb, self._on_done, self._phase = self._on_done, None, None
        if won:
            self.is_owner = True
            self.acquired_at = self.kernel.now
            self.kernel.record(self.node, "QUORUM", f"action=win node={self.node}")
            self.kernel.set_timer(self.node, self.defense_period, ("quorum", ("defend",)))
        else:
            self.kernel.record(self.node, "QUORUM", f"action=lose node={self.node}")
        if cb is not None:
            cb(won)

    def on_message(self, msg: object) -> None:
        if isinstance(msg, QReserveReply):
            if msg.purpose == "defend":
                if not msg.ok and self.is_owner:
                    self.is_owner = False
                    self.kernel.record(self.node, "QUORUM", f"action=lose node={self.node}")
                    if self.on_lost is not None:
                        self.on_lost()
                return
            if msg.purpose != self._phase:
                return
            if msg.ok:
                self._finish(True)
            elif msg.purpose == "probe":
                self._phase = "break"
                self._send(QBreak(self.node))
                self._arm()
            else:
                self._finish(False)
        elif isinstance(msg, QBreakAck) and self._phase == "break":
            self._phase = "wait"
            self.kernel.set_timer(self.node, self.challenge_wait,
                                  ("quorum", ("final", self._attempt)))

    def on_timer(self, payload: tuple) -> None:
        kind = payload[0]
        if kind == "defend":
            if self.is_owner:
                self._send(QReserve(self.node, "defend"))
                self.kernel.set_timer(self.node, self.defense_period, ("quorum", ("defend",)))
        elif kind == "final":
            if payload[1] == self._attempt and self._phase == "wait":
                self._phase = "final"
                self._send(QReserve(self.node, "final"))
                self._arm()
        elif kind == "timeout":
            _, attempt, phase = payload
            if attempt == self._attempt and self._phase == phase:
                self._finish(False)

    # -- ownership ---------------------------------------------------------

    def release(self) -> None:
        if not self.is_owner:
            raise NotOwner(f"node {self.node} does not own the quorum resource")
        self.is_owner = False
        self._send(QRelease(self.node))

    def reset(self) -> None:
        """Forget everything (halt or crash); defense stops with the timers."""
        self.is_owner = False
        self.acquired_at = None
        self._phase = None
        self._on_done = None
        self._attempt += 1

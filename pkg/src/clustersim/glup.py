"""Global update protocol: locker-serialized, node-ID-ordered atomic updates.

A sender asks the locker for the lock.  The locker assigns the next gseq,
installs the update itself, keeps it as the saved in-flight update and grants.
The sender then installs at every other node, one at a time, starting with the
node after the locker and wrapping around the ids, and finally unlocks.  If the
sender dies, whichever node is locker after the regroup replays its last
installed update to everyone; receivers drop duplicates by gseq.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Iterable, Optional

if TYPE_CHECKING:
    from .node import ClusterNode


class SenderNotMember(Exception):
    pass


def update_order(active: Iterable[int], locker: int) -> list[int]:
    """Locker first, then higher ids ascending, then lower ids ascending."""
    ids = sorted(set(active))
    if locker not in ids:
        raise ValueError(f"locker {locker} not in active set {ids}")
    return [locker] + [i for i in ids if i > locker] + [i for i in ids if i < locker]


def successor_locker(active: Iterable[int], old_locker: int, survivors: Iterable[int]) -> int:
    """First surviving node in the old update order."""
    alive = set(survivors)
    ids = sorted(set(active) | {old_locker})
    for n in update_order(ids, old_locker):
        if n in alive:
            return n
    raise ValueError("no survivors")


@dataclass(frozen=True)
class GlobalUpdate:
    gseq: int
    sender: int
    epoch: int
    req_id: Any
    payload: Any


# -- messages --------------------------------------------------------------


@dataclass(frozen=True)
class LockReq:
    req_id: Any
    sender: int
    payload: Any
    epoch: int
    extra: tuple[int, ...] = ()


@dataclass(frozen=True)
class Granted:
    update: GlobalUpdate


@dataclass(frozen=True)
class AlreadyDone:
    req_id: Any
    gseq: int


@dataclass(frozen=True)
class Rejected:
    req_id: Any
    reason: str


@dataclass(frozen=True)
class Install:
    update: GlobalUpdate
    replay: bool = False


@dataclass(frozen=True)
class InstallAck:
    gseq: int
    node: int


@dataclass(frozen=True)
class InstallNack:
    gseq: int
    node: int
    reason: str
    version: int


@dataclass(frozen=True)
class CatchUp:
    updates: tuple[GlobalUpdate, ...]


@dataclass(frozen=True)
class Unlock:
    gseq: int
    sender: int


@dataclass(frozen=True)
class UnlockAck:
    gseq: int


GLUP_MESSAGES = (LockReq, Granted, AlreadyDone, Rejected, Install, InstallAck,
                 InstallNack, CatchUp, Unlock, UnlockAck)


@dataclass
class _Request:
    req_id: Any
    payload: Any
    extra: tuple[int, ...]
    on_done: Optional[Callable[[bool], None]]


@dataclass
class _Propagation:
    update: GlobalUpdate
    remaining: list[int]
    extra: tuple[int, ...]
    replay: bool = False
    token: int = 0
    on_done: Optional[Callable[[], None]] = None
    unlocking: bool = False


@dataclass
class LockerState:
    busy_with: Optional[GlobalUpdate] = None
    queue: deque = field(default_factory=deque)
    frozen: bool = False


class GlupAgent:
    def __init__(self, node: "ClusterNode") -> None:
        self.node = node
        self.locker = LockerState()
        self.pending: dict[Any, _Request] = {}
        self.prop: Optional[_Propagation] = None
        self.replaying: Optional[_Propagation] = None
        self._req_counter = 0
        self._token = 0

    def reset(self) -> None:
        self.locker = LockerState()
        self.pending.clear()
        self.prop = None
        self.replaying = None

    # -- helpers -----------------------------------------------------------

    @property
    def k(self):
        return self.node.kernel

    def _trace(self, gseq: int, action: str) -> None:
        self.k.record(self.node.id, "GLUP", f"gseq={gseq} action={action}")

    def _send(self, dst: int, msg: Any) -> None:
        if dst == self.node.id:
            self.on_message(self.node.id, msg)
        else:
            self.node.send(dst, msg)

    def _new_token(self) -> int:
        self._token += 1
        return self._token

    # -- sender API --------------------------------------------------------

    def begin_update(self, payload: Any, *, extra: tuple[int, ...] = (),
                     on_done: Optional[Callable[[bool], None]] = None) -> Any:
        """Queue ``payload`` for global installation; returns the request id."""
        view = self.node.view
        if view is None or self.node.id not in view.active:
            raise SenderNotMember(self.node.id)
        self._req_counter += 1
        req_id = (self.node.id, self.node.boot_count, self._req_counter)
        self.pending[req_id] = _Request(req_id, payload, extra, on_done)
        self._request_lock(req_id)
        if len(self.pending) == 1:
            self.node.timer(self.node.cfg.lock_retry, ("glup", "retry"))
        return req_id

    def _request_lock(self, req_id: Any) -> None:
        view = self.node.view
        req = self.pending.get(req_id)
        if view is None or req is None:
            return
        self._send(self.node.current_locker(),
                   LockReq(req_id, self.node.id, req.payload, view.epoch, req.extra))

    def reissue_pending(self) -> None:
        """Re-send every ungranted request to the current locker."""
        for req_id in list(self.pending):
            if self.prop is None or self.prop.update.req_id != req_id:
                self._request_lock(req_id)

    def _complete(self, req_id: Any, ok: bool) -> None:
        req = self.pending.pop(req_id, None)
        if req is not None and req.on_done is not None:
            req.on_done(ok)

    # -- locker ------------------------------------------------------------

    def is_locker(self) -> bool:
        view = self.node.view
        return (view is not None and self.node.current_locker() == self.node.id
                and self.node.is_member())

    def _on_lock_req(self, msg: LockReq) -> None:
        if not self.is_locker():
            return
        busy = self.locker.busy_with
        if busy is not None and busy.req_id == msg.req_id:
            # granted (and applied here) but not yet propagated by the sender
            self._send(msg.sender, Granted(busy))
            return
        if msg.req_id in self.node.db.applied:
            self._send(msg.sender, AlreadyDone(msg.req_id, self.node.db.applied[msg.req_id]))
            return
        if msg.sender not in self.node.view.active:
            self._send(msg.sender, Rejected(msg.req_id, "not-member"))
            return
        if any(q.req_id == msg.req_id for q in self.locker.queue):
            return
        self.locker.queue.append(msg)
        self._grant_next()

    def _grant_next(self) -> None:
        while (self.locker.queue and self.locker.busy_with is None
               and not self.locker.frozen and self.is_locker()):
            req: LockReq = self.locker.queue.popleft()
            view = self.node.view
            if req.sender not in view.active:
                continue
            if req.req_id in self.node.db.applied:
                self._send(req.sender, AlreadyDone(req.req_id, self.node.db.applied[req.req_id]))
                continue
            update = GlobalUpdate(self.node.db.version + 1, req.sender, view.epoch,
                                  req.req_id, req.payload)
            self.locker.busy_with = update
            self._trace(update.gseq, "grant")
            self.node.apply_update(update)
            self._send(req.sender, Granted(update))

    def _on_unlock(self, src: int, msg: Unlock) -> None:
        busy = self.locker.busy_with
        if busy is not None and busy.gseq == msg.gseq and self.is_locker():
            self.locker.busy_with = None
            self._trace(msg.gseq, "unlock")
        self._send(src, UnlockAck(msg.gseq))
        self._grant_next()

    def freeze(self) -> None:
        self.locker.frozen = True

    def thaw(self) -> None:
        self.locker.frozen = False
        view = self.node.view
        if view is not None:
            self.locker.queue = deque(q for q in self.locker.queue if q.sender in view.active)
        self._grant_next()

    # -- propagation -------------------------------------------------------

    def _targets(self, update: GlobalUpdate, extra: tuple[int, ...]) -> list[int]:
        view = self.node.view
        members = set(view.active) | set(extra)
        locker = self.node.current_locker()
        if locker not in members:
            locker = min(members)
        return update_order(members, locker)

    def _on_granted(self, src: int, update: GlobalUpdate) -> None:
        req = self.pending.get(update.req_id)
        if req is None or (self.prop is not None and self.prop.update.gseq == update.gseq):
            return
        old = self.prop
        if old is not None and old.update.gseq < update.gseq:
            # the locker only grants again once the previous update is settled:
            # either our unlock landed or a regroup replay covered every survivor
            self.prop = None
            self._complete(old.update.req_id, True)
        elif old is not None:
            return
        order = self._targets(update, req.extra)
        remaining = [n for n in order if n != src]
        self.prop = _Propagation(update, remaining, req.extra)
        self._advance(self.prop)

    def _advance(self, prop: _Propagation) -> None:
        while prop.remaining:
            target = prop.remaining[0]
            if target == self.node.id:
                if self.node.db.version == prop.update.gseq - 1:
                    self._local_install(prop.update, prop.replay)
                if self.node.db.version >= prop.update.gseq:
                    prop.remaining.pop(0)
                    continue
                # local gap: cannot happen while single-flight holds; skip self
                prop.remaining.pop(0)
                continue
            prop.token = self._new_token()
            self.node.send(target, Install(prop.update, prop.replay))
            self.node.timer(self.node.cfg.rpc_timeout, ("glup", "rpc", prop.token))
            return
        if prop.replay:
            self.replaying = None
            if prop.on_done is not None:
                prop.on_done()
            return
        prop.unlocking = True
        prop.token = self._new_token()
        self._send(self.node.current_locker(), Unlock(prop.update.gseq, self.node.id))
        if self.prop is prop:
            self.node.timer(self.node.cfg.rpc_timeout, ("glup", "rpc", prop.token))

    def _active_prop(self, token: Optional[int] = None, gseq: Optional[int] = None):
        for prop in (self.prop, self.replaying):
            if prop is None:
                continue
            if token is not None and prop.token == token:
                return prop
            if gseq is not None and prop.update.gseq == gseq:
                return prop
        return None

    def _waiting_on(self, gseq: int, node: int) -> Optional[_Propagation]:
        # a locker may carry its own update and a regroup replay of the same gseq
        for prop in (self.replaying, self.prop):
            if (prop is not None and prop.update.gseq == gseq and not prop.unlocking
                    and prop.remaining and prop.remaining[0] == node):
                return prop
        return None

    def _on_install_ack(self, msg: InstallAck) -> None:
        prop = self._waiting_on(msg.gseq, msg.node)
        if prop is not None:
            prop.remaining.pop(0)
            self._advance(prop)

    def _on_install_nack(self, msg: InstallNack) -> None:
        prop = self._waiting_on(msg.gseq, msg.node)
        if prop is None:
            return
        if msg.reason == "gap":
            missing = self.node.db.updates_after(msg.version)
            if missing:
                fill = tuple(u for u in missing if u.gseq < msg.gseq)
                self.node.send(msg.node, CatchUp(fill))
                self.node.send(msg.node, Install(prop.update, prop.replay))
        # frozen or uncovered gap: the rpc timer retries

    def on_rpc_timeout(self, token: int) -> None:
        prop = self._active_prop(token=token)
        if prop is None:
            return
        view = self.node.view
        if prop.unlocking:
            if view is None:
                return
            prop.token = self._new_token()
            self._send(self.node.current_locker(), Unlock(prop.update.gseq, self.node.id))
            self.node.timer(self.node.cfg.rpc_timeout, ("glup", "rpc", prop.token))
            return
        if not prop.remaining:
            # a view change trimmed the last target while the rpc was out
            self._advance(prop)
            return
        target = prop.remaining[0]
        still = view is not None and (target in view.active or target in prop.extra)
        if not still:
            prop.remaining.pop(0)
            self._advance(prop)
            return
        prop.token = self._new_token()
        self.node.send(target, Install(prop.update, prop.replay))
        self.node.timer(self.node.cfg.rpc_timeout, ("glup", "rpc", prop.token))

    def _on_unlock_ack(self, msg: UnlockAck) -> None:
        prop = self.prop
        if prop is not None and prop.unlocking and prop.update.gseq == msg.gseq:
            self.prop = None
            self._complete(prop.update.req_id, True)

    def on_view_change(self, drop_extra: bool = False) -> None:
        """Trim propagation targets to the members of the newly installed view."""
        view = self.node.view
        for prop in (self.prop, self.replaying):
            if prop is None or view is None:
                continue
            if drop_extra:
                prop.extra = ()
            keep = set(view.active) | set(prop.extra)
            prop.remaining = [n for n in prop.remaining if n in keep]

    # -- receiver ----------------------------------------------------------

    def _local_install(self, update: GlobalUpdate, replay: bool) -> None:
        if self.node.apply_update(update):
            self._trace(update.gseq, "replay" if replay else "install")

    def _on_install(self, src: int, msg: Install) -> None:
        mode = self.node.install_mode()
        if mode == "ignore":
            return
        update = msg.update
        db = self.node.db
        if mode == "frozen" and not msg.replay and update.gseq > db.version:
            self._send(src, InstallNack(update.gseq, self.node.id, "frozen", db.version))
            return
        if update.gseq <= db.version:
            self._send(src, InstallAck(update.gseq, self.node.id))
            return
        if update.gseq != db.version + 1:
            self._send(src, InstallNack(update.gseq, self.node.id, "gap", db.version))
            return
        self._local_install(update, msg.replay)
        self._send(src, InstallAck(update.gseq, self.node.id))

    def _on_catch_up(self, msg: CatchUp) -> None:
        if self.node.install_mode() == "ignore":
            return
        for update in msg.updates:
            if update.gseq == self.node.db.version + 1:
                self._local_install(update, False)

    # -- locker takeover ---------------------------------------------------

    def replay_last(self, targets: Iterable[int], on_done: Callable[[], None]) -> None:
        """Re-propagate the last installed update to ``targets`` (in update
        order), then clear the in-flight slot."""
        last = self.node.db.last_update
        self.locker.busy_with = None
        if last is None:
            on_done()
            return
        order = update_order(set(targets) | {self.node.id}, self.node.id)
        self._trace(last.gseq, "replay")
        self.replaying = _Propagation(last, [n for n in order if n != self.node.id], (),
                                      replay=True, on_done=on_done)
        self._advance(self.replaying)

    # -- dispatch ----------------------------------------------------------

    def on_message(self, src: int, msg: Any) -> None:
        if isinstance(msg, LockReq):
            self._on_lock_req(msg)
        elif isinstance(msg, Granted):
            self._on_granted(src, msg.update)
        elif isinstance(msg, AlreadyDone):
            if self.prop is None or self.prop.update.req_id != msg.req_id:
                self._complete(msg.req_id, True)
        elif isinstance(msg, Rejected):
            self._complete(msg.req_id, False)
        elif isinstance(msg, Install):
            self._on_install(src, msg)
        elif isinstance(msg, InstallAck):
            self._on_install_ack(msg)
        elif isinstance(msg, InstallNack):
            self._on_install_nack(msg)
        elif isinstance(msg, CatchUp):
            self._on_catch_up(msg)
        elif isinstance(msg, Unlock):
            self._on_unlock(src, msg)
        elif isinstance(msg, UnlockAck):
            self._on_unlock_ack(msg)

    def on_timer(self, payload: tuple) -> None:
        if payload[1] == "rpc":
            self.on_rpc_timeout(payload[2])
        elif payload[1] == "retry":
            if self.pending:
                if self.node.is_member() and not self.node.in_regroup():
                    self.reissue_pending()
                self.node.timer(self.node.cfg.lock_retry, ("glup", "retry"))

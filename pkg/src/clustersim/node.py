"""One simulated cluster node: wires every per-node component to the kernel."""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, Callable, Iterable, Optional

from .clusterdb import DbState, DbWrite, GroupStatus, OwnerChange
from .config import SimConfig
from .glup import GLUP_MESSAGES, GlobalUpdate, GlupAgent, successor_locker
from .membership import (MEMBERSHIP_MESSAGES, TRANSITIONS, IllegalTransition, Membership,
                         MembershipView, NodePhase, ViewChange, external_state)
from .netmon import NODE_SILENT, Heartbeat, NetMonitor, UnknownSender
from .quorum import Arbiter, QBreakAck, QReleaseReply, QReserveReply
from .resmgr import ResourceManager
from .failover import FailoverManager
from .simkernel import Envelope, Kernel
from .support import EventLog, EventMsg, NodeClock, TimeService, TimeSync

if TYPE_CHECKING:
    from .cluster import Cluster

P = NodePhase
QUORUM_REPLIES = (QReserveReply, QBreakAck, QReleaseReply)


class ClusterNode:
    """Kernel endpoint for a node.

    State that lives on the node's local disk (database replica, event log,
    last installed epoch, hardware clock) survives crashes; everything else is
    rebuilt when the service restarts.
    """

    def __init__(self, nid: int, kernel: Kernel, cfg: SimConfig, cluster: "Cluster") -> None:
        self.id = nid
        self.kernel = kernel
        self.cfg = cfg
        self.cluster = cluster
        self.defined: tuple[int, ...] = tuple(cluster.defined)
        self.allowed: frozenset[int] = frozenset(cluster.allowed)
        self.credentials_ok = True
        self.device = cluster.device
        self.phase = P.OFFLINE
        self.view: Optional[MembershipView] = None
        self.db = DbState(cfg.checkpoint_every)
        self.boot_count = 0
        self.last_epoch = 0
        self.last_rgen = 0
        self.member_since: dict[int, int] = {}
        self.installed_epochs: list[int] = []
        self.netmon = NetMonitor(nid, kernel, cfg.heartbeat_period)
        self.arbiter = Arbiter(nid, kernel, cfg.defense_period, cfg.challenge_wait,
                               cfg.rpc_timeout)
        self.arbiter.on_lost = self._on_quorum_lost
        self.glup = GlupAgent(self)
        self.membership = Membership(self)
        self.resmgr = ResourceManager(self, cluster.resources, cluster.libraries)
        self.failover = FailoverManager(self, cluster.groups, cluster.resources)
        self.resmgr.escalate = self.failover.escalate
        self.events = EventLog(self)
        self.clock = NodeClock()
        self.time = TimeService(self, self.clock)
        self.applied_gseqs: list[int] = []
        kernel.add_endpoint(nid, self)

    # -- plumbing ------------------------------------------------------------

    def send(self, dst: int, msg: Any) -> None:
        self.kernel.send(self.id, dst, msg)

    def timer(self, delay: int, payload: Any) -> None:
        self.kernel.set_timer(self.id, delay, payload)

    def call_later(self, delay: int, fn: Callable[[], None]) -> None:
        self.kernel.set_timer(self.id, delay, ("call", fn))

    def set_phase(self, new: NodePhase) -> None:
        if new not in TRANSITIONS[self.phase]:
            raise IllegalTransition(f"{self.phase.value} -> {new.value}")
        self.phase = new
        self.kernel.record(self.id, "PHASE", new.value)

    @property
    def state(self) -> str:
        return external_state(self.phase)

    def is_member(self) -> bool:
        return self.phase in (P.ONLINE, P.PAUSED) and self.view is not None

    def in_regroup(self) -> bool:
        return self.membership.in_regroup()

    def install_mode(self) -> str:
        if self.phase in (P.ONLINE, P.PAUSED) and self.view is not None:
            return "frozen" if self.in_regroup() else "ok"
        if self.phase is P.JOINING and self.view is not None:
            return "ok"
        return "ignore"

    def current_locker(self) -> int:
        view = self.view
        departed = self.membership.departed
        if view.locker not in departed:
            return view.locker
        return successor_locker(view.active, view.locker, view.active - departed)

    # -- database ------------------------------------------------------------

    def apply_update(self, update: GlobalUpdate) -> bool:
        if update.gseq != self.db.version + 1:
            return False
        self.db.apply(update)
        self.applied_gseqs.append(update.gseq)
        if self.arbiter.is_owner:
            self.device.append_log(self.id, update)
        payload = update.payload
        if isinstance(payload, ViewChange):
            self.membership.apply_view_change(payload)
        elif isinstance(payload, (OwnerChange, GroupStatus)):
            self.failover.on_group_update(payload.gid)
        elif isinstance(payload, DbWrite) and payload.path.startswith("node/"):
            if self.is_member() and not self.in_regroup():
                self.failover.place()
        self.membership.on_update_installed()
        return True

    def write(self, path: str, value: str, on_done: Optional[Callable[[bool], None]] = None):
        return self.glup.begin_update(DbWrite(path, value), on_done=on_done)

    # -- views ---------------------------------------------------------------

    def install_view(self, view: MembershipView, reason: str) -> None:
        old = self.view
        self.view = view
        if not self.installed_epochs or self.installed_epochs[-1] != view.epoch:
            self.installed_epochs.append(view.epoch)
        self.last_epoch = max(self.last_epoch, view.epoch)
        self.last_rgen = max(self.last_rgen, view.rgen)
        now = self.kernel.now
        prev = set() if old is None else set(old.active)
        for n in view.active:
            if n not in prev or n not in self.member_since:
                self.member_since[n] = now
        for n in list(self.member_since):
            if n not in view.active:
                del self.member_since[n]
        if reason != "join-complete":
            ids = ",".join(str(n) for n in sorted(view.active))
            self.kernel.record(self.id, "VIEW",
                               f"epoch={view.epoch} active={ids} tb={view.tie_breaker} "
                               f"locker={view.locker} qowner={view.quorum_owner} reason={reason}")
        if self.netmon.running or self.is_member():
            self.netmon.set_peers(view.active, now)
        self.glup.on_view_change(drop_extra=True)
        if reason == "regroup":
            self.failover.record_pull()
        elif self.is_member() and reason in ("join", "leave"):
            for n in sorted(view.active - prev):
                self.failover.on_member_added(n, now)
            self.failover.place()

    def became_member(self) -> None:
        """Online (after form or join): start the member-only services."""
        self.netmon.set_peers(self.view.active, self.kernel.now)
        self.netmon.start()
        self.timer(self.cfg.time_sync_period, ("time",))
        self.failover.place()

    def after_regroup(self) -> None:
        self.failover.place()

    # -- lifecycle -----------------------------------------------------------

    def stop_services(self) -> None:
        self.kernel.reset_timers(self.id)
        self._teardown()

    def _teardown(self) -> None:
        self.netmon.reset()
        self.arbiter.reset()
        self.glup.reset()
        self.membership.reset()
        self.resmgr.reset()
        self.failover.reset()

    def on_crash(self) -> None:
        self._teardown()
        self.phase = P.OFFLINE
        self.view = None

    def on_revive(self) -> None:
        self.phase = P.OFFLINE
        self.membership.start_node()

    def _on_quorum_lost(self) -> None:
        if self.is_member():
            self.membership.halt("lost-quorum")

    # -- admin ---------------------------------------------------------------

    def pause(self) -> None:
        if self.phase is not P.ONLINE:
            raise IllegalTransition(f"pause from {self.phase.value}")
        self.set_phase(P.PAUSED)
        self.write(f"node/{self.id}/paused", "1")

    def resume(self) -> None:
        if self.phase is not P.PAUSED:
            raise IllegalTransition(f"resume from {self.phase.value}")
        self.set_phase(P.ONLINE)
        self.write(f"node/{self.id}/paused", "0")

    # -- dispatch ------------------------------------------------------------

    def on_message(self, env: Envelope) -> None:
        msg = env.msg
        src = env.src
        if isinstance(msg, Heartbeat):
            if not self.netmon.running and self.phase is not P.JOINING:
                return
            try:
                self.netmon.on_heartbeat(msg, self.kernel.now)
            except UnknownSender:
                return
            if msg.sender in self.membership.sponsoring:
                self.membership.on_first_heartbeat(msg.sender)
        elif isinstance(msg, QUORUM_REPLIES):
            self.arbiter.on_message(msg)
        elif isinstance(msg, GLUP_MESSAGES):
            self.glup.on_message(src, msg)
        elif isinstance(msg, MEMBERSHIP_MESSAGES):
            self.membership.on_message(src, msg)
        elif isinstance(msg, EventMsg):
            self.events.on_event(src, msg)
        elif isinstance(msg, TimeSync):
            self.time.on_sync(src, msg)

    def on_timer(self, payload: Any) -> None:
        tag = payload[0]
        if tag == "call":
            payload[1]()
        elif tag == "netmon":
            self._on_netmon_timer(payload[1])
        elif tag == "quorum":
            self.arbiter.on_timer(payload[1])
        elif tag == "glup":
            self.glup.on_timer(payload)
        elif tag == "member":
            self.membership.on_timer(payload)
        elif tag == "time":
            self.time.tick()
            self.timer(self.cfg.time_sync_period, ("time",))

    def _on_netmon_timer(self, kind: str) -> None:
        nm = self.netmon
        if not nm.running:
            return
        now = self.kernel.now
        if kind == "hb":
            nm.tick_heartbeats(now)
            self.timer(nm.period, ("netmon", "hb"))
        elif kind == "check":
            suspicions = nm.check_suspicions(now)
            self.timer(max(1, nm.period // 2), ("netmon", "check"))
            for s in suspicions:
                if s.kind == NODE_SILENT:
                    self.membership.on_suspicion(s.about)

    # -- queries -------------------------------------------------------------

    def view_key(self) -> Optional[tuple]:
        return None if self.view is None else self.view.key()

    def summary(self) -> str:
        v = "-" if self.view is None else self.view.describe()
        return f"node {self.id} {self.state} phase={self.phase.value} {v} db={self.db.version}"

    def peers(self) -> Iterable[int]:
        return () if self.view is None else sorted(self.view.active - {self.id})

"""Node lifecycle, sponsored join, form, clean leave and six-stage regroup."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Optional

from .clusterdb import QuorumUnreadable, SyncFailed, SyncPayload
from .glup import successor_locker

if TYPE_CHECKING:
    from .node import ClusterNode


class IllegalTransition(Exception):
    pass


class JoinAborted(Exception):
    pass


class FormFailed(Exception):
    pass


class NodePhase(str, Enum):
    OFFLINE = "Offline"
    INITIALIZING = "Initializing"
    MEMBER_SEARCH = "MemberSearch"
    JOINING = "Joining"
    QUORUM_DISK_SEARCH = "QuorumDiskSearch"
    FORMING = "Forming"
    ONLINE = "Online"
    PAUSED = "Paused"
    EXITING = "Exiting"
    RUNDOWN_COMPLETE = "RundownComplete"


P = NodePhase

# Arcs of the membership state diagram.  Online/Paused -> Offline is the
# regroup halt; crashes bypass the table entirely.
TRANSITIONS: dict[NodePhase, frozenset[NodePhase]] = {
    P.OFFLINE: frozenset({P.INITIALIZING}),
    P.INITIALIZING: frozenset({P.MEMBER_SEARCH, P.OFFLINE}),
    P.MEMBER_SEARCH: frozenset({P.JOINING, P.QUORUM_DISK_SEARCH, P.OFFLINE}),
    P.JOINING: frozenset({P.ONLINE, P.OFFLINE}),
    P.QUORUM_DISK_SEARCH: frozenset({P.FORMING, P.OFFLINE}),
    P.FORMING: frozenset({P.ONLINE, P.OFFLINE}),
    P.ONLINE: frozenset({P.PAUSED, P.EXITING, P.OFFLINE}),
    P.PAUSED: frozenset({P.ONLINE, P.EXITING, P.OFFLINE}),
    P.EXITING: frozenset({P.RUNDOWN_COMPLETE}),
    P.RUNDOWN_COMPLETE: frozenset({P.OFFLINE}),
}

EXTERNAL = {P.OFFLINE: "Offline", P.ONLINE: "Online", P.PAUSED: "Paused"}


def external_state(phase: NodePhase) -> str:
    """Map an internal phase to the externally visible Offline/Online/Paused."""
    return EXTERNAL.get(phase, "Offline")


@dataclass(frozen=True)
class MembershipView:
    epoch: int
    original: frozenset[int]
    active: frozenset[int]
    tie_breaker: int
    locker: int
    quorum_owner: int
    rgen: int = 0

    def key(self) -> tuple:
        return (self.epoch, tuple(sorted(self.active)), self.tie_breaker, self.locker)

    def describe(self) -> str:
        ids = ",".join(str(n) for n in sorted(self.active))
        return (f"epoch={self.epoch} active={ids} tb={self.tie_breaker} "
                f"locker={self.locker} qowner={self.quorum_owner}")


def survives(original: Iterable[int], candidate: Iterable[int],
             tie_breaker: int, prev_quorum_owner: int) -> bool:
    """Partition survival: any one of the three rules suffices."""
    orig = frozenset(original)
    cand = frozenset(candidate)
    if not cand or not cand <= orig:
        raise ValueError("candidate set must be a nonempty subset of the original")
    n, c = len(orig), len(cand)
    if 2 * c > n:
        return True
    if 2 * c == n and c >= 2 and tie_breaker in cand:
        return True
    if n == 2 and c == 1 and prev_quorum_owner in cand:
        return True
    return False


def prune(candidates: Iterable[int], rows: Mapping[int, Optional[frozenset[int]]],
          coordinator: int) -> frozenset[int]:
    """Drop members until every kept node reports every other kept node reachable.

    Repeatedly removes the node involved in the most unreachable reports
    (highest id on ties); the coordinator is never removed.
    """
    keep = set(candidates)

    def sees(a: int, b: int) -> bool:
        row = rows.get(a)
        return row is None or b in row

    while True:
        blame: dict[int, int] = {}
        for a in keep:
            for b in keep:
                if a != b and not sees(a, b):
                    blame[a] = blame.get(a, 0) + 1
                    blame[b] = blame.get(b, 0) + 1
        blame.pop(coordinator, None)
        if not blame:
            return frozenset(keep)
        worst = max(blame, key=lambda n: (blame[n], n))
        keep.discard(worst)


@dataclass(frozen=True)
class ViewChange:
    """Reserved GLUP payload kind: add or remove one node from the view."""

    kind: str  # "join" | "leave"
    node: int
    rgen: int

    def apply_entries(self, entries: dict[str, str]) -> None:
        return None


# -- messages --------------------------------------------------------------


@dataclass(frozen=True)
class Discover:
    src: int


@dataclass(frozen=True)
class DiscoverReply:
    src: int
    active: bool


@dataclass(frozen=True)
class JoinRequest:
    applicant: int
    credentials_ok: bool
    version: int
    chain: str


@dataclass(frozen=True)
class JoinReject:
    applicant: int
    reason: str


@dataclass(frozen=True)
class JoinSync:
    applicant: int
    sync: SyncPayload
    view: MembershipView


@dataclass(frozen=True)
class JoinSyncAck:
    applicant: int
    ok: bool


@dataclass(frozen=True)
class JoinAck:
    applicant: int
    view: MembershipView


@dataclass(frozen=True)
class JoinAbort:
    applicant: int
    reason: str


@dataclass(frozen=True)
class ClusterExit:
    node: int
    rgen: int


@dataclass(frozen=True)
class Announcement:
    coordinator: int
    rgen: int
    round: int
    keep: frozenset[int]
    new_view: Optional[MembershipView]
    target_gseq: int


@dataclass(frozen=True)
class RegroupStatus:
    src: int
    rgen: int
    round: int
    finished: int
    view: MembershipView
    gseq: int
    row: frozenset[int]
    holds_quorum: bool
    announce: Optional[Announcement] = None


MEMBERSHIP_MESSAGES = (Discover, DiscoverReply, JoinRequest, JoinReject, JoinSync,
                       JoinSyncAck, JoinAck, JoinAbort, ClusterExit, RegroupStatus)

STAGES = {1: "Activate", 2: "Closing", 3: "Pruning", 4: "CleanupOne",
          5: "CleanupTwo", 6: "Stabilized"}


@dataclass
class RegroupState:
    rgen: int
    round: int = 0
    stage: int = 1
    finished: int = 0
    statuses: dict[int, RegroupStatus] = field(default_factory=dict)
    connectivity: dict[int, Optional[frozenset[int]]] = field(default_factory=dict)
    candidate_set: Optional[frozenset[int]] = None
    restart_count: int = 0
    ticked: bool = False
    activate_expired: bool = False
    announce: Optional[Announcement] = None
    installed: bool = False
    replay_done: bool = False
    replay_started: bool = False
    arbitrating: bool = False
    arb_attempts: int = 0
    token: int = 0


@dataclass
class _JoinCtx:
    applicant: int
    phase: int
    token: int
    req_id: Any = None


class Membership:
    """Membership protocol driver for one node."""

    def __init__(self, node: "ClusterNode") -> None:
        self.node = node
        self.rg: Optional[RegroupState] = None
        self.last_final: Optional[RegroupStatus] = None
        self.sponsoring: dict[int, _JoinCtx] = {}
        self.responders: set[int] = set()
        self.sponsor: Optional[int] = None
        self.departed: set[int] = set()
        self._token = 0
        self.restart_pending = False

    @property
    def k(self):
        return self.node.kernel

    @property
    def cfg(self):
        return self.node.cfg

    def _tok(self) -> int:
        self._token += 1
        return self._token

    def reset(self) -> None:
        self.rg = None
        self.last_final = None
        self.sponsoring.clear()
        self.responders.clear()
        self.sponsor = None
        self.departed.clear()
        self.restart_pending = False

    # -- start / search ----------------------------------------------------

    def start_node(self) -> None:
        node = self.node
        if node.phase is not P.OFFLINE:
            raise IllegalTransition(f"start_node from {node.phase.value}")
        self.restart_pending = False
        node.boot_count += 1
        node.set_phase(P.INITIALIZING)
        node.resmgr.bring_local_online()
        node.set_phase(P.MEMBER_SEARCH)
        self.responders.clear()
        for peer in node.defined:
            if peer != node.id:
                node.send(peer, Discover(node.id))
        node.timer(self.cfg.member_search_timeout, ("member", "search-timeout", node.boot_count))

    def _on_search_timeout(self, boot: int) -> None:
        node = self.node
        if node.phase is not P.MEMBER_SEARCH or boot != node.boot_count:
            return
        if self.responders:
            self.sponsor = min(self.responders)
            node.set_phase(P.JOINING)
            self.k.record(node.id, "JOIN", f"applicant={node.id} sponsor={self.sponsor} phase=request")
            node.send(self.sponsor, JoinRequest(node.id, node.credentials_ok,
                                                node.db.version, node.db.chain))
            self._arm_applicant()
        else:
            node.set_phase(P.QUORUM_DISK_SEARCH)
            node.arbiter.arbitrate(self._on_form_arbitration)

    def _arm_applicant(self) -> None:
        self.node.timer(self.cfg.join_phase_timeout,
                        ("member", "applicant-timeout", self._applicant_token()))

    def _applicant_token(self) -> int:
        self._app_token = self._tok()
        return self._app_token

    # -- form --------------------------------------------------------------

    def _on_form_arbitration(self, won: bool) -> None:
        node = self.node
        if node.phase is not P.QUORUM_DISK_SEARCH:
            return
        if not won:
            self.k.record(node.id, "FORM", "result=failed reason=arbitration-lost")
            self._fail_to_offline()
            return
        node.set_phase(P.FORMING)
        try:
            self.form_cluster()
        except FormFailed as exc:
            self.k.record(node.id, "FORM", f"result=failed reason={exc}")
            node.arbiter.reset()
            self._fail_to_offline()

    def form_cluster(self) -> None:
        node = self.node
        try:
            restored = node.device.master.replay()
        except QuorumUnreadable as exc:
            raise FormFailed("quorum-unreadable") from exc
        node.db.restore(restored.entries, restored.version, restored.chain, restored.applied)
        me = node.id
        epoch = node.last_epoch + 1
        view = MembershipView(epoch, frozenset({me}), frozenset({me}), me, me, me,
                              rgen=node.last_rgen + 1)
        node.set_phase(P.ONLINE)
        self.k.record(me, "FORM", f"result=ok epoch={epoch}")
        node.install_view(view, reason="form")
        node.became_member()

    def _fail_to_offline(self) -> None:
        node = self.node
        node.set_phase(P.OFFLINE)
        self.schedule_restart()

    def schedule_restart(self) -> None:
        if self.cfg.auto_restart and not self.restart_pending:
            self.restart_pending = True
            self.node.timer(self.cfg.restart_delay, ("member", "restart", self.node.boot_count))

    def _on_restart(self, boot: int) -> None:
        if self.node.phase is P.OFFLINE and boot == self.node.boot_count:
            self.start_node()

    # -- join: applicant side ----------------------------------------------

    def _on_discover(self, src: int) -> None:
        if self.node.is_member():
            self.node.send(src, DiscoverReply(self.node.id, True))

    def _on_discover_reply(self, msg: DiscoverReply) -> None:
        if self.node.phase is P.MEMBER_SEARCH and msg.active:
            self.responders.add(msg.src)

    def _join_fails(self, reason: str) -> None:
        node = self.node
        if node.phase is not P.JOINING:
            return
        self.k.record(node.id, "JOIN", f"applicant={node.id} result=failed reason={reason}")
        node.stop_services()
        node.view = None
        self.sponsor = None
        self._fail_to_offline()

    def _on_join_sync(self, src: int, msg: JoinSync) -> None:
        node = self.node
        if node.phase is not P.JOINING or src != self.sponsor:
            return
        try:
            node.db.install_sync(msg.sync)
        except SyncFailed:
            node.send(src, JoinSyncAck(node.id, False))
            self._join_fails("sync-failed")
            return
        node.view = msg.view
        self.k.record(node.id, "SYNC", f"mode={msg.sync.mode} entries={msg.sync.size} "
                                       f"version={node.db.version}")
        node.send(src, JoinSyncAck(node.id, True))
        self._arm_applicant()

    def applicant_view_installed(self) -> None:
        """Called once the join update made this applicant part of its view."""
        node = self.node
        node.netmon.set_peers(node.view.active, self.k.now)
        node.netmon.start()
        self._arm_applicant()

    def _on_join_ack(self, src: int, msg: JoinAck) -> None:
        node = self.node
        if node.phase is not P.JOINING or src != self.sponsor:
            return
        if node.view is None or node.id not in node.view.active:
            self._join_fails("not-in-view")
            return
        node.set_phase(P.ONLINE)
        self.k.record(node.id, "JOIN", f"applicant={node.id} sponsor={src} result=ok "
                                       f"epoch={node.view.epoch}")
        node.install_view(node.view, reason="join-complete")
        node.became_member()

    # -- join: sponsor side ------------------------------------------------

    def _on_join_request(self, src: int, msg: JoinRequest) -> None:
        node = self.node
        x = msg.applicant
        if not node.is_member() or self.rg is not None:
            node.send(x, JoinReject(x, "busy"))
            return
        if x in self.sponsoring:
            return
        self.k.record(node.id, "JOIN", f"applicant={x} phase=1")
        if x not in node.defined or not msg.credentials_ok or x not in node.allowed:
            self.k.record(node.id, "JOIN", f"applicant={x} result=rejected reason=not-defined")
            node.send(x, JoinReject(x, "not-defined"))
            return
        if x in node.view.active:
            node.send(x, JoinReject(x, "still-member"))
            return
        ctx = _JoinCtx(x, 2, self._tok())
        self.sponsoring[x] = ctx
        self.k.record(node.id, "JOIN", f"applicant={x} phase=2")
        sync = node.db.sync_for(msg.version, msg.chain)
        node.send(x, JoinSync(x, sync, node.view))
        self._arm_sponsor(ctx)

    def _arm_sponsor(self, ctx: _JoinCtx) -> None:
        ctx.token = self._tok()
        self.node.timer(self.cfg.join_phase_timeout,
                        ("member", "sponsor-timeout", ctx.applicant, ctx.token))

    def _on_join_sync_ack(self, msg: JoinSyncAck) -> None:
        ctx = self.sponsoring.get(msg.applicant)
        if ctx is None or ctx.phase != 2:
            return
        if not msg.ok:
            self._abort_join(ctx, "sync-failed")
            return
        node = self.node
        ctx.phase = 3
        self.k.record(node.id, "JOIN", f"applicant={ctx.applicant} phase=3")
        payload = ViewChange("join", ctx.applicant, node.view.rgen)
        ctx.req_id = node.glup.begin_update(
            payload, extra=(ctx.applicant,),
            on_done=lambda ok, c=ctx: self._join_broadcast_done(c, ok))
        self._arm_sponsor(ctx)

    def _join_broadcast_done(self, attempt, ok: bool) -> None:
        x = attempt.applicant
        ctx = self.sponsoring.get(x)
        node = self.node
        if ctx is not attempt or ctx.phase != 3:
            # a request left over from an aborted attempt for the same applicant
            return
        if not ok or node.view is None or x not in node.view.active:
            self._abort_join(ctx, "broadcast-failed")
            return
        ctx.phase = 4
        self.k.record(node.id, "JOIN", f"applicant={x} phase=4")
        self._arm_sponsor(ctx)
        if node.netmon.peers.get(x) is not None and node.netmon.peers[x].last_hb_seq >= 0:
            self.on_first_heartbeat(x)

    def on_first_heartbeat(self, x: int) -> None:
        ctx = self.sponsoring.get(x)
        if ctx is None or ctx.phase != 4:
            return
        node = self.node
        ctx.phase = 5
        self.k.record(node.id, "JOIN", f"applicant={x} phase=5")
        del self.sponsoring[x]
        node.send(x, JoinAck(x, node.view))
        node.events.log_event(f"node {x} joined epoch={node.view.epoch}")

    def _abort_join(self, ctx: _JoinCtx, reason: str) -> None:
        node = self.node
        self.sponsoring.pop(ctx.applicant, None)
        self.k.record(node.id, "JOIN", f"applicant={ctx.applicant} result=aborted reason={reason}")
        node.send(ctx.applicant, JoinAbort(ctx.applicant, reason))
        if (node.is_member() and self.rg is None and node.view is not None
                and ctx.applicant in node.view.active):
            node.glup.begin_update(ViewChange("leave", ctx.applicant, node.view.rgen))

    def abort_all_joins(self, reason: str) -> None:
        for ctx in list(self.sponsoring.values()):
            self._abort_join(ctx, reason)

    # -- view-change payload -------------------------------------------------

    def apply_view_change(self, change: ViewChange) -> None:
        node = self.node
        view = node.view
        if view is None or change.rgen != view.rgen:
            return
        if change.kind == "join":
            if change.node in view.active:
                return
            active = view.active | {change.node}
            new = replace(view, epoch=view.epoch + 1, active=active, original=active)
            node.install_view(new, reason="join")
            if change.node == node.id and node.phase is P.JOINING:
                self.applicant_view_installed()
        else:
            if change.node not in view.active or len(view.active) == 1:
                return
            active = view.active - {change.node}
            locker = view.locker
            if locker == change.node:
                locker = successor_locker(view.active, view.locker, active)
            tb = view.tie_breaker if view.tie_breaker in active else min(active)
            qowner = view.quorum_owner if view.quorum_owner in active else min(active)
            new = replace(view, epoch=view.epoch + 1, active=active, original=active,
                          tie_breaker=tb, locker=locker, quorum_owner=qowner)
            self.departed.discard(change.node)
            if change.node == node.id:
                if node.is_member():
                    self.halt("evicted", restart=False)
                return
            node.install_view(new, reason="leave")
            if qowner == node.id and not node.arbiter.is_owner:
                node.arbiter.arbitrate(self._on_leave_arbitration)

    def _on_leave_arbitration(self, won: bool) -> None:
        if not won and self.node.is_member():
            self.halt("lost-quorum")

    # -- clean leave ---------------------------------------------------------

    def leave_cluster(self) -> None:
        node = self.node
        if node.phase not in (P.ONLINE, P.PAUSED):
            raise IllegalTransition(f"leave from {node.phase.value}")
        view = node.view
        node.set_phase(P.EXITING)
        self.k.record(node.id, "LEAVE", f"epoch={view.epoch}")
        for peer in sorted(view.active - {node.id}):
            node.send(peer, ClusterExit(node.id, view.rgen))
        node.resmgr.force_all_offline()
        if node.arbiter.is_owner:
            node.arbiter.release()
        node.set_phase(P.RUNDOWN_COMPLETE)
        node.stop_services()
        node.view = None
        node.set_phase(P.OFFLINE)

    def _on_cluster_exit(self, msg: ClusterExit) -> None:
        node = self.node
        view = node.view
        if not node.is_member() or view is None or self.rg is not None:
            return
        if msg.node not in view.active or msg.rgen != view.rgen or msg.node in self.departed:
            return
        self.departed.add(msg.node)
        survivors = view.active - self.departed
        glup = node.glup
        busy = glup.locker.busy_with
        if view.locker == node.id and busy is not None and busy.sender == msg.node:
            glup.replay_last(survivors - {node.id}, lambda: glup._grant_next())
        elif view.locker == msg.node and node.current_locker() == node.id:
            glup.replay_last(survivors - {node.id}, lambda: glup._grant_next())
        glup.reissue_pending()
        glup.begin_update(ViewChange("leave", msg.node, view.rgen))

    # -- halt ----------------------------------------------------------------

    def halt(self, reason: str, restart: bool = True) -> None:
        node = self.node
        self.k.record(node.id, "HALT", f"reason={reason}")
        if node.phase in (P.ONLINE, P.PAUSED):
            node.set_phase(P.OFFLINE)
        else:
            node.phase = P.OFFLINE
        node.stop_services()
        node.view = None
        if restart:
            self.schedule_restart()

    # -- regroup -------------------------------------------------------------

    def in_regroup(self) -> bool:
        return self.rg is not None

    def on_suspicion(self, about: int) -> None:
        node = self.node
        if node.is_member() and node.view is not None and about in node.view.active:
            self.enter_regroup()

    def enter_regroup(self, round: int = 0) -> None:
        node = self.node
        if self.rg is not None or not node.is_member():
            return
        self.rg = RegroupState(rgen=node.view.rgen, round=round)
        node.glup.freeze()
        self.abort_all_joins("regroup")
        self._begin_stage1()
        node.timer(self.cfg.regroup_status_period, ("member", "rg-status", self.rg.rgen))

    def _begin_stage1(self) -> None:
        rg = self.rg
        rg.stage, rg.finished = 1, 0
        rg.statuses.clear()
        rg.connectivity.clear()
        rg.candidate_set = None
        rg.ticked = rg.activate_expired = False
        rg.announce = None
        rg.arbitrating = False
        rg.token = self._tok()
        self.k.record(self.node.id, "REGROUP", f"stage=1 round={rg.round}")
        self.node.timer(1, ("member", "rg-tick", rg.token))
        self.node.timer(self.cfg.stage_timeout, ("member", "rg-timeout", rg.token, 1))

    def _status(self, finished: Optional[int] = None) -> RegroupStatus:
        node = self.node
        rg = self.rg
        row = node.netmon.connectivity_snapshot() or frozenset({node.id})
        return RegroupStatus(node.id, rg.rgen, rg.round,
                             rg.finished if finished is None else finished,
                             node.view, node.db.version, row, node.arbiter.is_owner,
                             rg.announce)

    def _targets(self) -> list[int]:
        node = self.node
        peers = set(node.view.active)
        if self.rg is not None and self.rg.announce is not None:
            peers |= self.rg.announce.keep
        peers.discard(node.id)
        return sorted(peers)

    def _broadcast(self) -> None:
        st = self._status()
        self.rg.statuses[self.node.id] = st
        for peer in self._targets():
            self.node.send(peer, st)

    def _on_status(self, src: int, st: RegroupStatus) -> None:
        node = self.node
        if not node.is_member() or node.view is None:
            return
        if src not in node.view.active and node.id not in st.view.active:
            return
        rg = self.rg
        key = rg.rgen if rg is not None else node.view.rgen
        if st.rgen < key:
            if self.last_final is not None and self.last_final.rgen == st.rgen:
                node.send(src, self.last_final)
            return
        if st.rgen > key:
            if node.id not in st.view.active or st.view.rgen > key + 1:
                self.halt("pruned")
            return
        if st.announce is not None and st.finished >= 6 and node.id not in st.announce.keep:
            self.halt("pruned")
            return
        if rg is None:
            if st.finished >= 6:
                return
            self.enter_regroup(round=st.round)
            rg = self.rg
            if rg is None:
                return
        if st.round > rg.round:
            if rg.installed:
                return
            rg.round = st.round
            rg.restart_count += 1
            self._begin_stage1()
        elif st.round < rg.round:
            node.send(src, self._status())
            return
        if st.finished >= 6:
            rg.statuses[src] = st
        else:
            rg.statuses[src] = st
        rg.connectivity[src] = st.row
        if st.announce is not None and rg.announce is None and rg.stage == 2:
            self._accept_announcement(st.announce)
            if self.rg is None:
                return
        self._progress()

    def _reported(self, nodes: Iterable[int], stage: int) -> bool:
        rg = self.rg
        for n in nodes:
            if n == self.node.id:
                continue
            st = rg.statuses.get(n)
            if st is None or st.finished < stage:
                return False
            if stage >= 2 and rg.announce is not None:
                if st.announce is None or (st.announce.coordinator, st.announce.round) != (
                        rg.announce.coordinator, rg.announce.round):
                    return False
        return True

    def _finish_stage(self, stage: int) -> None:
        rg = self.rg
        rg.finished = stage
        rg.stage = stage + 1
        rg.token = self._tok()
        if stage + 1 <= 6:
            self.k.record(self.node.id, "REGROUP", f"stage={stage + 1} round={rg.round}")
        self._broadcast()
        self.node.timer(self.cfg.stage_timeout, ("member", "rg-timeout", rg.token, stage + 1))

    def _progress(self) -> None:
        # loop because finishing one stage may immediately satisfy the next
        while self.rg is not None:
            rg = self.rg
            before = (rg.stage, rg.finished, rg.installed)
            self._progress_once()
            if self.rg is None or self.rg is not rg:
                return
            if (rg.stage, rg.finished, rg.installed) == before:
                return

    def _progress_once(self) -> None:
        node = self.node
        rg = self.rg
        if rg.stage == 1:
            if not rg.ticked:
                return
            others = set(node.view.active) - {node.id}
            heard = {n for n in others if n in rg.statuses}
            if heard == others or rg.activate_expired:
                rg.candidate_set = frozenset(heard | {node.id})
                self._finish_stage(1)
            return
        if rg.stage == 2:
            if rg.announce is not None:
                return
            if not self._reported(rg.candidate_set, 1):
                return
            if rg.arbitrating:
                return
            self._closing()
            return
        keep = rg.announce.keep
        if rg.stage == 3:
            if self._reported(keep, 2):
                self._finish_stage(3)
            return
        if rg.stage == 4:
            if not self._reported(keep, 3):
                return
            self._cleanup_one()
            return
        if rg.stage == 5:
            if self._reported(keep, 4):
                self._finish_stage(5)
            return
        if rg.stage == 6:
            if self._reported(keep, 5):
                self._stabilize()

    def _original(self) -> MembershipView:
        rg = self.rg
        views = [self.node.view] + [rg.statuses[n].view for n in rg.candidate_set
                                    if n in rg.statuses]
        return max(views, key=lambda v: (v.epoch, sorted(v.active)))

    def _closing(self) -> None:
        node = self.node
        rg = self.rg
        original = self._original()
        cand = frozenset(rg.candidate_set & original.active)
        if node.id not in cand or not survives(original.active, cand,
                                               original.tie_breaker, original.quorum_owner):
            self.halt("lost-partition")
            return
        coordinator = min(cand)
        if coordinator != node.id:
            # wait for the announcement; it may already be buffered
            for st in rg.statuses.values():
                if st.announce is not None:
                    self._accept_announcement(st.announce)
                    return
            return
        rows = {n: rg.connectivity.get(n) for n in cand}
        rows[node.id] = node.netmon.connectivity_snapshot()
        keep = prune(cand, rows, node.id)
        if not survives(original.active, keep, original.tie_breaker, original.quorum_owner):
            self._announce(Announcement(node.id, rg.rgen, rg.round, frozenset(), None, 0))
            return
        holders = sorted(n for n in keep if n == node.id and node.arbiter.is_owner
                         or n in rg.statuses and rg.statuses[n].holds_quorum)
        if original.quorum_owner in keep:
            self._finish_closing(original, keep, original.quorum_owner)
        elif holders:
            self._finish_closing(original, keep, holders[0])
        else:
            rg.arbitrating = True
            token = rg.token
            node.arbiter.arbitrate(lambda won: self._closing_arbitrated(token, original, keep, won))

    def _closing_arbitrated(self, token: int, original: MembershipView,
                            keep: frozenset[int], won: bool) -> None:
        rg = self.rg
        if rg is None or rg.token != token:
            return
        rg.arbitrating = False
        rg.arb_attempts += 1
        if won:
            self._finish_closing(original, keep, self.node.id)
        elif rg.arb_attempts >= self.cfg.arbitration_attempts:
            # someone outside this partition holds the device: tell the rest, then stop
            rg.announce = Announcement(self.node.id, rg.rgen, rg.round, frozenset(), None, 0)
            for peer in sorted(rg.candidate_set - {self.node.id}):
                self.node.send(peer, self._status())
            self.halt("lost-quorum")
        else:
            rg.arbitrating = True
            self.node.timer(self.cfg.arbitration_retry,
                            ("member", "rg-arb-retry", token, original, keep))

    def _finish_closing(self, original: MembershipView, keep: frozenset[int], qowner: int) -> None:
        rg = self.rg
        node = self.node
        locker = successor_locker(original.active, original.locker, keep)
        gseqs = [node.db.version] + [rg.statuses[n].gseq for n in keep if n in rg.statuses]
        new_view = MembershipView(
            epoch=original.epoch + 1, original=keep, active=keep, tie_breaker=min(keep),
            locker=locker, quorum_owner=qowner, rgen=rg.rgen + 1)
        self._announce(Announcement(node.id, rg.rgen, rg.round, keep, new_view, max(gseqs)))

    def _announce(self, ann: Announcement) -> None:
        rg = self.rg
        rg.announce = ann
        for peer in sorted(rg.candidate_set - {self.node.id}):
            self.node.send(peer, self._status())
        self._accept_announcement(ann)

    def _accept_announcement(self, ann: Announcement) -> None:
        node = self.node
        rg = self.rg
        if ann.rgen != rg.rgen or ann.round != rg.round or rg.stage != 2:
            return
        if rg.candidate_set is None:
            return
        original = self._original()
        cand = frozenset(rg.candidate_set & original.active)
        if not cand or ann.coordinator != min(cand):
            return
        if node.id not in ann.keep:
            self.halt("pruned" if ann.keep else "lost-partition")
            return
        rg.announce = ann
        self._finish_stage(2)

    def _cleanup_one(self) -> None:
        node = self.node
        rg = self.rg
        ann = rg.announce
        if rg.installed:
            if ann.new_view.locker != node.id or rg.replay_done:
                self._finish_stage(4)
            return
        if ann.new_view.locker == node.id and not rg.replay_started:
            rg.replay_started = True
            token = rg.token
            node.glup.replay_last(ann.keep - {node.id}, lambda: self._replay_done(token))
            # the replay may finish synchronously and carry the regroup further
            if self.rg is not rg or rg.installed:
                return
        if node.db.version < ann.target_gseq:
            return
        self._install_regroup_view()
        if self.rg is not rg:
            return
        if ann.new_view.locker != node.id or rg.replay_done:
            self._finish_stage(4)

    def _replay_done(self, token: int) -> None:
        rg = self.rg
        if rg is None or rg.token != token:
            return
        rg.replay_done = True
        self._progress()

    def on_update_installed(self) -> None:
        if self.rg is not None and self.rg.stage == 4:
            self._progress()

    def _install_regroup_view(self) -> None:
        node = self.node
        rg = self.rg
        ann = rg.announce
        old = node.view
        rg.installed = True
        node.install_view(ann.new_view, reason="regroup")
        departed = sorted(old.active - ann.keep)
        if ann.coordinator == node.id:
            if ann.new_view.quorum_owner == node.id and node.arbiter.is_owner:
                node.device.rewrite_master(node.id, node.db)
            for n in departed:
                node.events.log_event(f"node {n} failed epoch={ann.new_view.epoch}")

    def _stabilize(self) -> None:
        node = self.node
        rg = self.rg
        self.k.record(node.id, "REGROUP", f"stage=6 round={rg.round} result=stabilized")
        final = self._status(finished=6)
        self.last_final = final
        self.rg = None
        node.glup.thaw()
        node.glup.reissue_pending()
        node.after_regroup()
        suspects = [p for p in node.view.active if node.netmon.is_suspected(p)]
        if suspects:
            self.enter_regroup()

    def _restart_round(self) -> None:
        rg = self.rg
        rg.restart_count += 1
        if rg.restart_count > self.cfg.max_regroup_restarts:
            self.halt("lost-partition")
            return
        rg.round += 1
        rg.replay_started = rg.replay_done = False
        self._begin_stage1()
        self._broadcast()

    def on_timer(self, payload: tuple) -> None:
        kind = payload[1]
        if kind == "search-timeout":
            self._on_search_timeout(payload[2])
        elif kind == "restart":
            self.restart_pending = False
            self._on_restart(payload[2])
        elif kind == "applicant-timeout":
            if payload[2] == getattr(self, "_app_token", None):
                self._join_fails("timeout")
        elif kind == "sponsor-timeout":
            ctx = self.sponsoring.get(payload[2])
            if ctx is not None and ctx.token == payload[3]:
                self._abort_join(ctx, f"timeout-phase{ctx.phase}")
        elif kind == "rg-tick":
            rg = self.rg
            if rg is not None and rg.token == payload[2]:
                rg.ticked = True
                self._broadcast()
                self.node.timer(self.cfg.activate_wait, ("member", "rg-activate", rg.token))
                self._progress()
        elif kind == "rg-activate":
            rg = self.rg
            if rg is not None and rg.token == payload[2] and rg.stage == 1:
                rg.activate_expired = True
                self._progress()
        elif kind == "rg-status":
            rg = self.rg
            if rg is not None and rg.rgen == payload[2]:
                if rg.ticked or rg.stage > 1:
                    self._broadcast()
                self.node.timer(self.cfg.regroup_status_period, ("member", "rg-status", rg.rgen))
        elif kind == "rg-timeout":
            rg = self.rg
            if rg is not None and rg.token == payload[2]:
                if rg.installed:
                    self._stabilize()
                else:
                    self._restart_round()
        elif kind == "rg-arb-retry":
            rg = self.rg
            _, _, token, original, keep = payload
            if rg is not None and rg.token == token and rg.stage == 2:
                self.node.arbiter.arbitrate(
                    lambda won: self._closing_arbitrated(token, original, keep, won))

    def on_message(self, src: int, msg: Any) -> None:
        if isinstance(msg, RegroupStatus):
            self._on_status(src, msg)
        elif isinstance(msg, Discover):
            self._on_discover(src)
        elif isinstance(msg, DiscoverReply):
            self._on_discover_reply(msg)
        elif isinstance(msg, JoinRequest):
            self._on_join_request(src, msg)
        elif isinstance(msg, JoinReject):
            if self.node.phase is P.JOINING and src == self.sponsor:
                self._join_fails(f"rejected-{msg.reason}")
        elif isinstance(msg, JoinSync):
            self._on_join_sync(src, msg)
        elif isinstance(msg, JoinSyncAck):
            self._on_join_sync_ack(msg)
        elif isinstance(msg, JoinAck):
            self._on_join_ack(src, msg)
        elif isinstance(msg, JoinAbort):
            if self.node.phase is P.JOINING and src == self.sponsor:
                self._join_fails(f"aborted-{msg.reason}")
        elif isinstance(msg, ClusterExit):
            self._on_cluster_exit(msg)

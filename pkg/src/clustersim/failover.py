"""Group placement: host selection, push, pull after failures, failback."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence

from .clusterdb import GroupStatus, OwnerChange, owner_key, state_key
from .resmgr import ResourceSpec

if TYPE_CHECKING:
    from .node import ClusterNode


class NoEligibleHost(Exception):
    pass


class ConfigError(Exception):
    pass


GROUP_STATES = ("Offline", "Onlining", "Online", "Offlining", "Migrating")


@dataclass(frozen=True)
class FailbackPolicy:
    enabled: bool = False
    min_uptime: int = 0
    blackouts: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class GroupSpec:
    gid: str
    members: tuple[str, ...] = ()
    preferred_owners: tuple[int, ...] = ()
    failback: FailbackPolicy = FailbackPolicy()


@dataclass
class GroupState:
    owner: Optional[int]
    status: str


def group_hosts(group: GroupSpec, resources: Mapping[str, ResourceSpec],
                defined: Iterable[int]) -> frozenset[int]:
    """Nodes able to host every member; members without a host list allow any."""
    hosts = set(defined)
    for rid in group.members:
        spec = resources.get(rid)
        if spec is not None and spec.possible_hosts:
            hosts &= set(spec.possible_hosts)
    return frozenset(hosts)


def validate_groups(groups: Mapping[str, GroupSpec], resources: Mapping[str, ResourceSpec],
                    defined: Iterable[int]) -> None:
    defined = list(defined)
    for gid, g in groups.items():
        union: set[int] = set()
        for rid in g.members:
            spec = resources.get(rid)
            union |= set(spec.possible_hosts) if spec and spec.possible_hosts else set(defined)
        if not g.members:
            union = set(defined)
        stray = [n for n in g.preferred_owners if n not in union]
        if stray:
            raise ConfigError(f"group {gid}: preferred owners {stray} cannot host any member")


def select_host(preferred: Sequence[int], eligible: Iterable[int]) -> Optional[int]:
    """First eligible preferred owner, else the lowest eligible id, else None."""
    ok = set(eligible)
    for n in preferred:
        if n in ok:
            return n
    return min(ok) if ok else None


def pull_assignment(groups: Mapping[str, GroupSpec], owners: Mapping[str, int],
                    active: Iterable[int], paused: Iterable[int],
                    hosts: Mapping[str, frozenset[int]]) -> dict[str, Optional[int]]:
    """Assignment of every group whose owner is not an active node.

    A pure function of the database contents and the membership, so every
    survivor evaluating it reaches the same answer without talking.
    """
    active = frozenset(active)
    eligible = active - frozenset(paused)
    out: dict[str, Optional[int]] = {}
    for gid in sorted(groups):
        if owners.get(gid, 0) in active:
            continue
        out[gid] = select_host(groups[gid].preferred_owners, eligible & hosts[gid])
    return out


def failback_time(joined_at: int, now: int, policy: FailbackPolicy) -> int:
    """Earliest time >= now at which uptime >= min_uptime outside every blackout."""
    t = max(now, joined_at + policy.min_uptime)
    moved = True
    while moved:
        moved = False
        for start, end in policy.blackouts:
            if start <= t < end:
                t = end
                moved = True
    return t


def failback_decision(joined_at: int, now: int, policy: FailbackPolicy) -> tuple[str, int]:
    if not policy.enabled:
        return ("never", -1)
    t = failback_time(joined_at, now, policy)
    return ("migrate", now) if t == now else ("defer", t)


def ranks_before(preferred: Sequence[int], a: int, b: int) -> bool:
    """True if ``a`` is a strictly more preferred owner than ``b``."""
    if a not in preferred:
        return False
    return b not in preferred or preferred.index(a) < preferred.index(b)


def paused_nodes(db) -> frozenset[int]:
    out = set()
    for key, value in db.subtree("node/").items():
        parts = key.split("/")
        if len(parts) == 3 and parts[2] == "paused" and value == "1":
            out.add(int(parts[1]))
    return frozenset(out)


def owners_from_db(db, gids: Iterable[str]) -> dict[str, int]:
    return {g: int(db.get(owner_key(g), "0")) for g in gids}


class FailoverManager:
    def __init__(self, node: "ClusterNode", groups: Mapping[str, GroupSpec],
                 resources: Mapping[str, ResourceSpec]) -> None:
        self.node = node
        self.groups = groups
        self.resources = resources
        self.hosts = {gid: group_hosts(g, resources, node.defined) for gid, g in groups.items()}
        self.claims: dict[str, int] = {}
        self.hosting: set[str] = set()
        self.pushing: set[str] = set()
        self.decisions: list[tuple[int, int, dict[str, Optional[int]]]] = []
        self.pending_pull: Optional[dict[str, Optional[int]]] = None
        self.failbacks: dict[str, int] = {}

    @property
    def k(self):
        return self.node.kernel

    def reset(self) -> None:
        self.claims.clear()
        self.hosting.clear()
        self.pushing.clear()
        self.pending_pull = None
        self.failbacks.clear()

    def state(self, gid: str) -> GroupState:
        db = self.node.db
        owner = int(db.get(owner_key(gid), "0"))
        return GroupState(owner or None, db.get(state_key(gid), "Offline"))

    def eligible(self) -> frozenset[int]:
        view = self.node.view
        if view is None:
            return frozenset()
        return view.active - paused_nodes(self.node.db)

    def compute_pull(self) -> dict[str, Optional[int]]:
        view = self.node.view
        db = self.node.db
        return pull_assignment(self.groups, owners_from_db(db, self.groups), view.active,
                               paused_nodes(db), self.hosts)

    # -- placement -----------------------------------------------------------

    def record_pull(self) -> None:
        """Called at regroup stage 4, with the database frozen and converged."""
        assignment = self.compute_pull()
        self.decisions.append((self.k.now, self.node.view.epoch, assignment))
        self.pending_pull = assignment
        detail = " ".join(f"{g}={'-' if n is None else n}" for g, n in sorted(assignment.items()))
        self.k.record(self.node.id, "PULL", f"epoch={self.node.view.epoch} {detail}".rstrip())

    def place(self) -> None:
        """Claim orphaned groups assigned to this node; reconcile local hosting."""
        node = self.node
        if not node.is_member() or node.in_regroup():
            return
        assignment = self.pending_pull if self.pending_pull is not None else self.compute_pull()
        self.pending_pull = None
        owners = owners_from_db(node.db, self.groups)
        for gid in sorted(assignment):
            if assignment[gid] != node.id:
                continue
            expected = owners.get(gid, 0)
            if self.claims.get(gid) == expected:
                continue
            self.claims[gid] = expected
            node.glup.begin_update(OwnerChange(gid, node.id, expected, "Onlining"))
        self.reconcile()

    def reconcile(self) -> None:
        node = self.node
        if not node.is_member():
            return
        for gid in sorted(self.groups):
            st = self.state(gid)
            mine = st.owner == node.id
            if mine and gid not in self.hosting and gid not in self.pushing:
                self.hosting.add(gid)
                self.k.record(node.id, "GROUP", f"gid={gid} action=online")
                node.resmgr.online_group(gid, lambda ok, g=gid: self._onlined(g))
            elif not mine and gid in self.hosting and gid not in self.pushing:
                self.hosting.discard(gid)
                node.resmgr.offline_group(gid)

    def _onlined(self, gid: str) -> None:
        node = self.node
        if gid in self.hosting and node.resmgr.group_online(gid) and node.is_member():
            if self.state(gid).status != "Online":
                node.glup.begin_update(GroupStatus(gid, node.id, "Online"))

    def on_group_update(self, gid: str) -> None:
        self.claims.pop(gid, None)
        if self.node.is_member():
            self.reconcile()

    # -- push ----------------------------------------------------------------

    def push_group(self, gid: str, reason: str, target: Optional[int] = None) -> None:
        node = self.node
        if gid not in self.groups:
            raise KeyError(gid)
        if self.state(gid).owner != node.id or gid in self.pushing or not node.is_member():
            return
        if target is not None and target not in (self.eligible() - {node.id}) & self.hosts[gid]:
            # operator asked for a host that cannot take the group; leave it where it is
            raise NoEligibleHost(f"{gid} -> {target}")
        self.pushing.add(gid)
        self.k.record(node.id, "GROUP", f"gid={gid} action=push reason={reason}")
        node.glup.begin_update(GroupStatus(gid, node.id, "Migrating"))
        node.resmgr.offline_group(gid, lambda ok: self._pushed_offline(gid, reason, target))

    def _pushed_offline(self, gid: str, reason: str, target: Optional[int]) -> None:
        node = self.node
        self.hosting.discard(gid)
        if not node.is_member():
            self.pushing.discard(gid)
            return
        eligible = (self.eligible() - {node.id}) & self.hosts[gid]
        if target is not None:
            new = target if target in eligible else None
        else:
            new = select_host(self.groups[gid].preferred_owners, eligible)
        if new is None:
            self.k.record(node.id, "GROUP", f"gid={gid} action=no-eligible-host")
            node.glup.begin_update(OwnerChange(gid, 0, node.id, "Offline"),
                                   on_done=lambda ok: self.pushing.discard(gid))
            return
        self.k.record(node.id, "GROUP", f"gid={gid} action=handoff from={node.id} to={new}")
        node.glup.begin_update(OwnerChange(gid, new, node.id, "Onlining"),
                               on_done=lambda ok: self.pushing.discard(gid))

    def escalate(self, gid: str, reason: str) -> None:
        self.push_group(gid, reason)

    # -- failback --------------------------------------------------------------

    def on_member_added(self, joined: int, at: int) -> None:
        node = self.node
        for gid in sorted(self.groups):
            g = self.groups[gid]
            if not g.failback.enabled or self.state(gid).owner != node.id:
                continue
            if not ranks_before(g.preferred_owners, joined, node.id):
                continue
            if joined not in self.hosts[gid]:
                continue
            self._schedule_failback(gid, joined, at)

    def _schedule_failback(self, gid: str, joined: int, joined_at: int) -> None:
        verdict, when = failback_decision(joined_at, self.k.now, self.groups[gid].failback)
        if verdict == "never":
            return
        self.failbacks[gid] = joined
        delay = 0 if verdict == "migrate" else when - self.k.now
        self.node.call_later(delay, lambda: self.failback_check(gid, joined, joined_at))

    def failback_check(self, gid: str, joined: int, joined_at: int) -> str:
        node = self.node
        g = self.groups[gid]
        if self.failbacks.get(gid) != joined:
            return "stale"
        view = node.view
        if (not node.is_member() or view is None or joined not in view.active
                or node.member_since.get(joined) != joined_at
                or self.state(gid).owner != node.id
                or not ranks_before(g.preferred_owners, joined, node.id)
                or joined not in self.eligible()):
            self.failbacks.pop(gid, None)
            return "cancelled"
        if node.in_regroup():
            node.call_later(node.cfg.regroup_status_period,
                            lambda: self.failback_check(gid, joined, joined_at))
            return "defer"
        verdict, when = failback_decision(joined_at, self.k.now, g.failback)
        if verdict == "defer":
            node.call_later(when - self.k.now, lambda: self.failback_check(gid, joined, joined_at))
            return "defer"
        self.failbacks.pop(gid, None)
        self.k.record(node.id, "FAILBACK",
                      f"gid={gid} to={joined} uptime={self.k.now - joined_at}")
        self.push_group(gid, "failback", target=joined)
        return "migrate"

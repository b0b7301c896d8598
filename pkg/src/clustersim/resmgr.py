"""Per-node resource manager: state machine, dependency order, restart policy."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Optional

if TYPE_CHECKING:
    from .node import ClusterNode


class CycleDetected(Exception):
    def __init__(self, path: list[str]) -> None:
        super().__init__(" -> ".join(path))
        self.path = path


class CrossGroupDependency(Exception):
    def __init__(self, edge: tuple[str, str]) -> None:
        super().__init__(f"{edge[0]} -> {edge[1]}")
        self.edge = edge


class IllegalTransition(Exception):
    pass


class ResourceState(str, Enum):
    OFFLINE = "Offline"
    ONLINE_PENDING = "OnlinePending"
    ONLINE = "Online"
    OFFLINE_PENDING = "OfflinePending"
    FAILED = "Failed"


S = ResourceState

ARCS: dict[ResourceState, frozenset[ResourceState]] = {
    S.OFFLINE: frozenset({S.ONLINE_PENDING}),
    S.ONLINE_PENDING: frozenset({S.ONLINE, S.FAILED}),
    S.ONLINE: frozenset({S.OFFLINE_PENDING, S.FAILED}),
    S.OFFLINE_PENDING: frozenset({S.OFFLINE}),
    S.FAILED: frozenset({S.ONLINE_PENDING}),
}


def check_arc(old: ResourceState, new: ResourceState, forced: bool = False) -> None:
    if forced and new is S.OFFLINE:
        return
    if new not in ARCS[old]:
        raise IllegalTransition(f"{old.value} -> {new.value}")


@dataclass(frozen=True)
class RestartPolicy:
    max_restarts: int = 3
    within: int = 1000
    then_escalate: bool = True


@dataclass(frozen=True)
class ResourceSpec:
    rid: str
    rtype: str
    group: str
    depends_on: tuple[str, ...] = ()
    possible_hosts: tuple[int, ...] = ()
    restart_policy: RestartPolicy = RestartPolicy()
    poll_period: int = 100
    local: bool = False


# -- dependency graph ------------------------------------------------------


def validate_group(gid: str, specs: Mapping[str, ResourceSpec]) -> None:
    """Reject cross-group edges and cycles among the members of ``gid``."""
    members = sorted(r for r, s in specs.items() if s.group == gid)
    for rid in members:
        for dep in specs[rid].depends_on:
            if dep not in specs or specs[dep].group != gid:
                raise CrossGroupDependency((rid, dep))
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(r: str) -> None:
        color[r] = 1
        stack.append(r)
        for dep in sorted(specs[r].depends_on):
            if color.get(dep) == 1:
                raise CycleDetected(stack[stack.index(dep):] + [dep])
            if dep not in color:
                visit(dep)
        stack.pop()
        color[r] = 2

    for rid in members:
        if rid not in color:
            visit(rid)


def online_order(gid: str, specs: Mapping[str, ResourceSpec]) -> list[str]:
    """Kahn's algorithm, smallest rid first among ready resources."""
    members = {r for r, s in specs.items() if s.group == gid}
    indeg = {r: sum(1 for d in specs[r].depends_on if d in members) for r in members}
    users: dict[str, list[str]] = {r: [] for r in members}
    for r in members:
        for d in specs[r].depends_on:
            if d in members:
                users[d].append(r)
    ready = [r for r, n in indeg.items() if n == 0]
    heapq.heapify(ready)
    out: list[str] = []
    while ready:
        r = heapq.heappop(ready)
        out.append(r)
        for u in users[r]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(out) != len(members):
        raise CycleDetected(sorted(members - set(out)))
    return out


def dependents_closure(rid: str, specs: Mapping[str, ResourceSpec]) -> set[str]:
    """All resources that transitively depend on ``rid`` (excluding itself)."""
    users: dict[str, set[str]] = {}
    for r, s in specs.items():
        for d in s.depends_on:
            users.setdefault(d, set()).add(r)
    seen: set[str] = set()
    todo = [rid]
    while todo:
        for u in users.get(todo.pop(), ()):
            if u not in seen:
                seen.add(u)
                todo.append(u)
    return seen


# -- control libraries -----------------------------------------------------


class ControlLibrary:
    """Scriptable online/offline/is_alive callbacks.

    ``fail_online[rid]`` makes that many upcoming online attempts fail;
    ``deaths[rid]`` lists virtual times at which the running instance dies.
    """

    online_delay = 2
    offline_delay = 1

    def __init__(self) -> None:
        self.fail_online: dict[str, int] = {}
        self.deaths: dict[str, list[int]] = {}
        self.started_at: dict[str, int] = {}

    def online(self, rid: str, now: int) -> tuple[int, bool]:
        left = self.fail_online.get(rid, 0)
        if left:
            self.fail_online[rid] = left - 1
            return self.online_delay, False
        self.started_at[rid] = now + self.online_delay
        return self.online_delay, True

    def offline(self, rid: str, now: int) -> int:
        self.started_at.pop(rid, None)
        return self.offline_delay

    def is_alive(self, rid: str, now: int) -> bool:
        start = self.started_at.get(rid)
        if start is None:
            return False
        return not any(start <= d <= now for d in self.deaths.get(rid, ()))

    def inject_failure(self, rid: str, at: int) -> None:
        self.deaths.setdefault(rid, []).append(at)


class PhysDisk(ControlLibrary):
    online_delay = 3


class IpAddr(ControlLibrary):
    online_delay = 1


class NetName(ControlLibrary):
    online_delay = 1


class GenericApp(ControlLibrary):
    online_delay = 2


LIBRARIES: dict[str, type[ControlLibrary]] = {
    "phys-disk": PhysDisk,
    "ip-addr": IpAddr,
    "net-name": NetName,
    "generic-app": GenericApp,
}


def make_libraries() -> dict[str, ControlLibrary]:
    return {name: cls() for name, cls in LIBRARIES.items()}


# -- manager ---------------------------------------------------------------


@dataclass
class _GroupOps:
    steps: list[tuple[str, str]] = field(default_factory=list)
    running: Optional[tuple[str, str]] = None
    on_done: list[Callable[[bool], None]] = field(default_factory=list)
    failed: bool = False


class ResourceManager:
    def __init__(self, node: "ClusterNode", specs: Mapping[str, ResourceSpec],
                 libraries: Mapping[str, ControlLibrary]) -> None:
        self.node = node
        self.specs = specs
        self.libs = libraries
        self.states: dict[str, ResourceState] = {r: S.OFFLINE for r in specs}
        self.restarts: dict[str, list[int]] = {r: [] for r in specs}
        self.ops: dict[str, _GroupOps] = {}
        self._gen: dict[str, int] = {r: 0 for r in specs}
        self.escalate: Optional[Callable[[str, str], None]] = None
        self.restart_log: list[tuple[int, str]] = []

    @property
    def k(self):
        return self.node.kernel

    def lib(self, rid: str) -> ControlLibrary:
        return self.libs[self.specs[rid].rtype]

    def state(self, rid: str) -> ResourceState:
        return self.states[rid]

    def group_members(self, gid: str) -> list[str]:
        return online_order(gid, self.specs)

    def _set(self, rid: str, new: ResourceState, forced: bool = False) -> None:
        old = self.states[rid]
        if old is new:
            return
        check_arc(old, new, forced)
        self.states[rid] = new
        self._gen[rid] += 1
        self.k.record(self.node.id, "RES",
                      f"rid={rid} state={new.value} group={self.specs[rid].group}")

    # -- primitive operations -------------------------------------------------

    def bring_online(self, rid: str, on_done: Optional[Callable[[bool], None]] = None) -> None:
        spec = self.specs[rid]
        for dep in spec.depends_on:
            if self.states[dep] is not S.ONLINE:
                raise IllegalTransition(f"{rid}: provider {dep} is {self.states[dep].value}")
        self._set(rid, S.ONLINE_PENDING)
        delay, ok = self.lib(rid).online(rid, self.k.now)
        gen = self._gen[rid]
        self.node.call_later(delay, lambda: self._online_done(rid, gen, ok, on_done))

    def _online_done(self, rid: str, gen: int, ok: bool,
                     on_done: Optional[Callable[[bool], None]]) -> None:
        if self._gen[rid] != gen or self.states[rid] is not S.ONLINE_PENDING:
            return
        if ok:
            self._set(rid, S.ONLINE)
            self._arm_poll(rid)
        else:
            self._set(rid, S.FAILED)
        if on_done is not None:
            on_done(ok)

    def take_offline(self, rid: str, on_done: Optional[Callable[[], None]] = None) -> None:
        state = self.states[rid]
        if state is S.OFFLINE:
            if on_done is not None:
                on_done()
            return
        if state not in (S.ONLINE, S.FAILED):
            raise IllegalTransition(f"{rid}: offline from {state.value}")
        if state is S.FAILED:
            self.lib(rid).offline(rid, self.k.now)
            self._set(rid, S.OFFLINE, forced=True)
            if on_done is not None:
                on_done()
            return
        self._set(rid, S.OFFLINE_PENDING)
        delay = self.lib(rid).offline(rid, self.k.now)
        gen = self._gen[rid]

        def done() -> None:
            if self._gen[rid] == gen and self.states[rid] is S.OFFLINE_PENDING:
                self._set(rid, S.OFFLINE)
            if on_done is not None:
                on_done()

        self.node.call_later(delay, done)

    def force_offline(self, rid: str) -> None:
        if self.states[rid] is not S.OFFLINE:
            self.lib(rid).offline(rid, self.k.now)
            self._set(rid, S.OFFLINE, forced=True)

    # -- sequenced group operations ------------------------------------------

    def _queue(self, gid: str, steps: Iterable[tuple[str, str]],
               on_done: Optional[Callable[[bool], None]] = None) -> None:
        ops = self.ops.setdefault(gid, _GroupOps())
        ops.steps.extend(steps)
        if on_done is not None:
            ops.on_done.append(on_done)
        if ops.running is None:
            self._run(gid)

    def _run(self, gid: str) -> None:
        ops = self.ops[gid]
        while ops.steps:
            action, rid = ops.steps.pop(0)
            st = self.states[rid]
            if action == "online":
                if st is S.ONLINE:
                    continue
                if any(self.states[d] is not S.ONLINE for d in self.specs[rid].depends_on):
                    ops.failed = True
                    continue
                if st not in (S.OFFLINE, S.FAILED):
                    continue
                ops.running = (action, rid)
                self.bring_online(rid, lambda ok, g=gid, r=rid: self._step_done(g, r, ok))
                return
            if action == "offline":
                if st is S.OFFLINE:
                    continue
                if st in (S.ONLINE_PENDING, S.OFFLINE_PENDING):
                    self.force_offline(rid)
                    continue
                ops.running = (action, rid)
                self.take_offline(rid, lambda g=gid, r=rid: self._step_done(g, r, True))
                return
        ops.running = None
        callbacks, ops.on_done = ops.on_done, []
        failed, ops.failed = ops.failed, False
        for cb in callbacks:
            cb(not failed)

    def _step_done(self, gid: str, rid: str, ok: bool) -> None:
        ops = self.ops.get(gid)
        if ops is None or ops.running is None or ops.running[1] != rid:
            return
        ops.running = None
        if not ok:
            # abandon the rest of the sequence; the failure handler decides
            ops.steps.clear()
            ops.failed = True
            self._run(gid)
            self.on_failure(rid)
            return
        self._run(gid)

    def online_group(self, gid: str, on_done: Optional[Callable[[bool], None]] = None) -> None:
        self._queue(gid, [("online", r) for r in self.group_members(gid)], on_done)

    def offline_group(self, gid: str, on_done: Optional[Callable[[bool], None]] = None) -> None:
        self._queue(gid, [("offline", r) for r in reversed(self.group_members(gid))], on_done)

    def offline_resource(self, rid: str, on_done: Optional[Callable[[bool], None]] = None) -> None:
        """Offline ``rid`` after its dependents, in reverse dependency order."""
        gid = self.specs[rid].group
        order = self.group_members(gid)
        dependents = dependents_closure(rid, self.specs)
        steps = [("offline", r) for r in reversed(order) if r in dependents or r == rid]
        self._queue(gid, steps, on_done)

    def online_resource(self, rid: str, on_done: Optional[Callable[[bool], None]] = None) -> None:
        gid = self.specs[rid].group
        self._queue(gid, [("online", rid)], on_done)

    def group_online(self, gid: str) -> bool:
        return all(self.states[r] is S.ONLINE for r in self.group_members(gid))

    def group_busy(self, gid: str) -> bool:
        ops = self.ops.get(gid)
        return ops is not None and (ops.running is not None or bool(ops.steps))

    # -- local (non-shared) resources -------------------------------------------

    def bring_local_online(self) -> None:
        for rid in sorted(r for r, s in self.specs.items() if s.local):
            if self.states[rid] is S.OFFLINE:
                self.bring_online(rid)

    def force_all_offline(self) -> None:
        for gid in sorted({s.group for s in self.specs.values()}):
            for rid in reversed(self.group_members(gid)):
                self.force_offline(rid)
        self.ops.clear()

    def reset(self) -> None:
        """Service stopped: every resource instance on this node is gone."""
        for rid in self.states:
            if self.states[rid] is not S.OFFLINE:
                self.lib(rid).offline(rid, self.k.now)
            self.states[rid] = S.OFFLINE
            self._gen[rid] += 1
        self.ops.clear()

    # -- monitoring and restart -----------------------------------------------

    def _arm_poll(self, rid: str) -> None:
        gen = self._gen[rid]
        self.node.call_later(self.specs[rid].poll_period, lambda: self.monitor_poll(rid, gen))

    def monitor_poll(self, rid: str, gen: Optional[int] = None) -> Optional[bool]:
        if gen is not None and gen != self._gen[rid]:
            return None
        if self.states[rid] is not S.ONLINE:
            return None
        alive = self.lib(rid).is_alive(rid, self.k.now)
        if alive:
            self._arm_poll(rid)
            return True
        self._set(rid, S.FAILED)
        self.on_failure(rid)
        return False

    def on_failure(self, rid: str) -> str:
        spec = self.specs[rid]
        policy = spec.restart_policy
        now = self.k.now
        window = [t for t in self.restarts[rid] if t > now - policy.within]
        gid = spec.group
        if len(window) < policy.max_restarts:
            window.append(now)
            self.restarts[rid] = window
            self.restart_log.append((now, rid))
            self.k.record(self.node.id, "RESTART", f"rid={rid} attempt={len(window)}")
            order = self.group_members(gid)
            deps = dependents_closure(rid, self.specs)
            down = [("offline", r) for r in reversed(order)
                    if r in deps and self.states[r] is not S.OFFLINE]
            up = [("online", r) for r in order if r == rid or r in deps]
            ops = self.ops.setdefault(gid, _GroupOps())
            ops.steps = [s for s in ops.steps if s[1] != rid and s[1] not in deps]
            self._queue(gid, down + up)
            return "restart"
        self.restarts[rid] = window
        if policy.then_escalate and self.escalate is not None:
            self.k.record(self.node.id, "RESTART", f"rid={rid} result=escalate")
            self.escalate(gid, "escalation")
            return "escalate"
        self.k.record(self.node.id, "RESTART", f"rid={rid} result=rest-failed")
        deps = dependents_closure(rid, self.specs)
        order = self.group_members(gid)
        self._queue(gid, [("offline", r) for r in reversed(order) if r in deps])
        return "rest"

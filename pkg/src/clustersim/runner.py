"""Drive a parsed scenario through a cluster and collect a report."""

from __future__ import annotations

import hashlib
import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .clusterdb import DbWrite, owner_key, state_key
from .cluster import Cluster
from .config import SimConfig
from .failover import NoEligibleHost
from .glup import SenderNotMember
from .membership import IllegalTransition as PhaseError
from .resmgr import IllegalTransition
from .scenario import Command, ParseError, Scenario, parse
from .simkernel import (CrashNode, DelayLink, DropNext, HealPartition, LivelockGuard,
                        PartitionSet, ReviveNode)
from .vserver import NoVirtualContext, UnknownName

EXIT_OK, EXIT_ASSERT, EXIT_PARSE, EXIT_LIVELOCK = 0, 1, 2, 3
SETTLE = 5000


class UnknownCommand(Exception):
    pass


@dataclass
class AssertionResult:
    at: int
    text: str
    ok: bool
    detail: str = ""
    line: int = 0

    def format(self) -> str:
        mark = "PASS" if self.ok else "FAIL"
        extra = f" ({self.detail})" if self.detail and not self.ok else ""
        return f"{mark} t={self.at} line={self.line} expect {self.text}{extra}"


@dataclass
class RunReport:
    seed: int
    until: int
    assertions: list[AssertionResult] = field(default_factory=list)
    views: dict[int, str] = field(default_factory=dict)
    digests: dict[int, str] = field(default_factory=dict)
    trace_path: Optional[str] = None
    livelock: Optional[str] = None
    trace_digest: str = ""
    cluster: Optional[Cluster] = None

    @property
    def failed(self) -> list[AssertionResult]:
        return [a for a in self.assertions if not a.ok]

    @property
    def exit_code(self) -> int:
        if self.livelock is not None:
            return EXIT_LIVELOCK
        return EXIT_ASSERT if self.failed else EXIT_OK

    def format(self) -> str:
        lines = [f"seed={self.seed} until={self.until}"]
        lines += [a.format() for a in self.assertions]
        for nid in sorted(self.views):
            lines.append(f"node {nid}: {self.views[nid]} db={self.digests[nid]}")
        if self.livelock:
            lines.append(f"LIVELOCK {self.livelock}")
        if self.trace_path:
            lines.append(f"trace {self.trace_path}")
        lines.append(f"trace-digest {self.trace_digest}")
        status = {EXIT_OK: "ok", EXIT_ASSERT: "assertion-failure",
                  EXIT_LIVELOCK: "livelock"}[self.exit_code]
        lines.append(f"result {status}")
        return "\n".join(lines) + "\n"


def build_cluster(sc: Scenario, seed: Optional[int] = None,
                  cfg: Optional[SimConfig] = None) -> Cluster:
    base = cfg or SimConfig()
    cfg = base.with_overrides(**sc.config) if sc.config else base
    if seed is None:
        seed = sc.seed if sc.seed is not None else 0
    cluster = Cluster(sc.spec, cfg, seed)
    k = cluster.kernel
    for trig in sc.triggers:
        def pred(rec, trig=trig):
            return rec.kind == trig.kind and trig.match in rec.format()
        k.add_trigger(pred, lambda trig=trig: k.defer(lambda: k.crash(trig.target)))
    return cluster


# -- commands -----------------------------------------------------------------


def _owner_node(cluster: Cluster, gid: str):
    db = cluster.reference_db()
    if db is None:
        return None
    owner = int(db.get(owner_key(gid), "0"))
    node = cluster.nodes.get(owner)
    if node is None or not node.is_member():
        return None
    return node


def _first_online(cluster: Cluster):
    online = cluster.online()
    return online[0] if online else None


def apply_command(cluster: Cluster, cmd: Command) -> None:
    k = cluster.kernel
    a = cmd.args
    v = cmd.verb
    try:
        if v == "crash":
            k.apply_fault(CrashNode(int(a[0])))
        elif v in ("revive", "boot"):
            k.apply_fault(ReviveNode(int(a[0])))
        elif v == "partition":
            groups = tuple(frozenset(int(x) for x in g.split(",")) for g in a[0].split("|"))
            k.apply_fault(PartitionSet(groups))
        elif v == "heal":
            k.apply_fault(HealPartition())
        elif v == "drop":
            opts = dict(x.split("=", 1) for x in a[2:])
            iface = int(opts["iface"]) if "iface" in opts else None
            k.apply_fault(DropNext(int(a[0]), int(a[1]), int(opts.get("count", 1)), iface))
        elif v == "delay":
            k.apply_fault(DelayLink(int(a[0]), int(a[1]), int(a[2])))
        elif v == "update":
            cluster.node(int(a[0])).write(a[1], a[2])
        elif v == "pause":
            cluster.node(int(a[0])).pause()
        elif v == "resume":
            cluster.node(int(a[0])).resume()
        elif v == "leave":
            cluster.node(int(a[0])).membership.leave_cluster()
        elif v == "evict":
            _evict(cluster, int(a[0]))
        elif v == "movegroup":
            if a[1] != "to":
                raise UnknownCommand(cmd.text())
            node = _owner_node(cluster, a[0])
            if node is None:
                raise NoEligibleHost(a[0])
            node.failover.push_group(a[0], "operator", target=int(a[2]))
        elif v in ("online", "offline"):
            rid = a[0]
            gid = cluster.resources[rid].group
            node = _owner_node(cluster, gid)
            if node is None:
                raise NoEligibleHost(gid)
            if v == "online":
                node.resmgr.online_resource(rid)
            else:
                node.resmgr.offline_resource(rid)
        elif v == "fail":
            rid = a[0]
            cluster.libraries[cluster.resources[rid].rtype].inject_failure(rid, k.now)
        elif v == "failonline":
            rid = a[0]
            lib = cluster.libraries[cluster.resources[rid].rtype]
            lib.fail_online[rid] = lib.fail_online.get(rid, 0) + int(a[1])
        elif v == "probe":
            _probe(cluster, a[0], a[1])
        elif v == "event":
            cluster.node(int(a[0])).events.log_event(" ".join(a[1:]))
        elif v == "clockjump":
            cluster.node(int(a[0])).clock.jump(k.now, Fraction(a[1]))
        elif v == "drift":
            cluster.node(int(a[0])).clock.set_drift(k.now, Fraction(a[1]))
        elif v == "quorum":
            _quorum_fault(cluster, a[0])
        elif v == "vsconfig":
            node = _first_online(cluster)
            if node is None:
                raise NoEligibleHost(a[0])
            node.glup.begin_update(cluster.vservers.config_write(a[0], a[1], a[2]))
        else:
            raise UnknownCommand(v)
    except (PhaseError, IllegalTransition, SenderNotMember, NoEligibleHost, KeyError,
            UnknownName) as exc:
        k.record("kernel", "CMD", f"rejected {cmd.text()} reason={type(exc).__name__}")
        return
    k.record("kernel", "CMD", cmd.text())


def _evict(cluster: Cluster, nid: int) -> None:
    from .membership import ViewChange
    executor = next((n for n in cluster.online() if n.id != nid), None)
    if executor is None:
        raise NoEligibleHost(str(nid))
    cluster.allowed.discard(nid)
    for n in cluster.nodes.values():
        n.allowed = frozenset(cluster.allowed)
    if nid in executor.view.active:
        executor.glup.begin_update(ViewChange("leave", nid, executor.view.rgen))
    executor.glup.begin_update(DbWrite(f"node/{nid}/evicted", "1"))


def _probe(cluster: Cluster, vname: str, service: str) -> None:
    node = _first_online(cluster)
    k = cluster.kernel
    if node is None:
        k.record("kernel", "PROBE", f"vname={vname} service={service} result=unavailable")
        return
    host = cluster.vservers.resolve(vname, node.db)
    path = cluster.vservers.remap_endpoint(f"\\\\{vname}\\{service}", node.db)
    result = "unavailable" if host is None else str(host)
    k.record("kernel", "PROBE", f"vname={vname} service={service} result={result} path={path}")


def _quorum_fault(cluster: Cluster, what: str) -> None:
    dev = cluster.device
    if what == "unavailable":
        dev.available = False
    elif what == "available":
        dev.available = True
    elif what == "hold":
        dev.held_forever = True
        dev.reservation = None
    elif what == "release":
        dev.held_forever = False
    elif what == "unreadable":
        dev.master.readable = False
    else:
        raise UnknownCommand(f"quorum {what}")


# -- assertions ---------------------------------------------------------------


def _node_or_none(text: str) -> Optional[int]:
    return None if text in ("none", "-", "0") else int(text)


def evaluate(cluster: Cluster, args: tuple[str, ...]) -> tuple[bool, str]:
    """Evaluate one ``expect`` assertion; returns (ok, observed)."""
    head = args[0]
    online = cluster.online()
    if head == "views":
        keys = sorted({str(n.view_key()) for n in online})
        return (len(keys) <= 1 and bool(online), "; ".join(keys) or "no online nodes")
    if head == "view":
        node = cluster.node(int(args[1]))
        want = args[2].split("=", 1)[1]
        got = "-" if node.view is None else ",".join(str(n) for n in sorted(node.view.active))
        return got == want, got
    if head == "epoch":
        node = cluster.node(int(args[1]))
        got = -1 if node.view is None else node.view.epoch
        return str(got) == args[3], str(got)
    if head == "state":
        node = cluster.node(int(args[1]))
        return node.state == args[3], node.state
    if head == "owner":
        gid, want = args[1], _node_or_none(args[3])
        owners = {int(n.db.get(owner_key(gid), "0")) or None for n in online}
        got = ",".join(sorted(str(o) for o in owners))
        return owners == {want}, got
    if head == "group":
        gid, want = args[1], args[4]
        states = {n.db.get(state_key(gid), "Offline") for n in online}
        return states == {want}, ",".join(sorted(states))
    if head == "resource":
        rid, nid, want = args[1], int(args[3]), args[5]
        got = cluster.node(nid).resmgr.states[rid].value
        return got == want, got
    if head == "db":
        if len(args) == 5:
            node = cluster.node(int(args[1]))
            got = node.db.get(args[2])
            return got == args[4], str(got)
        key, want = args[1], args[3]
        vals = {n.db.get(key) for n in online}
        return vals == {want}, ",".join(sorted(str(x) for x in vals))
    if head == "event":
        needle = " ".join(args[1:])
        missing = [n.id for n in online
                   if not any(needle in r.body for r in n.events.merged_log())]
        return (not missing and bool(online)), f"missing at {missing}"
    if head == "skew":
        got = cluster.skew()
        return got <= Fraction(args[2]), f"{float(got):.3f}"
    if head == "replicas":
        return cluster.replicas_agree(), f"{len({n.db.digest() for n in online})} distinct"
    if head == "resolve":
        node = _first_online(cluster)
        host = None if node is None else cluster.vservers.resolve(args[1], node.db)
        got = "unavailable" if host is None else str(host)
        return got == args[3], got
    if head == "remap":
        node = _first_online(cluster)
        got = "unavailable" if node is None else cluster.vservers.remap_endpoint(args[1], node.db)
        return got == args[3], got
    if head == "identity":
        try:
            got = cluster.vservers.virtual_identity(args[1])
        except NoVirtualContext:
            got = "none"
        return got == args[3], got
    if head == "quorum":
        holders = cluster.quorum_holders()
        want = _node_or_none(args[3])
        got = ",".join(str(h) for h in holders) or "none"
        return holders == ([] if want is None else [want]), got
    raise UnknownCommand(head)


# -- running ------------------------------------------------------------------


def run_scenario(sc: Union[Scenario, str, Path], seed: Optional[int] = None, *,
                 until: Optional[int] = None, trace_path: Optional[str] = None,
                 cfg: Optional[SimConfig] = None) -> RunReport:
    if not isinstance(sc, Scenario):
        from .scenario import load
        sc = load(sc)
    cluster = build_cluster(sc, seed, cfg)
    k = cluster.kernel
    end = until if until is not None else (sc.until if sc.until is not None
                                           else sc.last_time + SETTLE)
    report = RunReport(seed=cluster.seed, until=end, cluster=cluster)
    for cmd in sc.commands:
        if cmd.verb != "expect" and cmd.at <= end:
            k.call_at(cmd.at, lambda c=cmd: apply_command(cluster, c))
    checks = sorted((c for c in sc.expects if c.at <= end), key=lambda c: (c.at, c.line))
    try:
        for cmd in checks:
            k.run(until=cmd.at)
            try:
                ok, got = evaluate(cluster, cmd.args)
            except (IndexError, ValueError, KeyError, UnknownCommand, UnknownName) as exc:
                ok, got = False, f"bad assertion: {type(exc).__name__} {exc}"
            report.assertions.append(AssertionResult(cmd.at, " ".join(cmd.args), ok, got,
                                                     cmd.line))
        k.run(until=end)
    except LivelockGuard as exc:
        report.livelock = str(exc)
    for nid, node in sorted(cluster.nodes.items()):
        report.views[nid] = node.summary()
        report.digests[nid] = node.db.digest()
    text = k.trace_text()
    report.trace_digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    if trace_path:
        Path(trace_path).write_text(text)
        report.trace_path = trace_path
    return report


# -- sweeps -------------------------------------------------------------------


_AXIS = re.compile(r"^(\w+)=(.+)$")


def parse_axis(text: str) -> tuple[str, list[str]]:
    """``X=0..10``, ``X=0..100:10`` or ``X=a,b,c``."""
    m = _AXIS.match(text)
    if m is None:
        raise ValueError(f"bad axis {text!r}")
    name, spec = m.groups()
    if ".." in spec:
        lo, _, rest = spec.partition("..")
        hi, _, step = rest.partition(":")
        return name, [str(i) for i in range(int(lo), int(hi) + 1, int(step or 1))]
    return name, spec.split(",")


@dataclass
class SweepReport:
    runs: list[tuple[dict[str, str], RunReport]] = field(default_factory=list)
    errors: list[tuple[dict[str, str], str]] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(1 for _, r in self.runs if r.exit_code != EXIT_OK) + len(self.errors)

    def format(self) -> str:
        lines = []
        for binding, r in self.runs:
            b = " ".join(f"{k}={v}" for k, v in binding.items())
            lines.append(f"{b} exit={r.exit_code} failed={len(r.failed)} digest={r.trace_digest}")
            lines += ["  " + a.format() for a in r.failed]
        for binding, err in self.errors:
            b = " ".join(f"{k}={v}" for k, v in binding.items())
            lines.append(f"{b} error={err}")
        lines.append(f"runs={len(self.runs) + len(self.errors)} violations={self.violations}")
        return "\n".join(lines) + "\n"


def sweep(template: str, axes: Iterable[tuple[str, list[str]]], seed: Optional[int] = None,
          check: Optional[Callable[[RunReport], list[str]]] = None) -> SweepReport:
    axes = list(axes)
    out = SweepReport()
    names = [a[0] for a in axes]
    for values in itertools.product(*(a[1] for a in axes)):
        binding = dict(zip(names, values))
        text = template
        for name, value in binding.items():
            text = text.replace("${" + name + "}", value)
        try:
            sc = parse(text)
        except ParseError as exc:
            out.errors.append((binding, str(exc)))
            continue
        report = run_scenario(sc, seed)
        if check is not None:
            for problem in check(report):
                report.assertions.append(AssertionResult(report.until, problem, False))
        out.runs.append((binding, report))
    return out

"""A whole simulated cluster: kernel, quorum device, nodes and shared config."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional

from .config import SimConfig
from .failover import GroupSpec, validate_groups
from .membership import NodePhase
from .node import ClusterNode
from .quorum import QuorumDevice
from .resmgr import ControlLibrary, ResourceSpec, make_libraries, validate_group
from .simkernel import QUORUM_DEVICE, Kernel, LinkModel
from .support import max_skew
from .vserver import VirtualServer, VirtualServerRegistry


@dataclass
class NodeDef:
    nid: int
    offset: int = 0
    drift: Fraction = Fraction(0)
    boot: Optional[int] = 0


@dataclass
class LinkDef:
    a: int
    b: int
    delay: int = 2
    ifaces: int = 1
    drop: Fraction = Fraction(0)


@dataclass
class ClusterSpec:
    nodes: list[NodeDef] = field(default_factory=list)
    links: list[LinkDef] = field(default_factory=list)
    resources: dict[str, ResourceSpec] = field(default_factory=dict)
    groups: dict[str, GroupSpec] = field(default_factory=dict)
    vservers: list[VirtualServer] = field(default_factory=list)
    allowed: Optional[set[int]] = None
    device_delay: Optional[int] = None

    @classmethod
    def simple(cls, n: int, boot_gap: int = 0) -> "ClusterSpec":
        return cls(nodes=[NodeDef(i, boot=(i - 1) * boot_gap) for i in range(1, n + 1)])


class Cluster:
    def __init__(self, spec: ClusterSpec, cfg: Optional[SimConfig] = None, seed: int = 0,
                 libraries: Optional[Mapping[str, ControlLibrary]] = None) -> None:
        self.cfg = cfg or SimConfig()
        self.spec = spec
        self.seed = seed
        cfg = self.cfg
        self.kernel = Kernel(seed, base_delay=cfg.base_delay, interfaces=cfg.interfaces,
                             event_ceiling=cfg.event_ceiling, trace_dispatch=cfg.trace_dispatch)
        self.defined = sorted(n.nid for n in spec.nodes)
        if len(set(self.defined)) != len(self.defined) or any(n <= 0 for n in self.defined):
            raise ValueError("node ids must be distinct positive integers")
        self.allowed = set(self.defined) if spec.allowed is None else set(spec.allowed)
        self.resources = dict(spec.resources)
        self.groups = dict(spec.groups)
        for gid in sorted({r.group for r in self.resources.values()}):
            validate_group(gid, self.resources)
            if gid not in self.groups:
                members = tuple(sorted(r for r, s in self.resources.items() if s.group == gid))
                self.groups[gid] = GroupSpec(gid, members)
        validate_groups(self.groups, self.resources, self.defined)
        self.libraries = dict(libraries) if libraries is not None else make_libraries()
        self.vservers = VirtualServerRegistry()
        for vs in spec.vservers:
            self.vservers.register(vs)
        self.device = QuorumDevice(self.kernel, cfg.checkpoint_every)
        self.nodes: dict[int, ClusterNode] = {}
        for nd in spec.nodes:
            node = ClusterNode(nd.nid, self.kernel, cfg, self)
            node.clock.base = Fraction(nd.offset)
            node.clock.drift = Fraction(nd.drift)
            self.nodes[nd.nid] = node
        for ld in spec.links:
            self.kernel.set_link(ld.a, ld.b, LinkModel(ld.delay, ld.ifaces, ld.drop))
        dev = cfg.device_delay if spec.device_delay is None else spec.device_delay
        for nid in self.defined:
            self.kernel.set_link(nid, QUORUM_DEVICE, LinkModel(dev, 1))
        for nd in spec.nodes:
            if nd.boot is not None:
                self.kernel.call_at(nd.boot, lambda n=nd.nid: self.boot(n))

    # -- control -----------------------------------------------------------------

    def boot(self, nid: int) -> None:
        if not self.kernel.is_alive(nid):
            self.kernel.revive(nid)

    def run(self, until: Optional[int] = None):
        return self.kernel.run(until)

    @property
    def now(self) -> int:
        return self.kernel.now

    def node(self, nid: int) -> ClusterNode:
        return self.nodes[nid]

    # -- queries -------------------------------------------------------------------

    def online(self) -> list[ClusterNode]:
        return [n for n in self.nodes.values()
                if self.kernel.is_alive(n.id) and n.is_member()]

    def online_ids(self) -> list[int]:
        return [n.id for n in self.online()]

    def views_agree(self) -> bool:
        keys = {n.view_key() for n in self.online()}
        return len(keys) <= 1

    def settled(self) -> bool:
        """No regroup, join or form in progress anywhere."""
        for n in self.nodes.values():
            if not self.kernel.is_alive(n.id):
                continue
            if n.in_regroup() or n.membership.sponsoring:
                return False
            if n.phase not in (NodePhase.ONLINE, NodePhase.PAUSED, NodePhase.OFFLINE):
                return False
        return True

    def owners(self, gid: str) -> set[int]:
        """Owners of ``gid`` as recorded in every Online node's database."""
        from .clusterdb import owner_key
        return {int(n.db.get(owner_key(gid), "0")) for n in self.online()} - {0}

    def replicas_agree(self) -> bool:
        return len({n.db.serialize() for n in self.online()}) <= 1

    def hosting(self, gid: str) -> list[int]:
        """Nodes on which any member of ``gid`` is currently not Offline."""
        out = []
        members = self.groups[gid].members
        for n in self.online():
            if any(n.resmgr.states[r].value != "Offline" for r in members):
                out.append(n.id)
        return out

    def reference_db(self):
        online = self.online()
        return online[0].db if online else None

    def clock_readings(self) -> dict[int, Fraction]:
        now = self.kernel.now
        return {n.id: n.clock.read(now) for n in self.online()}

    def skew(self) -> Fraction:
        return max_skew(self.clock_readings().values())

    def quorum_holders(self) -> list[int]:
        return [n.id for n in self.nodes.values()
                if self.kernel.is_alive(n.id) and n.arbiter.is_owner]

    def trace_text(self, kinds: Optional[Iterable[str]] = None) -> str:
        return self.kernel.trace_text(kinds)

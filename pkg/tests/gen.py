"""Seeded random scenario builders shared by the property and acceptance tests."""

from __future__ import annotations

import random

from clustersim.cluster import Cluster, ClusterSpec, NodeDef
from clustersim.config import SimConfig
from clustersim.simkernel import CrashNode, HealPartition, PartitionSet, ReviveNode

FAST = SimConfig(trace_dispatch=False)


def random_faults(rng: random.Random, n: int, start: int, span: int, count: int):
    """Crash/revive/partition/heal actions inside [start, start+span)."""
    out = []
    ids = list(range(1, n + 1))
    for _ in range(count):
        at = start + rng.randrange(span)
        kind = rng.choice(("crash", "crash", "partition", "revive", "heal"))
        if kind == "crash":
            out.append((at, CrashNode(rng.choice(ids))))
        elif kind == "revive":
            out.append((at, ReviveNode(rng.choice(ids))))
        elif kind == "partition" and n >= 2:
            side = frozenset(x for x in ids if rng.random() < 0.5) or frozenset(ids[:1])
            rest = frozenset(ids) - side
            if rest:
                out.append((at, PartitionSet((side, rest))))
        else:
            out.append((at, HealPartition()))
    return sorted(out, key=lambda p: p[0])


def membership_run(seed: int, cfg: SimConfig = FAST, settle: int = 12000):
    """One randomized membership run; returns the cluster after quiescence."""
    rng = random.Random(seed)
    n = rng.randint(2, 8)
    spec = ClusterSpec(nodes=[NodeDef(i, boot=rng.randrange(0, 400)) for i in range(1, n + 1)])
    cluster = Cluster(spec, cfg, seed)
    k = cluster.kernel
    end_faults = 3000 + rng.randrange(6000)
    for at, action in random_faults(rng, n, 2000, end_faults - 2000, rng.randint(1, 6)):
        k.call_at(at, lambda a=action: k.apply_fault(a))
    k.call_at(end_faults, lambda: k.apply_fault(HealPartition()))
    # bring everyone back so the quiescent state is never vacuous
    for i in range(1, n + 1):
        k.call_at(end_faults, lambda i=i: k.apply_fault(ReviveNode(i)))
    k.run(until=end_faults + settle)
    return cluster

import pytest

from clustersim.cluster import Cluster, ClusterSpec, NodeDef
from clustersim.failover import (ConfigError, FailbackPolicy, GroupSpec, NoEligibleHost,
                                 failback_decision, pull_assignment, select_host)
from clustersim.resmgr import ResourceSpec


def test_select_host():
    assert select_host([3, 1], {1, 2}) == 1
    assert select_host([], {4, 2}) == 2
    assert select_host([1], set()) is None


def test_pull_skips_groups_with_live_owner():
    groups = {"a": GroupSpec("a", (), (2,)), "b": GroupSpec("b", (), ())}
    hosts = {"a": frozenset({1, 2, 3}), "b": frozenset({1, 2, 3})}
    out = pull_assignment(groups, {"a": 1, "b": 3}, {2, 3}, (), hosts)
    assert out == {"a": 2}


def test_pull_spreads_by_lowest_id_without_preferences():
    groups = {"g-a": GroupSpec("g-a"), "g-b": GroupSpec("g-b")}
    hosts = {g: frozenset({1, 2, 3}) for g in groups}
    assert pull_assignment(groups, {}, {2, 3}, (), hosts) == {"g-a": 2, "g-b": 2}


def test_only_paused_nodes_means_no_host():
    groups = {"a": GroupSpec("a")}
    assert pull_assignment(groups, {}, {2}, {2}, {"a": frozenset({2})}) == {"a": None}


def test_failback_window_and_blackout():
    pol = FailbackPolicy(True, 10)
    assert failback_decision(0, 5, pol) == ("defer", 10)
    assert failback_decision(0, 10, pol) == ("migrate", 10)
    black = FailbackPolicy(True, 0, ((100, 200),))
    assert failback_decision(0, 150, black) == ("defer", 200)
    assert failback_decision(0, 150, FailbackPolicy(False))[0] == "never"


def test_preferred_owner_must_be_able_to_host():
    res = {"a": ResourceSpec("a", "generic-app", "g", possible_hosts=(1,))}
    with pytest.raises(ConfigError):
        Cluster(ClusterSpec(nodes=[NodeDef(1), NodeDef(2)], resources=res,
                            groups={"g": GroupSpec("g", ("a",), (2,))}))


def two_groups(n=3, preferred=(1, 2)):
    res = {"a": ResourceSpec("a", "generic-app", "g1")}
    groups = {"g1": GroupSpec("g1", ("a",), preferred)}
    c = Cluster(ClusterSpec(nodes=[NodeDef(i, boot=0 if i == 1 else 60) for i in range(1, n + 1)],
                            resources=res, groups=groups))
    c.run(until=3000)
    return c


def test_owner_death_pulls_to_next_preferred():
    c = two_groups()
    assert c.owners("g1") == {1}
    c.kernel.crash(1)
    c.run(until=8000)
    pulls = [r.detail for r in c.kernel.records("PULL") if r.t > 3000]
    assert pulls and all("g1=2" in p for p in pulls)
    assert c.owners("g1") == {2} and c.hosting("g1") == [2]


def test_operator_move():
    c = two_groups()
    c.node(1).failover.push_group("g1", "operator", target=3)
    c.run(until=4000)
    assert c.owners("g1") == {3} and c.hosting("g1") == [3]
    states = [r.detail for r in c.kernel.records("RES") if r.t >= 3000]
    assert states[:2] == ["rid=a state=OfflinePending group=g1", "rid=a state=Offline group=g1"]


def test_push_without_other_host():
    c = two_groups(n=1, preferred=(1,))
    with pytest.raises(NoEligibleHost):
        c.node(1).failover.push_group("g1", "operator", target=2)
    c.node(1).failover.push_group("g1", "operator")
    c.run(until=4000)
    assert any("no-eligible-host" in r.detail for r in c.kernel.records("GROUP"))
    assert c.hosting("g1") == []


def test_failback_disabled_by_default():
    c = two_groups()
    c.kernel.crash(1)
    c.kernel.call_at(5000, lambda: c.kernel.revive(1))
    c.run(until=15000)
    assert c.owners("g1") == {2}
    assert not c.kernel.records("FAILBACK")

import pytest

from clustersim.cluster import Cluster, ClusterSpec, NodeDef
from clustersim.resmgr import (CrossGroupDependency, CycleDetected, IllegalTransition,
                               ResourceSpec, ResourceState, RestartPolicy, check_arc,
                               dependents_closure, online_order, validate_group)

S = ResourceState


def spec(rid, *deps, group="g", policy=RestartPolicy()):
    return ResourceSpec(rid, "generic-app", group, deps, restart_policy=policy)


def test_validate_chain_cycle_and_cross_group():
    chain = {"a": spec("a", "b"), "b": spec("b", "c"), "c": spec("c")}
    validate_group("g", chain)
    with pytest.raises(CycleDetected):
        validate_group("g", {"a": spec("a", "b"), "b": spec("b", "a")})
    with pytest.raises(CrossGroupDependency):
        validate_group("g1", {"a": spec("a", "d", group="g1"), "d": spec("d", group="g2")})


def test_online_order():
    sql = {"server": spec("server", "database"), "database": spec("database", "disk"),
           "disk": spec("disk")}
    assert online_order("g", sql) == ["disk", "database", "server"]
    assert online_order("g", {"B": spec("B"), "A": spec("A")}) == ["A", "B"]


def test_dependents_closure():
    specs = {"a": spec("a"), "b": spec("b", "a"), "c": spec("c", "b"), "d": spec("d")}
    assert dependents_closure("a", specs) == {"b", "c"}


def test_state_arcs():
    check_arc(S.OFFLINE, S.ONLINE_PENDING)
    check_arc(S.FAILED, S.ONLINE_PENDING)
    with pytest.raises(IllegalTransition):
        check_arc(S.OFFLINE, S.ONLINE)
    check_arc(S.ONLINE_PENDING, S.OFFLINE, forced=True)


def single(resources, until=500):
    c = Cluster(ClusterSpec(nodes=[NodeDef(1)], resources=resources))
    c.run(until=until)
    return c, c.node(1).resmgr


SQL = {"disk": ResourceSpec("disk", "phys-disk", "g"),
       "db": ResourceSpec("db", "generic-app", "g", ("disk",)),
       "srv": ResourceSpec("srv", "generic-app", "g", ("db",))}


def test_leaf_rejected_while_providers_offline():
    c, rm = single(SQL)
    rm.offline_group("g")
    c.run(until=600)
    with pytest.raises(IllegalTransition):
        rm.bring_online("srv")


def test_offline_disk_takes_dependents_first():
    c, rm = single(SQL)
    rm.offline_resource("disk")
    c.run(until=600)
    offs = [r.detail.split()[0] for r in c.kernel.records("RES")
            if r.t > 500 and "state=Offline " in r.detail + " "]
    assert offs == ["rid=srv", "rid=db", "rid=disk"]


def test_failing_online_enters_failed():
    c = Cluster(ClusterSpec(nodes=[NodeDef(1)], resources={"a": spec("a", policy=RestartPolicy(0, 1000, False))}))
    c.libraries["generic-app"].fail_online["a"] = 1
    c.run(until=500)
    assert c.node(1).resmgr.states["a"] is S.FAILED


def test_restart_in_place_cycles_dependents():
    c, rm = single(SQL)
    c.libraries["generic-app"].inject_failure("db", 600)
    c.run(until=1000)
    assert all(s is S.ONLINE for s in rm.states.values())
    cycled = {r.detail.split()[0] for r in c.kernel.records("RES") if r.t >= 600}
    assert cycled == {"rid=db", "rid=srv"}
    assert [r for _, r in rm.restart_log] == ["db"]
    assert 600 <= rm.restart_log[0][0] <= 700


def test_fourth_failure_escalates_to_push():
    res = {"a": spec("a")}
    c = Cluster(ClusterSpec(nodes=[NodeDef(1), NodeDef(2, boot=60)], resources=res))
    c.run(until=3000)
    owner = c.owners("g").pop()
    lib = c.libraries["generic-app"]
    # each death lands after the previous restart completed
    for t in (3060, 3160, 3260, 3360):
        c.kernel.call_at(t, lambda t=t: lib.inject_failure("a", t))
    c.run(until=6000)
    assert any("result=escalate" in r.detail for r in c.kernel.records("RESTART"))
    assert c.owners("g") == {3 - owner}


def test_no_escalation_rests_in_failed():
    res = {"a": spec("a", policy=RestartPolicy(1, 1000, False))}
    c, rm = single(res)
    lib = c.libraries["generic-app"]
    lib.inject_failure("a", 550)
    c.kernel.call_at(700, lambda: lib.inject_failure("a", 700))
    c.run(until=1500)
    assert rm.states["a"] is S.FAILED
    assert c.owners("g") == {1}


def test_monitoring():
    c, rm = single({"a": spec("a")}, until=5100)
    assert rm.states["a"] is S.ONLINE
    c.libraries["generic-app"].inject_failure("a", 5120)
    c.kernel.add_trigger(lambda r: "state=Failed" in r.detail, lambda: seen.append(c.kernel.now))
    seen = []
    c.run(until=5400)
    assert seen and seen[0] - 5120 <= 100
    rm.offline_group("g")
    c.run(until=5500)
    assert rm.monitor_poll("a") is None

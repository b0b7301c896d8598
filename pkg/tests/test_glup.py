from clustersim.cluster import Cluster, ClusterSpec, NodeDef
from clustersim.glup import successor_locker, update_order
from clustersim.simkernel import DropNext


def test_update_order():
    assert update_order({1, 2, 3, 5}, 3) == [3, 5, 1, 2]
    assert update_order({4}, 4) == [4]
    assert update_order(range(1, 7), 6) == [6, 1, 2, 3, 4, 5]


def test_successor_locker_follows_order():
    assert successor_locker({1, 2, 3, 4}, 1, {3, 4}) == 3
    assert successor_locker({1, 2, 3, 4}, 3, {1, 2}) == 1


def cluster(n):
    c = Cluster(ClusterSpec(nodes=[NodeDef(i, boot=0 if i == 1 else 60) for i in range(1, n + 1)]))
    c.run(until=3000)
    assert len(c.online()) == n
    return c


def installs(c, gseq):
    return [r.node for r in c.kernel.records("GLUP") if r.detail == f"gseq={gseq} action=install"]


def test_single_update_gets_next_gseq():
    c = cluster(3)
    v = c.node(1).db.version
    c.node(2).write("a/b", "1")
    c.run(until=3500)
    assert all(n.db.version == v + 1 and n.db.get("a/b") == "1" for n in c.online())


def test_install_order_follows_locker():
    c = cluster(3)
    v = c.node(1).db.version
    c.node(2).write("k", "x")
    c.run(until=3500)
    # locker 1 applies at grant; the sender installs itself, then 3
    assert installs(c, v + 1) == [2, 3]


def test_concurrent_writers_serialize():
    c = cluster(3)
    c.node(2).write("k", "from2")
    c.node(3).write("k", "from3")
    c.run(until=4000)
    vals = {n.db.get("k") for n in c.online()}
    assert len(vals) == 1
    last = c.node(1).db.last_update
    assert vals == {last.payload.value}
    assert c.replicas_agree()


def test_sender_crash_before_grant_leaves_no_trace():
    c = cluster(3)
    # the lock request never reaches the locker
    c.kernel.apply_fault(DropNext(2, 1, 1))
    c.kernel.call_at(3001, lambda: (c.node(2).write("k", "x"), c.kernel.crash(2)))
    c.run(until=8000)
    assert all(n.db.get("k") is None for n in c.online())


def test_only_locker_installed_then_both_crash():
    c = cluster(5)
    k = c.kernel
    k.add_trigger(lambda r: r.kind == "GLUP" and "action=grant" in r.detail and r.t > 3000,
                  lambda: k.defer(lambda: (k.crash(1), k.crash(2))))
    k.call_at(3001, lambda: c.node(2).write("k", "x"))
    c.run(until=12000)
    assert sorted(c.online_ids()) == [3, 4, 5]
    assert all(n.db.get("k") is None for n in c.online())


def test_new_locker_finishes_propagation():
    c = cluster(5)
    k = c.kernel
    k.add_trigger(lambda r: r.kind == "GLUP" and r.node == 3 and "action=install" in r.detail
                  and r.t > 3000, lambda: k.defer(lambda: (k.crash(1), k.crash(2))))
    k.call_at(3001, lambda: c.node(2).write("k", "x"))
    c.run(until=12000)
    assert sorted(c.online_ids()) == [3, 4, 5]
    assert all(n.db.get("k") == "x" for n in c.online())
    assert c.replicas_agree()


def test_sender_crash_mid_propagation_locker_completes():
    c = cluster(4)
    k = c.kernel
    k.add_trigger(lambda r: r.kind == "GLUP" and r.node == 2 and "action=install" in r.detail
                  and r.t > 3000, lambda: k.defer(lambda: k.crash(2)))
    k.call_at(3001, lambda: c.node(2).write("k", "x"))
    c.run(until=12000)
    assert sorted(c.online_ids()) == [1, 3, 4]
    assert all(n.db.get("k") == "x" for n in c.online())

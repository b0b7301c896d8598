from fractions import Fraction

from hypothesis import given, settings
from hypothesis import strategies as st

from clustersim.cluster import Cluster, ClusterSpec, NodeDef
from clustersim.simkernel import HealPartition, PartitionSet
from clustersim.support import EventMsg, NodeClock, max_skew


def cluster(n=3, offsets=None):
    offsets = offsets or {}
    nodes = [NodeDef(i, offset=offsets.get(i, 0), boot=0 if i == 1 else 60)
             for i in range(1, n + 1)]
    c = Cluster(ClusterSpec(nodes=nodes))
    c.run(until=3000)
    return c


def bodies(node):
    return [r.body for r in node.events.merged_log()]


def test_event_reaches_every_log():
    c = cluster()
    c.node(1).events.log_event("disk full")
    c.run(until=3100)
    assert all("disk full" in bodies(n) for n in c.online())


def test_duplicate_delivery_kept_once():
    c = cluster()
    rec = c.node(1).events.log_event("once")
    c.run(until=3100)
    c.node(2).events.on_event(1, EventMsg(rec))
    assert bodies(c.node(2)).count("once") == 1


def test_event_survives_origin_crash():
    c = cluster()
    c.node(3).events.log_event("last words")
    c.kernel.crash(3)
    c.run(until=8000)
    assert all("last words" in bodies(n) for n in c.online())


def test_merge_order_is_deterministic():
    c = cluster(2)
    for i in range(3):
        c.node(1).events.log_event(f"a{i}")
        c.node(2).events.log_event(f"b{i}")
    c.run(until=3100)
    assert bodies(c.node(1)) == bodies(c.node(2))
    recs = c.node(1).events.merged_log()
    assert recs == sorted(recs)


def test_logs_reconverge_after_heal():
    c = cluster(3)
    c.kernel.apply_fault(PartitionSet((frozenset({1, 2}), frozenset({3}))))
    c.run(until=8000)
    c.kernel.apply_fault(HealPartition())
    c.run(until=14000)
    c.node(1).events.log_event("after heal")
    c.run(until=14100)
    assert all("after heal" in bodies(n) for n in c.online())
    assert len(c.online()) == 3


def test_empty_history():
    c = Cluster(ClusterSpec(nodes=[NodeDef(1)]))
    assert c.node(1).events.merged_log() == []


def test_small_offsets_left_alone():
    c = cluster(3, offsets={2: 4, 3: -3})
    c.run(until=6000)
    assert all(not n.time.adjustments for n in c.online())


def test_large_offset_pulled_within_bound():
    c = cluster(3, offsets={3: 400})
    c.run(until=3000 + 3 * c.cfg.time_sync_period)
    assert c.skew() <= c.cfg.skew_bound


def test_new_primary_after_crash():
    c = cluster(3, offsets={3: 300})
    c.kernel.crash(1)
    c.run(until=9000)
    assert c.node(2).time.primary() == 2
    c.run(until=9000 + 3 * c.cfg.time_sync_period)
    assert c.skew() <= c.cfg.skew_bound


def test_max_skew():
    assert max_skew([Fraction(3), Fraction(-2), Fraction(1)]) == 5
    assert max_skew([]) == 0


ops = st.lists(st.tuples(st.integers(0, 50),
                         st.sampled_from(["step", "slew", "drift", "read"]),
                         st.integers(0, 40)), max_size=30)


@settings(max_examples=200, deadline=None)
@given(ops)
def test_adjusted_clock_never_decreases(script):
    clock = NodeClock(0, Fraction(1, 100))
    now, last = 0, clock.read(0)
    for gap, op, amount in script:
        now += gap
        if op == "step":
            clock.step_forward(now, Fraction(amount))
        elif op == "slew" and amount:
            clock.start_slew(now, Fraction(amount), Fraction(1, 2))
        elif op == "drift":
            clock.set_drift(now, Fraction(amount - 20, 100))
        value = clock.read(now)
        assert value >= last
        last = value

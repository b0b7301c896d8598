import pytest

from clustersim.simkernel import (DropNext, EventKind, HealPartition, Kernel, LivelockGuard,
                                  PartitionSet, PastDue, SimEvent)


class Recorder:
    def __init__(self, kernel, ident):
        self.k = kernel
        self.got = []
        kernel.add_endpoint(ident, self)

    def on_message(self, env):
        self.got.append((self.k.now, env.msg))

    def on_timer(self, payload):
        self.got.append((self.k.now, payload))

    def on_crash(self):
        pass

    def on_revive(self):
        pass


def pair():
    k = Kernel(0)
    a, b = Recorder(k, 1), Recorder(k, 2)
    k.revive(1)
    k.revive(2)
    return k, a, b


def test_timer_at_zero_fires_before_later_events():
    k, a, _ = pair()
    k.set_timer(1, 1, "late")
    k.set_timer(1, 0, "early")
    k.run(until=5)
    assert [p for _, p in a.got] == ["early", "late"]


def test_past_due_rejected():
    k = Kernel(0)
    k.run(until=10)
    with pytest.raises(PastDue):
        k.schedule(SimEvent(5, 0, EventKind.COMMAND, lambda: None))


def test_same_due_keeps_schedule_order():
    k = Kernel(0)
    seen = []
    k.call_at(7, lambda: seen.append("A"))
    k.call_at(7, lambda: seen.append("B"))
    k.run()
    assert seen == ["A", "B"]


def test_send_uses_base_delay():
    k, _, b = pair()
    k.run(until=10)
    k.send(1, 2, "hi")
    k.run(until=20)
    assert b.got == [(12, "hi")]


def test_partition_blocks_delivery_until_heal():
    k, _, b = pair()
    k.apply_fault(PartitionSet((frozenset({1}), frozenset({2}))))
    k.send(1, 2, "lost")
    k.run(until=10)
    k.apply_fault(HealPartition())
    k.send(1, 2, "ok")
    k.run(until=20)
    assert [m for _, m in b.got] == ["ok"]


def test_drop_next_loses_only_first():
    k, _, b = pair()
    k.apply_fault(DropNext(1, 2, 1))
    k.send(1, 2, "first")
    k.send(1, 2, "second")
    k.run(until=10)
    assert [m for _, m in b.got] == ["second"]


def test_empty_run_advances_clock():
    k = Kernel(3)
    assert k.run(until=500) == []
    assert k.now == 500


def test_crashed_node_receives_nothing_and_timers_die():
    k, a, b = pair()
    k.set_timer(2, 5, "t")
    k.crash(2)
    k.send(1, 2, "m")
    k.run(until=20)
    assert b.got == []
    k.revive(2)
    k.run(until=40)
    assert b.got == []


def test_event_ceiling_raises_livelock():
    k = Kernel(0, event_ceiling=50)

    def again():
        k.call_at(k.now + 1, again)

    k.call_at(0, again)
    with pytest.raises(LivelockGuard):
        k.run(until=1000)


def test_trigger_fires_once():
    k = Kernel(0)
    hits = []
    k.add_trigger(lambda r: r.kind == "X", lambda: hits.append(k.now))
    k.call_at(3, lambda: k.record("kernel", "X", "a"))
    k.call_at(4, lambda: k.record("kernel", "X", "b"))
    k.run()
    assert hits == [3]


def test_same_seed_same_trace():
    from clustersim.cluster import Cluster, ClusterSpec

    def go():
        c = Cluster(ClusterSpec.simple(4, 40), seed=9)
        c.kernel.call_at(3000, lambda: c.kernel.crash(2))
        c.run(until=6000)
        return c.trace_text()

    assert go() == go()


def test_five_node_boot_one_form_four_joins():
    from clustersim.cluster import Cluster, ClusterSpec

    c = Cluster(ClusterSpec.simple(5, 100), seed=0)
    c.run(until=5000)
    forms = [r for r in c.kernel.records("VIEW") if "reason=form" in r.detail]
    joins = [r for r in c.kernel.records("JOIN") if "result=ok" in r.detail]
    assert len(forms) == 1
    assert len(joins) == 4

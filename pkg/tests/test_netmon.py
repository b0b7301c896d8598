import pytest

from clustersim.netmon import Heartbeat, NetMonitor, UnknownSender
from clustersim.simkernel import Kernel, LinkModel


class Sink:
    def on_message(self, env):
        pass

    def on_timer(self, payload):
        pass

    def on_crash(self):
        pass

    def on_revive(self):
        pass


def monitor(peers=(2, 3, 4), ifaces=1, period=300):
    k = Kernel(0)
    for n in (1,) + tuple(peers):
        k.add_endpoint(n, Sink())
        k.revive(n)
        if n != 1:
            k.set_link(1, n, LinkModel(2, ifaces))
    m = NetMonitor(1, k, period)
    m.set_peers((1,) + tuple(peers), 0)
    return k, m


def test_one_heartbeat_per_peer_and_interface():
    _, m = monitor(ifaces=2)
    assert len(m.tick_heartbeats(0)) == 6


def test_fresh_seq_extends_deadline():
    _, m = monitor()
    entry = m.on_heartbeat(Heartbeat(2, 0, 1), 100)
    assert entry.alive_deadline == 100 + 600


def test_duplicate_seq_on_second_interface_only_marks_it_up():
    _, m = monitor(ifaces=2)
    m.on_heartbeat(Heartbeat(2, 0, 1), 100)
    entry = m.on_heartbeat(Heartbeat(2, 1, 1), 150)
    assert entry.alive_deadline == 700
    assert entry.iface_health[1] == "Up"
    assert entry.iface_last[1] == 150


def test_unknown_sender_discarded():
    _, m = monitor()
    with pytest.raises(UnknownSender):
        m.on_heartbeat(Heartbeat(9, 0, 1), 10)
    assert m.discarded == 1


def test_silence_thresholds():
    _, m = monitor(peers=(2,))
    assert m.check_suspicions(450) == []
    assert m.check_suspicions(600) == []
    out = m.check_suspicions(601)
    assert [(s.about, s.kind) for s in out] == [(2, "NodeSilent")]
    # raised once
    assert m.check_suspicions(700) == []


def test_interface_silence_keeps_node_alive():
    _, m = monitor(peers=(2,), ifaces=2)
    for t in range(300, 1300, 300):
        m.on_heartbeat(Heartbeat(2, 0, t), t)
    out = m.check_suspicions(1250)
    assert [(s.about, s.kind) for s in out] == [((2, 1), "InterfaceSilent")]
    assert not m.is_suspected(2)


def test_snapshot():
    k, m = monitor()
    assert m.connectivity_snapshot() == frozenset({1, 2, 3, 4})
    m.check_suspicions(601)
    assert m.connectivity_snapshot() == frozenset({1})
    k.crash(1)
    assert m.connectivity_snapshot() is None


def test_paused_node_keeps_heartbeating():
    from clustersim.cluster import Cluster, ClusterSpec

    c = Cluster(ClusterSpec.simple(3, 50))
    c.run(until=3000)
    c.node(2).pause()
    c.run(until=6000)
    assert c.node(2).state == "Paused"
    sent = [r for r in c.kernel.records("deliver") if r.t > 3000 and "src=2 " in r.detail
            and "msg=Heartbeat" in r.detail]
    assert sent
    assert not [r for r in c.kernel.records("SUSPECT") if "about=2 " in r.detail + " "]

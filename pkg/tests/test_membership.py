import pytest

from clustersim.cluster import Cluster, ClusterSpec, NodeDef
from clustersim.membership import NodePhase, prune, survives
from clustersim.simkernel import DropNext, PartitionSet


def test_survival_rules():
    assert survives({1, 2, 3, 4, 5}, {1, 2, 3}, 1, 1)
    assert survives({1, 2, 3, 4}, {2, 3}, 2, 1)
    assert not survives({1, 2, 3, 4}, {3, 4}, 2, 1)
    assert not survives({1, 2}, {1}, 1, 2)
    assert survives({1, 2}, {1}, 1, 1)


def test_survives_rejects_foreign_candidate():
    with pytest.raises(ValueError):
        survives({1, 2}, {3}, 1, 1)


def test_prune_drops_most_blamed():
    rows = {1: frozenset({1, 2, 3}), 2: frozenset({1, 2}), 3: frozenset({1, 3})}
    # 2 and 3 tie on blame; the higher id goes
    assert prune({1, 2, 3}, rows, 1) == frozenset({1, 2})
    rows[4] = frozenset({4})
    assert prune({1, 2, 3, 4}, rows, 1) == frozenset({1, 2})


def boot(n, gap=50, seed=0, **kw):
    c = Cluster(ClusterSpec(nodes=[NodeDef(i, boot=(i - 1) * gap) for i in range(1, n + 1)], **kw),
                seed=seed)
    return c


def test_second_node_joins_first():
    c = boot(2, gap=2000)
    c.run(until=4000)
    req = [r for r in c.kernel.records("JOIN") if r.node == 2 and "phase=request" in r.detail]
    assert "sponsor=1" in req[0].detail
    assert [r.detail for r in c.kernel.records("PHASE") if r.node == 2][:3] == [
        "Initializing", "MemberSearch", "Joining"]
    assert c.views_agree() and c.node(2).view.active == frozenset({1, 2})


def test_sole_node_forms():
    c = boot(1)
    c.run(until=1000)
    v = c.node(1).view
    assert c.node(1).state == "Online"
    assert v.tie_breaker == v.locker == 1


def test_form_fails_when_device_held():
    c = boot(1)
    c.device.held_forever = True
    c.run(until=400)
    assert c.node(1).phase is NodePhase.OFFLINE
    assert c.node(1).view is None


def test_race_to_form_has_one_winner():
    c = boot(2, gap=0)
    c.run(until=4000)
    forms = [r for r in c.kernel.records("VIEW") if "reason=form" in r.detail]
    assert len(forms) == 1
    assert c.views_agree() and len(c.online()) == 2


def test_join_bumps_epoch_everywhere():
    c = boot(3, gap=1500)
    c.run(until=2000)
    before = c.node(1).view.epoch
    c.run(until=6000)
    assert c.views_agree()
    assert {n.view.epoch for n in c.online()} == {before + 1}


def test_undefined_applicant_rejected():
    c = Cluster(ClusterSpec(nodes=[NodeDef(1), NodeDef(2, boot=200)], allowed={1}))
    c.run(until=3000)
    assert c.online_ids() == [1]
    assert any("rejected" in r.detail for r in c.kernel.records("JOIN"))


def test_clean_leave_without_regroup():
    c = boot(3)
    c.run(until=3000)
    c.node(1).membership.leave_cluster()
    c.run(until=6000)
    assert sorted(c.online_ids()) == [2, 3]
    assert all(n.view.active == frozenset({2, 3}) for n in c.online())
    assert not [r for r in c.kernel.records("REGROUP") if r.t > 3000]


def test_last_node_leaving_releases_device():
    c = boot(1)
    c.run(until=1000)
    c.node(1).membership.leave_cluster()
    c.run(until=2000)
    assert c.device.reservation is None


def test_crash_one_of_five():
    c = boot(5)
    c.run(until=4000)
    c.kernel.crash(1)
    c.run(until=8000)
    assert sorted(c.online_ids()) == [2, 3, 4, 5]
    assert c.views_agree()


def test_partition_majority_survives():
    c = boot(3)
    c.run(until=4000)
    c.kernel.apply_fault(PartitionSet((frozenset({1, 2}), frozenset({3}))))
    c.run(until=9000)
    assert sorted(c.online_ids()) == [1, 2]
    assert any(r.node == 3 for r in c.kernel.records("HALT"))


def test_lost_regroup_status_restarts_round():
    c = boot(4)
    c.run(until=4000)
    c.kernel.crash(4)
    for peer in (1, 2, 3):
        for other in (1, 2, 3):
            if peer != other:
                c.kernel.apply_fault(DropNext(peer, other, 25))
    c.run(until=20000)
    assert sorted(c.online_ids()) == [1, 2, 3]
    assert c.views_agree()

"""Property tests: implementation functions against the independent oracles."""

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from clustersim.clusterdb import DbState, DbWrite
from clustersim.failover import FailbackPolicy, failback_time, select_host
from clustersim.glup import GlobalUpdate, successor_locker, update_order
from clustersim.membership import survives
from clustersim.resmgr import online_order

import criteria
from gen import membership_run
from oracles import failback_moment, first_eligible, respects_order, surviving_side

node_sets = st.sets(st.integers(1, 8), min_size=1, max_size=8)


@st.composite
def split(draw):
    original = sorted(draw(node_sets))
    cand = draw(st.sets(st.sampled_from(original), min_size=1))
    tb = draw(st.sampled_from(original))
    qo = draw(st.sampled_from(original))
    return original, frozenset(cand), tb, qo


@given(split())
def test_survives_matches_vote_count(case):
    original, cand, tb, qo = case
    rest = frozenset(original) - cand
    sides = [cand] + ([rest] if rest else [])
    expected = surviving_side(original, sides, tb, qo) == cand
    assert survives(original, cand, tb, qo) == expected


@given(split())
def test_two_sides_never_both_survive(case):
    original, cand, tb, qo = case
    rest = frozenset(original) - cand
    if rest:
        assert not (survives(original, cand, tb, qo) and survives(original, rest, tb, qo))


@given(node_sets, st.data())
def test_update_order_is_a_rotation(active, data):
    locker = data.draw(st.sampled_from(sorted(active)))
    order = update_order(active, locker)
    ids = sorted(active)
    k = ids.index(locker)
    assert order == ids[k:] + ids[:k]


@given(node_sets, st.data())
def test_successor_is_first_survivor(active, data):
    locker = data.draw(st.sampled_from(sorted(active)))
    alive = data.draw(st.sets(st.sampled_from(sorted(active)), min_size=1))
    succ = successor_locker(active, locker, alive)
    assert succ in alive
    order = update_order(active, locker)
    assert not set(order[:order.index(succ)]) & alive


@given(st.lists(st.integers(1, 8), unique=True, max_size=8), st.sets(st.integers(1, 8)))
def test_select_host_matches_oracle(preferred, eligible):
    assert select_host(preferred, eligible) == first_eligible(preferred, eligible)


@settings(max_examples=200)
@given(st.integers(0, 10**6))
def test_online_order_respects_dependencies(seed):
    specs = criteria.random_dag(random.Random(seed))
    order = online_order("g", specs)
    assert sorted(order) == sorted(specs)
    edges = {r: s.depends_on for r, s in specs.items()}
    assert respects_order(order, edges, providers_first=True)


@st.composite
def blackouts(draw):
    out = []
    for _ in range(draw(st.integers(0, 4))):
        s = draw(st.integers(0, 400))
        out.append((s, s + draw(st.integers(1, 120))))
    return tuple(out)


@given(st.integers(0, 300), st.integers(0, 200), blackouts())
def test_failback_time_matches_scan(joined, min_uptime, bl):
    t = failback_time(joined, joined, FailbackPolicy(True, min_uptime, bl))
    assert t == failback_moment(joined, min_uptime, bl, horizon=10**4)


def _updates(values):
    return [GlobalUpdate(i, 1, 1, ("r", i), DbWrite(f"k/{v % 5}", str(v)))
            for i, v in enumerate(values, start=1)]


@given(st.lists(st.integers(0, 99), max_size=40), st.integers(0, 40), st.integers(1, 16))
def test_sync_reproduces_sponsor(values, behind, cp):
    ups = _updates(values)
    sponsor, applicant = DbState(cp), DbState(cp)
    for u in ups:
        sponsor.apply(u)
    for u in ups[:max(0, len(ups) - behind)]:
        applicant.apply(u)
    applicant.install_sync(sponsor.sync_for(applicant.version, applicant.chain))
    assert applicant.digest() == sponsor.digest()
    assert applicant.entries == sponsor.entries


@given(st.lists(st.integers(0, 99), min_size=1, max_size=20))
def test_apply_is_idempotent(values):
    db = DbState()
    ups = _updates(values)
    for u in ups:
        assert db.apply(u)
    before = db.digest()
    assert not any(db.apply(u) for u in ups)
    assert db.digest() == before


@settings(max_examples=15, deadline=None)
@given(st.integers(10**4, 10**5))
def test_membership_runs_agree(seed):
    c = membership_run(seed)
    assert c.online()
    assert c.views_agree()
    assert c.replicas_agree()

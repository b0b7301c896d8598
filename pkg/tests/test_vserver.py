import pytest

from clustersim.clusterdb import DbState, DbWrite, owner_key, state_key
from clustersim.glup import GlobalUpdate
from clustersim.runner import run_scenario
from clustersim.scenario import parse
from clustersim.vserver import NoVirtualContext, UnknownName, VirtualServer, VirtualServerRegistry


def db_with(owner, state="Online"):
    db = DbState()
    db.apply(GlobalUpdate(1, 1, 1, None, DbWrite(owner_key("g1"), str(owner))))
    db.apply(GlobalUpdate(2, 1, 1, None, DbWrite(state_key("g1"), state)))
    return db


def registry():
    reg = VirtualServerRegistry()
    reg.register(VirtualServer("vsA", "10.0.0.1", "g1"))
    return reg


def test_resolve_and_remap():
    reg = registry()
    assert reg.resolve("vsA", db_with(2)) == 2
    assert reg.remap_endpoint(r"\\vsA\sql", db_with(2)) == r"\\n2\$vsA\sql"
    assert reg.remap_endpoint(r"\\vsA\sql", db_with(3)) == r"\\n3\$vsA\sql"
    assert reg.resolve("vsA", db_with(2, "Migrating")) is None
    with pytest.raises(UnknownName):
        reg.resolve("nope", db_with(2))


def test_identity():
    reg = registry()
    assert reg.virtual_identity("g1") == "vsA"
    with pytest.raises(NoVirtualContext):
        reg.virtual_identity(None)


def test_config_write_stays_in_subtree():
    reg = registry()
    reg.register(VirtualServer("vsB", "10.0.0.2", "g2"))
    w = reg.config_write("vsA", "db/port", "1433")
    assert w.path == "vs/vsA/db/port"
    for bad in ("../vsB/x", "", "a//b"):
        with pytest.raises(ValueError):
            reg.config_write("vsA", bad, "1")


SCENARIO = r"""
seed 3
node 2 boot=0
node 1 boot=200
node 3 boot=200
resource app type=generic-app group=g1
group g1 preferred=2,3
vserver vsA group=g1
at 3000 expect resolve vsA is 2
at 3000 expect remap \\vsA\sql is \\n2\$vsA\sql
at 3000 expect identity g1 is vsA
at 3001 crash 2
at 3002 expect identity g1 is vsA
at 9000 expect resolve vsA is 3
at 9000 expect remap \\vsA\sql is \\n3\$vsA\sql
at 9000 expect identity g1 is vsA
at 9100 vsconfig vsA port 1433
at 9500 expect db vs/vsA/port is 1433
"""


def test_migration_follows_group():
    report = run_scenario(parse(SCENARIO))
    assert report.exit_code == 0, report.format()
    assert all(a.ok for a in report.assertions)
    assert len(report.assertions) == 8
